//! `tandem`: train linear actor-critic policies with the overlapped,
//! lockstep, or asynchronous engine, and check the analytical performance
//! models against simulation.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 numerical failure or
//! unstable queue.

mod config;
mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;
use tandem_core::analysis::{
    delayed_sgd_experiment, expected_latency, expected_runtime, geometric_tv_distance,
    simulate_mm1, simulate_sync_rollout, DelayedSgdConfig, QueueSimConfig, RuntimeModelInput,
};
use tandem_core::baselines::{run_async, run_lockstep, AsyncQueueConfig};
use tandem_core::engine::{run_hts, EngineConfig, EngineKind, EnvSpec, RunOutput};
use tandem_core::envs::{StepTimeKind, StepTimeModel, SyntheticSpec};
use tandem_core::policy::LearnerHyperparams;
use tandem_core::Error;

use crate::config::{EngineKindToken, FormatToken, RunConfigFile};
use crate::output::{open_sink, write_csv_table, write_metrics, ParamsDump};

#[derive(Parser)]
#[command(
    name = "tandem",
    version,
    about = "Overlapped actor-learner training with analytical performance models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training run and emit per-epoch metrics.
    Train(TrainArgs),
    /// Compare the closed-form rollout runtime model with simulation.
    SimulateRuntime(SimulateRuntimeArgs),
    /// Compare the closed-form queue occupancy model with simulation.
    SimulateLatency(SimulateLatencyArgs),
    /// Run the delayed-gradient regret experiment.
    DelayedSgd(DelayedSgdArgs),
    /// Benchmark overlapped against lockstep throughput.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file (falls back to $TANDEM_CONFIG, then defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Engine kind override: hts, lockstep, or async.
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Environment count override.
    #[arg(long)]
    envs: Option<usize>,
    /// Actor thread count override.
    #[arg(long)]
    actors: Option<usize>,
    /// Steps per environment per epoch override.
    #[arg(long)]
    alpha: Option<usize>,
    /// Total environment steps override.
    #[arg(long)]
    steps: Option<u64>,
    /// Metrics destination override ("-" = stdout).
    #[arg(long)]
    out: Option<String>,
    /// Metrics format override: csv or jsonl.
    #[arg(long)]
    format: Option<String>,
    /// Drop wall_time and sps columns from the metrics.
    #[arg(long, action = ArgAction::SetTrue)]
    strip_timing: bool,
    /// Also write trained parameters (raw IEEE-754 bits) as JSON.
    #[arg(long)]
    params_out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateRuntimeArgs {
    /// Parallel environments.
    #[arg(long, default_value_t = 16)]
    envs: usize,
    /// Steps per environment per round.
    #[arg(long, default_value_t = 4)]
    alpha: usize,
    /// Exponential step-time rate.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Rounds per configuration (total steps = envs * alpha * rounds).
    #[arg(long, default_value_t = 100)]
    rounds: u64,
    /// Explicit total steps (must divide envs * alpha); overrides --rounds.
    #[arg(long)]
    steps: Option<u64>,
    /// Per-step actor compute seconds.
    #[arg(long, default_value_t = 0.0)]
    actor_compute: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Monte Carlo replications per configuration.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Comma-separated alpha values to sweep (overrides --alpha).
    #[arg(long)]
    alpha_sweep: Option<String>,
    /// Comma-separated beta values to sweep (overrides --beta).
    #[arg(long)]
    beta_sweep: Option<String>,
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args)]
struct SimulateLatencyArgs {
    /// Per-environment arrival rate.
    #[arg(long, default_value_t = 100.0)]
    per_env_rate: f64,
    /// Queue service rate.
    #[arg(long, default_value_t = 4000.0)]
    service_rate: f64,
    /// Single environment count (errors when the queue is unstable).
    #[arg(long, default_value_t = 20)]
    envs: usize,
    /// Comma-separated environment counts; unstable points become marker
    /// rows instead of errors.
    #[arg(long)]
    n_sweep: Option<String>,
    /// Simulated events per configuration.
    #[arg(long, default_value_t = 1_000_000)]
    events: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args)]
struct DelayedSgdArgs {
    /// Gradient staleness in steps.
    #[arg(long, default_value_t = 1)]
    delay: u64,
    /// Comma-separated delays to sweep (overrides --delay).
    #[arg(long)]
    delay_sweep: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    steps: u64,
    /// Sample-set scale bound.
    #[arg(long, default_value_t = 1.0)]
    diameter: f64,
    /// Step-size scale override (default: tuned from the diameter).
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "-")]
    out: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 16)]
    envs: usize,
    #[arg(long, default_value_t = 4)]
    actors: usize,
    /// Steps per environment per epoch.
    #[arg(long, default_value_t = 16)]
    alpha: usize,
    #[arg(long, default_value_t = 4)]
    epochs: u64,
    #[arg(long, default_value_t = 512)]
    feature_dim: usize,
    #[arg(long, default_value_t = 8)]
    actions: usize,
    /// Mean environment step time in milliseconds.
    #[arg(long, default_value_t = 2.0)]
    mean_step_ms: f64,
    /// Step-time distribution: exp or const.
    #[arg(long, default_value = "exp")]
    distribution: String,
    /// Dense observations (gives the learner realistic per-feature work).
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    dense_features: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "-")]
    out: String,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Usage(_) => 2,
            Error::Numeric(_) | Error::UnstableQueue { .. } => 3,
        };
        std::process::exit(code);
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::SimulateRuntime(args) => cmd_simulate_runtime(args),
        Command::SimulateLatency(args) => cmd_simulate_latency(args),
        Command::DelayedSgd(args) => cmd_delayed_sgd(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, Error> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<T>()
                .map_err(|_| Error::usage(format!("invalid {what} value {part:?}")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::usage(format!("empty {what} list")));
    }
    Ok(out)
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let path = args
        .config
        .clone()
        .or_else(|| std::env::var_os("TANDEM_CONFIG").map(PathBuf::from));
    let mut file = match path {
        Some(p) => RunConfigFile::load(&p)?,
        None => RunConfigFile::default(),
    };

    if let Some(token) = &args.engine {
        file.engine.kind = EngineKindToken::parse(token)?;
    }
    if let Some(seed) = args.seed {
        file.engine.seed = seed;
    }
    if let Some(envs) = args.envs {
        file.engine.n_envs = envs;
    }
    if let Some(actors) = args.actors {
        file.engine.n_actors = actors;
    }
    if let Some(alpha) = args.alpha {
        file.engine.sync_interval = alpha;
    }
    if let Some(steps) = args.steps {
        file.engine.total_steps = steps;
    }
    if let Some(out) = &args.out {
        file.output.path = out.clone();
    }
    if let Some(format) = &args.format {
        file.output.format = FormatToken::parse(format)?;
    }
    if args.strip_timing {
        file.output.strip_timing = true;
    }

    let engine_config = file.to_engine_config();
    let run = match engine_config.kind {
        EngineKind::Hts => run_hts(&engine_config)?,
        EngineKind::Lockstep => run_lockstep(&engine_config)?,
        EngineKind::Async => {
            run_async(&AsyncQueueConfig {
                base: engine_config,
                queue_capacity: file.async_queue.queue_capacity,
            })?
            .run
        }
    };

    let mut sink = open_sink(&file.output.path)?;
    write_metrics(sink.as_mut(), &run.metrics, file.output.format, file.output.strip_timing)?;
    if let Some(params_path) = &args.params_out {
        ParamsDump::from_run(&run).write_to(params_path)?;
    }
    Ok(())
}

fn cmd_simulate_runtime(args: SimulateRuntimeArgs) -> Result<(), Error> {
    let alphas: Vec<usize> = match &args.alpha_sweep {
        Some(list) => parse_list(list, "alpha")?,
        None => vec![args.alpha],
    };
    let betas: Vec<f64> = match &args.beta_sweep {
        Some(list) => parse_list(list, "beta")?,
        None => vec![args.beta],
    };

    let mut rows = Vec::new();
    for &alpha in &alphas {
        for &beta in &betas {
            let total_steps = match args.steps {
                Some(steps) => steps,
                None => (args.envs * alpha) as u64 * args.rounds,
            };
            let input = RuntimeModelInput {
                n: args.envs,
                total_steps,
                alpha,
                beta,
                actor_compute: args.actor_compute,
            };
            let formula = expected_runtime(&input)?;
            let simulated = simulate_sync_rollout(&input, args.seed, args.reps)?;
            let rel_error = (formula - simulated).abs() / simulated.abs().max(1e-12);
            rows.push(format!(
                "{},{},{},{},{},{},{},{}",
                args.envs, alpha, beta, total_steps, args.actor_compute, formula, simulated,
                rel_error
            ));
        }
    }

    let mut sink = open_sink(&args.out)?;
    write_csv_table(
        sink.as_mut(),
        "n,alpha,beta,total_steps,actor_compute,formula,simulated,rel_error",
        &rows,
    )
}

fn cmd_simulate_latency(args: SimulateLatencyArgs) -> Result<(), Error> {
    let header = "n,rho,formula,simulated,tv_distance,status";
    let mut rows = Vec::new();

    let run_point = |n: usize| -> Result<String, Error> {
        let formula = expected_latency(n, args.per_env_rate, args.service_rate)?;
        let rho = n as f64 * args.per_env_rate / args.service_rate;
        let stats = simulate_mm1(
            &QueueSimConfig {
                n,
                lambda0: args.per_env_rate,
                mu: args.service_rate,
                horizon_events: args.events,
            },
            args.seed,
        )?;
        let tv = geometric_tv_distance(&stats.occupancy, rho)?;
        Ok(format!("{n},{rho},{formula},{},{tv},ok", stats.mean_queue_length))
    };

    match &args.n_sweep {
        Some(list) => {
            for n in parse_list::<usize>(list, "environment count")? {
                match run_point(n) {
                    Ok(row) => rows.push(row),
                    Err(Error::UnstableQueue { rho }) => {
                        rows.push(format!("{n},{rho},,,,unstable"));
                    }
                    Err(other) => return Err(other),
                }
            }
        }
        None => rows.push(run_point(args.envs)?),
    }

    let mut sink = open_sink(&args.out)?;
    write_csv_table(sink.as_mut(), header, &rows)
}

fn cmd_delayed_sgd(args: DelayedSgdArgs) -> Result<(), Error> {
    let delays: Vec<u64> = match &args.delay_sweep {
        Some(list) => parse_list(list, "delay")?,
        None => vec![args.delay],
    };

    let mut rows = Vec::new();
    for &delay in &delays {
        let mut config = DelayedSgdConfig::from_diameter(delay, args.steps, args.diameter);
        if let Some(base_lr) = args.base_lr {
            config.base_lr = base_lr;
        }
        let envelope = config.regret_envelope();
        for point in delayed_sgd_experiment(&config, args.seed)? {
            rows.push(format!("{delay},{},{},{envelope}", point.step, point.average_regret));
        }
    }

    let mut sink = open_sink(&args.out)?;
    write_csv_table(sink.as_mut(), "delay,step,average_regret,envelope", &rows)
}

#[derive(Serialize)]
struct BenchSide {
    wall_seconds: f64,
    steps_per_second: f64,
}

#[derive(Serialize)]
struct BenchReport {
    total_steps: u64,
    envs: usize,
    alpha: usize,
    epochs: u64,
    hts: BenchSide,
    lockstep: BenchSide,
    /// hts steps-per-second over lockstep steps-per-second.
    speedup: f64,
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let kind = match args.distribution.as_str() {
        "exp" => StepTimeKind::Exponential { rate: 1000.0 / args.mean_step_ms },
        "const" => StepTimeKind::Constant { seconds: args.mean_step_ms / 1000.0 },
        other => {
            return Err(Error::usage(format!(
                "unknown distribution {other:?}; expected exp or const"
            )))
        }
    };
    let total_steps = (args.envs * args.alpha) as u64 * args.epochs;
    let mut config = EngineConfig::<f64> {
        kind: EngineKind::Hts,
        n_envs: args.envs,
        n_actors: args.actors,
        sync_interval: args.alpha,
        total_steps,
        seed: args.seed,
        hyperparams: LearnerHyperparams {
            discount: 0.99,
            nstep: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 0.01,
        },
        env: EnvSpec::Synthetic(SyntheticSpec {
            feature_dim: args.feature_dim,
            action_count: args.actions,
            horizon: args.alpha as u64 * args.epochs,
            model: StepTimeModel { kind, actor_compute_time: 0.0 },
            real_sleep: true,
            dense_features: args.dense_features,
        }),
    };

    let timed = |out: Result<RunOutput<f64>, Error>, wall: f64| -> Result<BenchSide, Error> {
        out.map(|_| BenchSide { wall_seconds: wall, steps_per_second: total_steps as f64 / wall })
    };

    let start = Instant::now();
    let hts_run = run_hts(&config);
    let hts = timed(hts_run, start.elapsed().as_secs_f64())?;

    config.kind = EngineKind::Lockstep;
    let start = Instant::now();
    let lockstep_run = run_lockstep(&config);
    let lockstep = timed(lockstep_run, start.elapsed().as_secs_f64())?;

    let report = BenchReport {
        total_steps,
        envs: args.envs,
        alpha: args.alpha,
        epochs: args.epochs,
        speedup: hts.steps_per_second / lockstep.steps_per_second,
        hts,
        lockstep,
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::usage(format!("serialize failed: {e}")))?;
    let mut sink = open_sink(&args.out)?;
    use std::io::Write;
    writeln!(sink, "{text}").map_err(|e| Error::usage(format!("write failed: {e}")))?;
    sink.flush().map_err(|e| Error::usage(format!("write failed: {e}")))?;
    Ok(())
}
