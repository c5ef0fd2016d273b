//! The overlapped actor-learner engine.
//!
//! Per epoch, `n_envs` executor threads collect `sync_interval` steps each
//! into the write-role storage while the learner consumes the previous
//! epoch's batch from the read-role storage; a two-phase barrier then swaps
//! roles. Actions are computed by a detached pool of actor threads, one
//! forward pass per observation, so the number of actors cannot change any
//! arithmetic: all randomness is derived from `(seed, env, step)` counters
//! and gradient accumulation walks a canonical order. Runs are bit-for-bit
//! reproducible for a fixed seed, at any actor count.
//!
//! Parameter flow: actions of epoch `j` are drawn under parameters version
//! `j`; the learner updates using the gradient at the epoch `j - 1` snapshot
//! while epoch `j` is being collected (a one-epoch-delayed update). Epoch 0
//! applies a zero gradient so that versions align with epochs from the
//! start.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Barrier, Mutex, RwLock};
use std::time::Instant;

use crate::buffers::{
    ActionBuffer, ActionMsg, Snapshot, StateBuffer, StateMsg, StoragePair, Transition,
};
use crate::envs::{Environment, GridWorld, GridWorldSpec, SyntheticEnv, SyntheticSpec, GRID_ACTIONS};
use crate::policy::{
    actor_critic_gradient, apply_policy_update, apply_value_update, policy_forward,
    sample_action, LearnerHyperparams, PolicyGradient, PolicyParams, ValueGradient, ValueParams,
};
use crate::rng::{mix64, unit_f64, GOLDEN_GAMMA};
use crate::{Error, Result, Scalar};

const ENV_STREAM_MULT: u64 = 0x9FB2_1C65_1E98_DF25;
const STEP_STREAM_MULT: u64 = 0xC2B2_AE3D_27D4_EB4F;
const EPISODE_STREAM: u64 = 0x51AF_3FD5_F3C8_82AD;

/// RNG word for one environment step, a pure function of the identifiers.
/// Every stochastic choice in a run keys off these words, which is what
/// makes runs replayable regardless of thread scheduling.
pub fn derive_step_seed(run_seed: u64, env_id: u64, step_index: u64) -> u64 {
    let a = mix64(run_seed ^ env_id.wrapping_mul(ENV_STREAM_MULT).wrapping_add(GOLDEN_GAMMA));
    mix64(a ^ step_index.wrapping_mul(STEP_STREAM_MULT).wrapping_add(GOLDEN_GAMMA))
}

/// Seed for the `ordinal`-th episode of an environment, on a stream disjoint
/// from step seeds.
pub(crate) fn episode_seed(run_seed: u64, env_id: u64, ordinal: u64) -> u64 {
    derive_step_seed(run_seed ^ EPISODE_STREAM, env_id, ordinal)
}

/// Engine selector; config files use the tokens `hts`, `lockstep`, `async`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineKind {
    Hts,
    Lockstep,
    Async,
}

/// Which environment each executor owns.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvSpec<S> {
    GridWorld(GridWorldSpec<S>),
    Synthetic(SyntheticSpec),
}

impl<S: Scalar> EnvSpec<S> {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnvSpec::GridWorld(s) => s.validate(),
            EnvSpec::Synthetic(s) => s.validate(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            EnvSpec::GridWorld(s) => s.width * s.height,
            EnvSpec::Synthetic(s) => s.feature_dim,
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            EnvSpec::GridWorld(_) => GRID_ACTIONS,
            EnvSpec::Synthetic(s) => s.action_count,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment<S>>> {
        match self {
            EnvSpec::GridWorld(s) => Ok(Box::new(GridWorld::new(*s)?)),
            EnvSpec::Synthetic(s) => Ok(Box::new(SyntheticEnv::new(*s)?)),
        }
    }
}

/// Full description of a training run.
#[derive(Clone, Debug)]
pub struct EngineConfig<S> {
    pub kind: EngineKind,
    pub n_envs: usize,
    pub n_actors: usize,
    /// Steps each environment contributes per epoch (the batch interval).
    pub sync_interval: usize,
    /// Total environment steps across all environments; must be divisible
    /// by `n_envs * sync_interval`.
    pub total_steps: u64,
    pub seed: u64,
    pub hyperparams: LearnerHyperparams<S>,
    pub env: EnvSpec<S>,
}

impl<S: Scalar> EngineConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.n_envs == 0 {
            return Err(Error::usage("n_envs must be >= 1"));
        }
        if self.n_actors == 0 {
            return Err(Error::usage("n_actors must be >= 1"));
        }
        if self.sync_interval == 0 {
            return Err(Error::usage("sync_interval must be >= 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::usage("total_steps must be >= 1"));
        }
        let per_epoch = (self.n_envs * self.sync_interval) as u64;
        if self.total_steps % per_epoch != 0 {
            return Err(Error::usage(format!(
                "total_steps ({}) must be divisible by n_envs * sync_interval ({per_epoch})",
                self.total_steps
            )));
        }
        self.hyperparams.validate()?;
        self.env.validate()
    }

    pub fn epochs(&self) -> u64 {
        self.total_steps / (self.n_envs * self.sync_interval) as u64
    }
}

/// One row of run telemetry, emitted per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: u64,
    /// Environment steps collected this epoch (`n_envs * sync_interval`).
    pub env_steps: u64,
    /// Wall-clock seconds this epoch took.
    pub wall_time: f64,
    /// Steps per second this epoch.
    pub sps: f64,
    /// Mean discounted return over the last (up to) 100 completed episodes;
    /// 0 until the first episode completes.
    pub avg_episode_return: f64,
    /// Epochs between the update's batch and the parameters it was applied
    /// to: 0 for the bootstrap epoch and synchronous baselines, 1 for the
    /// overlapped engine, measured per update for the async baseline.
    pub policy_lag: u64,
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct RunOutput<S> {
    pub metrics: Vec<MetricsRecord>,
    pub policy: PolicyParams<S>,
    pub value: ValueParams<S>,
    /// Order-sensitive fingerprint of the canonical transition stream;
    /// equal digests mean equal trajectories.
    pub transition_digest: u64,
}

/// Wall-clock spans (seconds since run start) for overlap inspection.
#[derive(Clone, Debug)]
pub struct EpochTrace {
    pub epoch: u64,
    /// Earliest executor start to latest executor finish.
    pub rollout: (f64, f64),
    /// Learner busy window (gradient + update); `None` for the bootstrap
    /// epoch.
    pub learner: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct EngineTrace {
    pub epochs: Vec<EpochTrace>,
}

const STOP_UNSET: u64 = u64::MAX;

struct Shared<S: Scalar> {
    n_envs: usize,
    alpha: usize,
    epochs: u64,
    seed: u64,
    hp: LearnerHyperparams<S>,
    states: StateBuffer<S>,
    actions: ActionBuffer,
    pair: StoragePair<S>,
    /// Parameters actors act under; rewritten by the epoch leader.
    published: RwLock<Snapshot<S>>,
    /// Learner-owned parameters; leader clones them at the barrier.
    master: Mutex<Snapshot<S>>,
    barrier: Barrier,
    /// Per-env returns of episodes completed this epoch.
    episodes: Vec<Mutex<Vec<f64>>>,
    recent: Mutex<VecDeque<f64>>,
    metrics: Mutex<Vec<MetricsRecord>>,
    digest: Mutex<u64>,
    epoch_clock: Mutex<Instant>,
    run_start: Instant,
    abort: AtomicBool,
    /// Epoch at which all threads agree to stop; written only by the epoch
    /// leader between the two barrier phases.
    stop: AtomicU64,
    failure: Mutex<Option<Error>>,
    exec_spans: Vec<Mutex<Vec<(f64, f64)>>>,
    learner_spans: Mutex<Vec<(u64, f64, f64)>>,
}

impl<S: Scalar> Shared<S> {
    fn fail(&self, err: Error) {
        let mut slot = self.failure.lock().unwrap();
        if slot.is_none() {
            *slot = Some(err);
        }
        drop(slot);
        self.abort.store(true, Ordering::SeqCst);
    }

    fn elapsed(&self) -> f64 {
        self.run_start.elapsed().as_secs_f64()
    }

    /// Runs between the two barrier phases in exactly one thread per epoch.
    fn leader_epoch(&self, epoch: u64) {
        if self.abort.load(Ordering::SeqCst) {
            if self.stop.load(Ordering::SeqCst) == STOP_UNSET {
                self.stop.store(epoch, Ordering::SeqCst);
            }
            return;
        }
        let now = Instant::now();
        let mut clock = self.epoch_clock.lock().unwrap();
        let wall = now.duration_since(*clock).as_secs_f64();
        *clock = now;
        drop(clock);

        let write = self.pair.write_storage();
        {
            let mut digest = self.digest.lock().unwrap();
            *digest = write.fold_digest(*digest);
        }

        let mut recent = self.recent.lock().unwrap();
        for env in &self.episodes {
            for r in env.lock().unwrap().drain(..) {
                recent.push_back(r);
                if recent.len() > 100 {
                    recent.pop_front();
                }
            }
        }
        let avg = if recent.is_empty() {
            0.0
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        };
        drop(recent);

        let steps = (self.n_envs * self.alpha) as u64;
        self.metrics.lock().unwrap().push(MetricsRecord {
            epoch,
            env_steps: steps,
            wall_time: wall,
            sps: steps as f64 / wall.max(1e-9),
            avg_episode_return: avg,
            policy_lag: if epoch == 0 { 0 } else { 1 },
        });

        let snapshot = self.master.lock().unwrap().clone();
        *self.published.write().unwrap() = snapshot.clone();
        if let Err(e) = self.pair.swap(snapshot) {
            self.fail(e);
            self.stop.store(epoch, Ordering::SeqCst);
        }
    }
}

fn executor_loop<S: Scalar>(shared: &Shared<S>, env_id: usize, mut env: Box<dyn Environment<S>>) {
    let mut episode_count = 0u64;
    let mut state = env.reset(episode_seed(shared.seed, env_id as u64, 0));
    let mut ep_return = S::zero();
    let mut ep_discount = S::one();
    for epoch in 0..shared.epochs {
        let t0 = shared.elapsed();
        if !shared.abort.load(Ordering::SeqCst) {
            let result = executor_epoch(
                shared,
                env_id,
                env.as_mut(),
                epoch,
                &mut state,
                &mut ep_return,
                &mut ep_discount,
                &mut episode_count,
            );
            if let Err(e) = result {
                shared.fail(Error::usage(format!("executor {env_id} at epoch {epoch}: {e}")));
            }
        }
        let t1 = shared.elapsed();
        shared.exec_spans[env_id].lock().unwrap().push((t0, t1));
        if shared.barrier.wait().is_leader() {
            shared.leader_epoch(epoch);
        }
        shared.barrier.wait();
        if shared.stop.load(Ordering::SeqCst) <= epoch {
            break;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn executor_epoch<S: Scalar>(
    shared: &Shared<S>,
    env_id: usize,
    env: &mut dyn Environment<S>,
    epoch: u64,
    state: &mut crate::envs::EnvState<S>,
    ep_return: &mut S,
    ep_discount: &mut S,
    episode_count: &mut u64,
) -> Result<()> {
    let alpha = shared.alpha as u64;
    for k in 0..alpha {
        let step = epoch * alpha + k;
        let word = derive_step_seed(shared.seed, env_id as u64, step);
        shared.states.push(StateMsg {
            env_id,
            features: state.features.clone(),
            step_index: step,
            sample_word: word,
        })?;
        let action = shared.actions.take(env_id)?;
        let (next, reward, done) = env.step(action)?;
        let features = std::mem::take(&mut state.features);
        shared.pair.append(Transition { env_id, step_index: step, features, action, reward, done })?;
        *ep_return += *ep_discount * reward;
        *ep_discount *= shared.hp.discount;
        if done {
            shared.episodes[env_id]
                .lock()
                .unwrap()
                .push(ep_return.to_f64().unwrap_or(f64::NAN));
            *ep_return = S::zero();
            *ep_discount = S::one();
            *episode_count += 1;
            *state = env.reset(episode_seed(shared.seed, env_id as u64, *episode_count));
        } else {
            *state = next;
        }
    }
    shared.pair.set_final(env_id, state.features.clone())
}

fn learner_loop<S: Scalar>(shared: &Shared<S>) {
    for epoch in 0..shared.epochs {
        if !shared.abort.load(Ordering::SeqCst) {
            if epoch == 0 {
                // Zero-gradient bootstrap: aligns parameter versions with
                // epochs without changing any weights.
                let mut master = shared.master.lock().unwrap();
                let pz = PolicyGradient::zeros(
                    master.policy.feature_dim,
                    master.policy.action_count,
                );
                let vz = ValueGradient::zeros(master.value.weights.len());
                let lr = shared.hp.learning_rate;
                let r = apply_policy_update(&mut master.policy, &pz, lr)
                    .and_then(|_| apply_value_update(&mut master.value, &vz, lr));
                drop(master);
                if let Err(e) = r {
                    shared.fail(e);
                }
            } else {
                // Freshly released executors may still sit on the runqueue;
                // give them first dispatch so single-core hosts interleave
                // this gradient with their step delays. Results never depend
                // on scheduling.
                std::thread::yield_now();
                let t0 = shared.elapsed();
                let result = (|| -> Result<()> {
                    let read = shared.pair.read_storage();
                    let snap = read
                        .snapshot()
                        .ok_or_else(|| Error::usage("read storage missing snapshot"))?;
                    let (pg, vg) =
                        actor_critic_gradient(&snap.policy, &snap.value, read, &shared.hp)?;
                    let mut master = shared.master.lock().unwrap();
                    apply_policy_update(&mut master.policy, &pg, shared.hp.learning_rate)?;
                    apply_value_update(&mut master.value, &vg, shared.hp.learning_rate)
                })();
                if let Err(e) = result {
                    shared.fail(Error::numeric_or_usage(e, format!("learner at epoch {epoch}")));
                }
                let t1 = shared.elapsed();
                shared.learner_spans.lock().unwrap().push((epoch, t0, t1));
                shared.pair.mark_exhausted();
            }
        } else if epoch >= 1 {
            shared.pair.mark_exhausted();
        }
        if shared.barrier.wait().is_leader() {
            shared.leader_epoch(epoch);
        }
        shared.barrier.wait();
        if shared.stop.load(Ordering::SeqCst) <= epoch {
            break;
        }
    }
}

fn actor_loop<S: Scalar>(shared: &Shared<S>) {
    while let Some(batch) = shared.states.take_all_wait() {
        let snap = shared.published.read().unwrap();
        for msg in batch {
            // Independent per-observation forward: no arithmetic crosses
            // observations, so batching across actors cannot matter.
            let action = (|| -> Result<usize> {
                let probs = policy_forward(&snap.policy, &msg.features)?;
                let u = S::from(unit_f64(msg.sample_word))
                    .ok_or_else(|| Error::numeric("sample word not representable"))?;
                sample_action(&probs, u)
            })();
            let action = match action {
                Ok(a) => a,
                Err(e) => {
                    shared.fail(Error::numeric_or_usage(
                        e,
                        format!("actor failed on env {} step {}", msg.env_id, msg.step_index),
                    ));
                    // Fallback keeps the owning executor unblocked; the run
                    // aborts at the next barrier.
                    0
                }
            };
            if shared.actions.push(ActionMsg { env_id: msg.env_id, action }).is_err() {
                return;
            }
        }
    }
}

impl Error {
    /// Wrap with context, preserving the numeric/usage class.
    pub(crate) fn numeric_or_usage(err: Error, context: String) -> Error {
        match err {
            Error::Numeric(m) => Error::Numeric(format!("{context}: {m}")),
            Error::Usage(m) => Error::Usage(format!("{context}: {m}")),
            other => other,
        }
    }
}

/// Run the overlapped engine to completion.
pub fn run_hts<S: Scalar>(config: &EngineConfig<S>) -> Result<RunOutput<S>> {
    run_hts_traced(config).map(|(out, _)| out)
}

/// [`run_hts`] plus per-epoch wall-clock spans of the rollout and learner
/// phases, for overlap verification.
pub fn run_hts_traced<S: Scalar>(config: &EngineConfig<S>) -> Result<(RunOutput<S>, EngineTrace)> {
    config.validate()?;
    let feature_dim = config.env.feature_dim();
    let action_count = config.env.action_count();
    let initial = Snapshot {
        policy: PolicyParams::zeros(feature_dim, action_count),
        value: ValueParams::zeros(feature_dim),
    };
    let run_start = Instant::now();
    let shared = Shared {
        n_envs: config.n_envs,
        alpha: config.sync_interval,
        epochs: config.epochs(),
        seed: config.seed,
        hp: config.hyperparams,
        states: StateBuffer::new(config.n_envs),
        actions: ActionBuffer::new(config.n_envs),
        pair: StoragePair::new(config.n_envs, config.sync_interval, initial.clone()),
        published: RwLock::new(initial.clone()),
        master: Mutex::new(initial),
        barrier: Barrier::new(config.n_envs + 1),
        episodes: (0..config.n_envs).map(|_| Mutex::new(Vec::new())).collect(),
        recent: Mutex::new(VecDeque::new()),
        metrics: Mutex::new(Vec::new()),
        digest: Mutex::new(0x6A09_E667_F3BC_C908),
        epoch_clock: Mutex::new(run_start),
        run_start,
        abort: AtomicBool::new(false),
        stop: AtomicU64::new(STOP_UNSET),
        failure: Mutex::new(None),
        exec_spans: (0..config.n_envs).map(|_| Mutex::new(Vec::new())).collect(),
        learner_spans: Mutex::new(Vec::new()),
    };

    let mut envs = Vec::with_capacity(config.n_envs);
    for _ in 0..config.n_envs {
        envs.push(config.env.build()?);
    }

    std::thread::scope(|scope| {
        let mut workers = Vec::with_capacity(config.n_envs + 1);
        for (env_id, env) in envs.into_iter().enumerate() {
            let shared = &shared;
            workers.push(scope.spawn(move || executor_loop(shared, env_id, env)));
        }
        {
            let shared = &shared;
            workers.push(scope.spawn(move || learner_loop(shared)));
        }
        for _ in 0..config.n_actors {
            let shared = &shared;
            scope.spawn(move || actor_loop(shared));
        }
        for w in workers {
            w.join().expect("engine worker panicked");
        }
        // Wake the actors so the scope can finish.
        shared.states.close();
        shared.actions.close();
    });

    if let Some(err) = shared.failure.into_inner().unwrap() {
        return Err(err);
    }
    let master = shared.master.into_inner().unwrap();
    let output = RunOutput {
        metrics: shared.metrics.into_inner().unwrap(),
        policy: master.policy,
        value: master.value,
        transition_digest: shared.digest.into_inner().unwrap(),
    };

    let mut trace = EngineTrace::default();
    let learner_spans = shared.learner_spans.into_inner().unwrap();
    let exec_spans: Vec<Vec<(f64, f64)>> = shared
        .exec_spans
        .into_iter()
        .map(|m| m.into_inner().unwrap())
        .collect();
    for epoch in 0..output.metrics.len() as u64 {
        let idx = epoch as usize;
        let mut start = f64::INFINITY;
        let mut end = f64::NEG_INFINITY;
        for spans in &exec_spans {
            if let Some(&(s, e)) = spans.get(idx) {
                start = start.min(s);
                end = end.max(e);
            }
        }
        let learner = learner_spans
            .iter()
            .find(|(e, _, _)| *e == epoch)
            .map(|&(_, s, e)| (s, e));
        trace.epochs.push(EpochTrace { epoch, rollout: (start, end), learner });
    }
    Ok((output, trace))
}
