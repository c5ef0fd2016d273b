//! Closed-form performance models and the simulations that validate them:
//! epoch-runtime prediction for synchronized rollouts, M/M/1 occupancy for
//! the shared observation queue, and the delayed-gradient regret experiment.
//!
//! Everything here is `f64`: the solvers promise absolute tolerances around
//! 1e-10, below what `f32` can represent.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::engine::derive_step_seed;
use crate::envs::{sample_step_delay, StepTimeKind, StepTimeModel};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Euler-Mascheroni constant.
pub const EULER_MASCHERONI: f64 = 0.5772156649015329;

/// Natural log of the gamma function (Lanczos approximation, g = 7, 9
/// terms), with the reflection formula below 1/2.
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507343278686905,
        -0.13857109526572012,
        9.984_369_578_019_572e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection: Gamma(x) Gamma(1 - x) = pi / sin(pi x).
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (z + i as f64 + 1.0);
    }
    let t = z + 7.5;
    0.5 * (std::f64::consts::TAU).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma `P(shape, x)`: series expansion for
/// `x < shape + 1`, Lentz continued fraction for the upper tail otherwise.
/// Absolute error below 1e-12 over the supported domain.
pub fn regularized_incomplete_gamma(shape: f64, x: f64) -> Result<f64> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(Error::usage("shape must be > 0"));
    }
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::usage("x must be >= 0"));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let log_prefactor = -x + shape * x.ln() - ln_gamma(shape);
    if x < shape + 1.0 {
        // Lower series: P = prefactor * sum x^n / (a (a+1) ... (a+n)).
        let mut ap = shape;
        let mut del = 1.0 / shape;
        let mut sum = del;
        for _ in 0..10_000 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-16 {
                return Ok((sum * log_prefactor.exp()).min(1.0));
            }
        }
        Err(Error::numeric("incomplete gamma series did not converge"))
    } else {
        // Continued fraction for Q, evaluated by the Lentz method.
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - shape;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - shape);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                let q = log_prefactor.exp() * h;
                return Ok((1.0 - q).clamp(0.0, 1.0));
            }
        }
        Err(Error::numeric("incomplete gamma continued fraction did not converge"))
    }
}

/// Quantile of the Gamma(shape, rate) distribution: the `x` with
/// `P(shape, rate * x) = q`, found by bracketing bisection refined with
/// Newton steps. Residual is verified to be within 1e-10.
pub fn gamma_inverse_cdf(q: f64, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(Error::usage("shape must be > 0"));
    }
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::usage("rate must be > 0"));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(Error::usage("q must lie in [0, 1)"));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    // Solve in the rate-1 variable y = rate * x.
    let mut hi = shape + 10.0 * shape.sqrt() + 10.0;
    let mut doublings = 0;
    while regularized_incomplete_gamma(shape, hi)? < q {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            return Err(Error::numeric("quantile bracket expansion failed"));
        }
    }
    let mut lo = 0.0f64;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if regularized_incomplete_gamma(shape, mid)? < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut y = 0.5 * (lo + hi);
    let lg = ln_gamma(shape);
    for _ in 0..8 {
        let f = regularized_incomplete_gamma(shape, y)? - q;
        let pdf = ((shape - 1.0) * y.ln() - y - lg).exp();
        if pdf <= 0.0 || !pdf.is_finite() {
            break;
        }
        let next = y - f / pdf;
        if next <= lo || next >= hi {
            break; // keep the bisection bracket authoritative
        }
        y = next;
    }
    let residual = (regularized_incomplete_gamma(shape, y)? - q).abs();
    if residual > 1e-10 {
        return Err(Error::numeric(format!(
            "quantile residual {residual:.3e} exceeds 1e-10"
        )));
    }
    Ok(y / rate)
}

/// Parameters of the synchronized-rollout runtime model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuntimeModelInput {
    /// Parallel environments.
    pub n: usize,
    /// Total environment steps `K` across all environments.
    pub total_steps: u64,
    /// Steps per environment per round.
    pub alpha: usize,
    /// Rate of the exponential per-step duration.
    pub beta: f64,
    /// Per-step actor compute seconds `c`.
    pub actor_compute: f64,
}

impl RuntimeModelInput {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::usage("n must be >= 1"));
        }
        if self.alpha == 0 {
            return Err(Error::usage("alpha must be >= 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::usage("total_steps must be >= 1"));
        }
        let per_round = (self.n * self.alpha) as u64;
        if self.total_steps % per_round != 0 {
            return Err(Error::usage(format!(
                "total_steps ({}) must be divisible by n * alpha ({per_round})",
                self.total_steps
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::usage("beta must be > 0"));
        }
        if !(self.actor_compute >= 0.0) || !self.actor_compute.is_finite() {
            return Err(Error::usage("actor_compute must be >= 0"));
        }
        Ok(())
    }

    fn rounds(&self) -> u64 {
        self.total_steps / (self.n * self.alpha) as u64
    }
}

/// Closed-form expected total runtime of a synchronized rollout: per round,
/// the expected maximum over `n` environments of an `alpha`-step
/// exponential(beta) sum is approximated through the Gamma quantile at
/// `1 - 1/n`, plus `alpha * c` actor compute; `K / (n alpha)` rounds total.
///
/// Requires `n >= 2` (the quantile `1 - 1/n` degenerates at `n = 1`).
pub fn expected_runtime(input: &RuntimeModelInput) -> Result<f64> {
    input.validate()?;
    if input.n < 2 {
        return Err(Error::usage("expected_runtime requires n >= 2"));
    }
    let alpha = input.alpha as f64;
    let beta = input.beta;
    let q = 1.0 - 1.0 / input.n as f64;
    let finv = gamma_inverse_cdf(q, alpha, beta)?;
    let per_round =
        (EULER_MASCHERONI / beta) * (1.0 + (alpha - 1.0) / (beta * finv)) + finv;
    let rounds = input.rounds() as f64;
    Ok(rounds * (per_round + alpha * input.actor_compute))
}

/// Monte Carlo estimate of the synchronized-rollout runtime with
/// exponential(beta) step times. Deterministic in `(input, seed,
/// replications)`: replications use disjoint counter-derived streams and are
/// reduced in index order.
pub fn simulate_sync_rollout(
    input: &RuntimeModelInput,
    seed: u64,
    replications: usize,
) -> Result<f64> {
    simulate_sync_rollout_kind(
        input,
        StepTimeKind::Exponential { rate: input.beta },
        seed,
        replications,
    )
}

/// Generalized simulator: any step-duration kind (the `beta` field is
/// ignored when `kind` carries its own parameters).
pub fn simulate_sync_rollout_kind(
    input: &RuntimeModelInput,
    kind: StepTimeKind,
    seed: u64,
    replications: usize,
) -> Result<f64> {
    input.validate()?;
    let model = StepTimeModel { kind, actor_compute_time: 0.0 };
    model.validate()?;
    if replications == 0 {
        return Err(Error::usage("replications must be >= 1"));
    }
    let rounds = input.rounds();
    let totals: Vec<f64> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = SplitMix64::new(derive_step_seed(seed, rep as u64, 0));
            let mut total = 0.0;
            for _ in 0..rounds {
                let mut round_max = 0.0f64;
                for _ in 0..input.n {
                    let mut env_time = 0.0;
                    for _ in 0..input.alpha {
                        env_time += sample_step_delay(&model, rng.next_u64());
                    }
                    round_max = round_max.max(env_time);
                }
                total += round_max + input.alpha as f64 * input.actor_compute;
            }
            total
        })
        .collect();
    Ok(totals.iter().sum::<f64>() / replications as f64)
}

/// Stationary mean queue length of the shared observation queue modeled as
/// M/M/1 with arrival rate `n * lambda0` and service rate `mu`:
/// `rho / (1 - rho)`. Errors with [`Error::UnstableQueue`] when `rho >= 1`.
pub fn expected_latency(n: usize, lambda0: f64, mu: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::usage("n must be >= 1"));
    }
    if !(lambda0 > 0.0) || !lambda0.is_finite() || !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::usage("rates must be > 0"));
    }
    let rho = n as f64 * lambda0 / mu;
    if rho >= 1.0 {
        return Err(Error::UnstableQueue { rho });
    }
    Ok(rho / (1.0 - rho))
}

/// Configuration of the discrete-event queue simulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueueSimConfig {
    pub n: usize,
    pub lambda0: f64,
    pub mu: f64,
    /// Events to simulate; the first 10% are discarded as warmup.
    pub horizon_events: u64,
}

/// Time-weighted queue statistics from the simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct MM1Stats {
    pub mean_queue_length: f64,
    /// Occupancy fractions for queue lengths 0..=20 plus a final tail bin
    /// (length >= 21); sums to 1.
    pub occupancy: Vec<f64>,
}

/// Histogram depth: lengths 0..=20 observed individually, 21 is the tail.
pub const OCCUPANCY_BINS: usize = 22;

/// Discrete-event M/M/1 simulation with arrival rate `n * lambda0` and
/// service rate `mu`. Deterministic in `(config, seed)`.
pub fn simulate_mm1(config: &QueueSimConfig, seed: u64) -> Result<MM1Stats> {
    if config.n == 0 {
        return Err(Error::usage("n must be >= 1"));
    }
    if !(config.lambda0 > 0.0)
        || !config.lambda0.is_finite()
        || !(config.mu > 0.0)
        || !config.mu.is_finite()
    {
        return Err(Error::usage("rates must be > 0"));
    }
    if config.horizon_events < 100 {
        return Err(Error::usage("horizon_events must be >= 100"));
    }
    let lambda = config.n as f64 * config.lambda0;
    let rho = lambda / config.mu;
    if rho >= 1.0 {
        return Err(Error::UnstableQueue { rho });
    }
    let warmup = config.horizon_events / 10;
    let mut rng = SplitMix64::new(seed);
    let mut length = 0u64;
    let mut occupancy = vec![0.0f64; OCCUPANCY_BINS];
    let mut area = 0.0;
    let mut elapsed = 0.0;
    for event in 0..config.horizon_events {
        // Exponential race between the next arrival and (if busy) the next
        // service completion; memorylessness makes fresh draws valid.
        let (dt, arrival) = if length == 0 {
            (rng.next_exp(lambda), true)
        } else {
            let ta = rng.next_exp(lambda);
            let ts = rng.next_exp(config.mu);
            if ta <= ts {
                (ta, true)
            } else {
                (ts, false)
            }
        };
        if event >= warmup {
            occupancy[(length as usize).min(OCCUPANCY_BINS - 1)] += dt;
            area += length as f64 * dt;
            elapsed += dt;
        }
        if arrival {
            length += 1;
        } else {
            length -= 1;
        }
    }
    if elapsed <= 0.0 {
        return Err(Error::numeric("simulation accumulated no post-warmup time"));
    }
    for o in &mut occupancy {
        *o /= elapsed;
    }
    Ok(MM1Stats { mean_queue_length: area / elapsed, occupancy })
}

/// Total variation distance between an observed occupancy histogram (as
/// produced by [`simulate_mm1`]) and the stationary geometric law
/// `P(j) = (1 - rho) rho^j`, with matching tail aggregation.
pub fn geometric_tv_distance(occupancy: &[f64], rho: f64) -> Result<f64> {
    if occupancy.len() != OCCUPANCY_BINS {
        return Err(Error::usage(format!(
            "occupancy must have {OCCUPANCY_BINS} bins"
        )));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::usage("rho must lie in [0, 1)"));
    }
    let mut tv = 0.0;
    for (j, &obs) in occupancy.iter().enumerate() {
        let expected = if j + 1 == OCCUPANCY_BINS {
            rho.powi((OCCUPANCY_BINS - 1) as i32) // tail mass >= 21
        } else {
            (1.0 - rho) * rho.powi(j as i32)
        };
        tv += (obs - expected).abs();
    }
    Ok(0.5 * tv)
}

/// Delayed-gradient SGD experiment configuration.
///
/// The problem is fixed: squared loss `l(x; theta) = (theta - x)^2 / 2` on
/// the two-point sample set `{0, diameter * sqrt(2)}` (so the pairwise
/// half-squared distance is bounded by `diameter^2`), minimizer at the
/// midpoint, iterates projected onto the segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DelayedSgdConfig {
    /// Gradient staleness in steps; 0 recovers standard online SGD.
    pub delay: u64,
    pub steps: u64,
    /// Sample-set scale bound `F`.
    pub diameter: f64,
    /// Gradient bound `L` over the projected domain.
    pub lipschitz: f64,
    /// Step-size scale: step `t` uses `base_lr / sqrt(t - delay)`.
    pub base_lr: f64,
}

impl DelayedSgdConfig {
    /// Standard tuning for a given scale: `L = F sqrt(2)` (the exact
    /// gradient bound on this problem) and `base_lr = F / (L sqrt(2 tau))`
    /// with `tau = max(delay, 1)`.
    pub fn from_diameter(delay: u64, steps: u64, diameter: f64) -> Self {
        let lipschitz = diameter * std::f64::consts::SQRT_2;
        let tau = delay.max(1) as f64;
        DelayedSgdConfig {
            delay,
            steps,
            diameter,
            lipschitz,
            base_lr: diameter / (lipschitz * (2.0 * tau).sqrt()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::usage("steps must be >= 1"));
        }
        if self.delay >= self.steps {
            return Err(Error::usage("delay must be < steps"));
        }
        for (name, v) in [
            ("diameter", self.diameter),
            ("lipschitz", self.lipschitz),
            ("base_lr", self.base_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::usage(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }

    /// The theoretical average-regret envelope `4 F L sqrt(tau / T)` with
    /// `tau = max(delay, 1)`.
    pub fn regret_envelope(&self) -> f64 {
        4.0 * self.diameter
            * self.lipschitz
            * (self.delay.max(1) as f64 / self.steps as f64).sqrt()
    }
}

/// Running average regret at one checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegretPoint {
    pub step: u64,
    pub average_regret: f64,
}

/// Run delayed-gradient SGD and report the running average regret at 100
/// evenly spaced checkpoints (always including the final step).
///
/// Update at step `t` (when history is deep enough):
/// `theta_t = proj(theta_{t-1} - a_t * grad l(x_s; theta_s))` with
/// `s = t - 1 - delay` and `a_t = base_lr / sqrt(t - delay)`; the sample
/// `x_t` is then drawn and its regret against the fixed minimizer accrued.
pub fn delayed_sgd_experiment(config: &DelayedSgdConfig, seed: u64) -> Result<Vec<RegretPoint>> {
    config.validate()?;
    let tau = config.delay;
    let spread = config.diameter * std::f64::consts::SQRT_2;
    let theta_star = spread / 2.0;
    let total = config.steps;
    let interval = (total / 100).max(1);

    let mut rng = SplitMix64::new(seed);
    let mut theta = 0.0f64;
    let mut regret_sum = 0.0;
    let mut history: VecDeque<(f64, f64)> = VecDeque::new(); // (x_s, theta_s)
    let mut points = Vec::with_capacity(101);

    for t in 1..=total {
        if t >= tau + 2 {
            // history holds steps [t - len, t - 1]; index of s = t - 1 - tau.
            let idx = history.len() - 1 - tau as usize;
            let (x_old, theta_old) = history[idx];
            let gradient = theta_old - x_old;
            let step_size = config.base_lr / ((t - tau) as f64).sqrt();
            theta = (theta - step_size * gradient).clamp(0.0, spread);
        }
        let x = if rng.next_u64() >> 63 == 0 { 0.0 } else { spread };
        let loss = 0.5 * (theta - x) * (theta - x);
        let best = 0.5 * (theta_star - x) * (theta_star - x);
        regret_sum += loss - best;
        history.push_back((x, theta));
        if history.len() > tau as usize + 2 {
            history.pop_front();
        }
        if t % interval == 0 || t == total {
            points.push(RegretPoint { step: t, average_regret: regret_sum / t as f64 });
        }
    }
    Ok(points)
}
