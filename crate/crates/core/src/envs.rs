//! Desk-scale environments behind a common stepping interface: a
//! deterministic grid world for learning correctness and a synthetic
//! variable-step-time environment for throughput experiments.

use std::time::Duration;

use crate::rng::{unit_f64, SplitMix64};
use crate::{Error, Result, Scalar};

/// Grid movement actions, in fixed id order.
pub const ACTION_NORTH: usize = 0;
pub const ACTION_SOUTH: usize = 1;
pub const ACTION_EAST: usize = 2;
pub const ACTION_WEST: usize = 3;
pub const GRID_ACTIONS: usize = 4;

/// Observation snapshot returned by [`Environment::reset`] and
/// [`Environment::step`].
///
/// `features` has fixed dimensionality per environment and exactly one
/// nonzero entry for one-hot encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState<S> {
    pub features: Vec<S>,
    /// Steps taken in the current episode.
    pub step_index: u64,
    pub done: bool,
}

/// Common stepping interface. Each instance is owned by exactly one worker;
/// instances are transferable between workers at construction time only.
pub trait Environment<S: Scalar>: Send {
    fn feature_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    /// Starts a new episode. Deterministic in `episode_seed`.
    fn reset(&mut self, episode_seed: u64) -> EnvState<S>;
    /// Applies one action, returning the next state, the reward, and the
    /// episode-termination flag. Stepping a terminal environment is a usage
    /// error.
    fn step(&mut self, action: usize) -> Result<(EnvState<S>, S, bool)>;
}

/// Static description of a grid-world task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridWorldSpec<S> {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    /// Maximum episode length in steps.
    pub horizon: u64,
    pub step_reward: S,
    pub goal_reward: S,
}

impl<S: Scalar> GridWorldSpec<S> {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::usage("grid dimensions must be positive"));
        }
        let inside =
            |c: (usize, usize)| c.0 < self.width && c.1 < self.height;
        if !inside(self.start) || !inside(self.goal) {
            return Err(Error::usage("start and goal must lie inside the grid"));
        }
        if self.start == self.goal {
            return Err(Error::usage("start must differ from goal"));
        }
        if self.horizon == 0 {
            return Err(Error::usage("horizon must be >= 1"));
        }
        if !self.step_reward.is_finite() || !self.goal_reward.is_finite() {
            return Err(Error::usage("rewards must be finite"));
        }
        Ok(())
    }

    fn cell_index(&self, cell: (usize, usize)) -> usize {
        cell.1 * self.width + cell.0
    }
}

/// Deterministic shortest-path grid world. Transitions are a pure function
/// of (state, action): moves clip at walls, the episode ends on reaching the
/// goal or exhausting the horizon.
pub struct GridWorld<S> {
    spec: GridWorldSpec<S>,
    pos: (usize, usize),
    steps: u64,
    terminal: bool,
}

impl<S: Scalar> GridWorld<S> {
    pub fn new(spec: GridWorldSpec<S>) -> Result<Self> {
        spec.validate()?;
        Ok(GridWorld { spec, pos: spec.start, steps: 0, terminal: true })
    }

    pub fn spec(&self) -> &GridWorldSpec<S> {
        &self.spec
    }

    fn one_hot(&self, cell: (usize, usize)) -> Vec<S> {
        let mut v = vec![S::zero(); self.spec.width * self.spec.height];
        v[self.spec.cell_index(cell)] = S::one();
        v
    }

    fn moved(&self, action: usize) -> (usize, usize) {
        let (x, y) = self.pos;
        match action {
            ACTION_NORTH => (x, y.saturating_sub(1)),
            ACTION_SOUTH => (x, (y + 1).min(self.spec.height - 1)),
            ACTION_EAST => ((x + 1).min(self.spec.width - 1), y),
            ACTION_WEST => (x.saturating_sub(1), y),
            _ => (x, y),
        }
    }
}

impl<S: Scalar> Environment<S> for GridWorld<S> {
    fn feature_dim(&self) -> usize {
        self.spec.width * self.spec.height
    }

    fn action_count(&self) -> usize {
        GRID_ACTIONS
    }

    fn reset(&mut self, _episode_seed: u64) -> EnvState<S> {
        // The start cell is fixed; resets ignore the seed.
        self.pos = self.spec.start;
        self.steps = 0;
        self.terminal = false;
        EnvState { features: self.one_hot(self.pos), step_index: 0, done: false }
    }

    fn step(&mut self, action: usize) -> Result<(EnvState<S>, S, bool)> {
        if self.terminal {
            return Err(Error::usage("step on a terminal environment"));
        }
        if action >= GRID_ACTIONS {
            return Err(Error::usage(format!("action id {action} out of range")));
        }
        self.pos = self.moved(action);
        self.steps += 1;
        let at_goal = self.pos == self.spec.goal;
        let reward = if at_goal { self.spec.goal_reward } else { self.spec.step_reward };
        let done = at_goal || self.steps >= self.spec.horizon;
        self.terminal = done;
        let state =
            EnvState { features: self.one_hot(self.pos), step_index: self.steps, done };
        Ok((state, reward, done))
    }
}

/// Optimal expected discounted return from the start state, by value
/// iteration to fixed point (sup-norm tolerance 1e-10).
///
/// The horizon field caps episodes during rollouts, not this oracle; value
/// iteration solves the undiscounted-horizon-free control problem, which is
/// what converged policies are compared against.
pub fn optimal_return_oracle<S: Scalar>(spec: &GridWorldSpec<S>, discount: S) -> Result<S> {
    spec.validate()?;
    if discount <= S::zero() || discount > S::one() {
        return Err(Error::usage("discount must lie in (0, 1]"));
    }
    let tol = S::from(1e-10).unwrap();
    let cells = spec.width * spec.height;
    let goal = spec.cell_index(spec.goal);
    let mut values = vec![S::zero(); cells];
    const SWEEP_CAP: usize = 100_000;
    for _ in 0..SWEEP_CAP {
        let mut sup_change = S::zero();
        for y in 0..spec.height {
            for x in 0..spec.width {
                let idx = y * spec.width + x;
                if idx == goal {
                    continue;
                }
                let mut best = S::neg_infinity();
                for action in 0..GRID_ACTIONS {
                    let next = match action {
                        ACTION_NORTH => (x, y.saturating_sub(1)),
                        ACTION_SOUTH => (x, (y + 1).min(spec.height - 1)),
                        ACTION_EAST => ((x + 1).min(spec.width - 1), y),
                        _ => (x.saturating_sub(1), y),
                    };
                    let nidx = spec.cell_index(next);
                    let q = if nidx == goal {
                        spec.goal_reward
                    } else {
                        spec.step_reward + discount * values[nidx]
                    };
                    if q > best {
                        best = q;
                    }
                }
                let change = (best - values[idx]).abs();
                if change > sup_change {
                    sup_change = change;
                }
                values[idx] = best;
            }
        }
        if sup_change <= tol {
            return Ok(values[spec.cell_index(spec.start)]);
        }
    }
    Err(Error::numeric(format!(
        "value iteration did not converge within {SWEEP_CAP} sweeps"
    )))
}

/// Stochastic step-duration model, parameterized by rate and shape; actor
/// compute time is carried separately by [`StepTimeModel`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepTimeKind {
    Constant { seconds: f64 },
    Exponential { rate: f64 },
    Gamma { shape: f64, rate: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTimeModel {
    pub kind: StepTimeKind,
    /// Per-step actor compute seconds added on top of environment time in
    /// the analytical models.
    pub actor_compute_time: f64,
}

impl StepTimeModel {
    pub fn constant(seconds: f64) -> Self {
        StepTimeModel { kind: StepTimeKind::Constant { seconds }, actor_compute_time: 0.0 }
    }

    pub fn exponential(rate: f64) -> Self {
        StepTimeModel { kind: StepTimeKind::Exponential { rate }, actor_compute_time: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            StepTimeKind::Constant { seconds } => {
                if !(seconds >= 0.0) || !seconds.is_finite() {
                    return Err(Error::usage("constant step time must be >= 0"));
                }
            }
            StepTimeKind::Exponential { rate } => {
                if !(rate > 0.0) || !rate.is_finite() {
                    return Err(Error::usage("exponential rate must be > 0"));
                }
            }
            StepTimeKind::Gamma { shape, rate } => {
                if !(shape > 0.0) || !(rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
                    return Err(Error::usage("gamma shape and rate must be > 0"));
                }
            }
        }
        if !(self.actor_compute_time >= 0.0) {
            return Err(Error::usage("actor compute time must be >= 0"));
        }
        Ok(())
    }
}

/// Draws one step duration in seconds. Deterministic in `(model, rng_word)`:
/// the word seeds any internal draws, so replaying a word replays the delay.
pub fn sample_step_delay(model: &StepTimeModel, rng_word: u64) -> f64 {
    match model.kind {
        StepTimeKind::Constant { seconds } => seconds,
        StepTimeKind::Exponential { rate } => -(1.0 - unit_f64(rng_word)).ln() / rate,
        StepTimeKind::Gamma { shape, rate } => {
            let mut rng = SplitMix64::new(rng_word);
            sample_gamma(shape, rate, &mut rng)
        }
    }
}

/// Gamma draw: sum of exponentials for integer shape, Marsaglia-Tsang
/// squeeze otherwise (with the shape < 1 boost).
fn sample_gamma(shape: f64, rate: f64, rng: &mut SplitMix64) -> f64 {
    debug_assert!(shape > 0.0 && rate > 0.0);
    if shape.fract() == 0.0 && shape <= 4096.0 {
        let k = shape as u64;
        let mut sum = 0.0;
        for _ in 0..k {
            sum += rng.next_exp(1.0);
        }
        return sum / rate;
    }
    if shape < 1.0 {
        // Boost: Gamma(a) = Gamma(a + 1) * U^(1/a).
        let g = sample_gamma(shape + 1.0, 1.0, rng);
        let u = loop {
            let u = rng.next_unit();
            if u > 0.0 {
                break u;
            }
        };
        return g * u.powf(1.0 / shape) / rate;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng.next_unit();
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v / rate;
        }
        if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v / rate;
        }
    }
}

fn standard_normal(rng: &mut SplitMix64) -> f64 {
    // Box-Muller on two stream draws.
    let u1 = loop {
        let u = rng.next_unit();
        if u > 0.0 {
            break u;
        }
    };
    let u2 = rng.next_unit();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Configuration of the synthetic throughput environment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub action_count: usize,
    pub horizon: u64,
    pub model: StepTimeModel,
    /// `true`: each step sleeps for the drawn duration (throughput
    /// benchmarks). `false`: durations accumulate on a virtual clock only.
    pub real_sleep: bool,
    /// `true`: observations are dense unit-scale vectors, giving forward
    /// passes and gradients realistic per-feature cost. `false`: cycling
    /// one-hot observations.
    pub dense_features: bool,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.action_count == 0 {
            return Err(Error::usage("synthetic feature_dim and action_count must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::usage("horizon must be >= 1"));
        }
        self.model.validate()
    }
}

/// Environment whose only dynamics are step durations: rewards are zero,
/// episodes end after `horizon` steps, and observations cycle through
/// one-hot features. Reset always returns the index-0 one-hot state.
pub struct SyntheticEnv<S> {
    spec: SyntheticSpec,
    rng: SplitMix64,
    steps: u64,
    terminal: bool,
    virtual_clock: f64,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> SyntheticEnv<S> {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        Ok(SyntheticEnv {
            spec,
            rng: SplitMix64::new(0),
            steps: 0,
            terminal: true,
            virtual_clock: 0.0,
            _marker: std::marker::PhantomData,
        })
    }

    /// Accumulated virtual step time; meaningful when `real_sleep` is off.
    pub fn virtual_clock(&self) -> f64 {
        self.virtual_clock
    }

    fn features_for(&self, step: u64) -> Vec<S> {
        let dim = self.spec.feature_dim;
        if self.spec.dense_features {
            // Deterministic dense pattern, entries in [0.5, 1.5] / sqrt(dim).
            let inv = 1.0 / (dim as f64).sqrt();
            (0..dim)
                .map(|j| {
                    let level = ((step as usize + j) % 5) as f64;
                    S::from((0.5 + 0.25 * level) * inv).unwrap()
                })
                .collect()
        } else {
            let mut v = vec![S::zero(); dim];
            v[(step as usize) % dim] = S::one();
            v
        }
    }
}

impl<S: Scalar> Environment<S> for SyntheticEnv<S> {
    fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn action_count(&self) -> usize {
        self.spec.action_count
    }

    fn reset(&mut self, episode_seed: u64) -> EnvState<S> {
        self.rng = SplitMix64::new(episode_seed);
        self.steps = 0;
        self.terminal = false;
        EnvState { features: self.features_for(0), step_index: 0, done: false }
    }

    fn step(&mut self, action: usize) -> Result<(EnvState<S>, S, bool)> {
        if self.terminal {
            return Err(Error::usage("step on a terminal environment"));
        }
        if action >= self.spec.action_count {
            return Err(Error::usage(format!("action id {action} out of range")));
        }
        let delay = sample_step_delay(&self.spec.model, self.rng.next_u64());
        if self.spec.real_sleep {
            std::thread::sleep(Duration::from_secs_f64(delay));
        } else {
            self.virtual_clock += delay;
        }
        self.steps += 1;
        let done = self.steps >= self.spec.horizon;
        self.terminal = done;
        let state = EnvState {
            features: self.features_for(self.steps),
            step_index: self.steps,
            done,
        };
        Ok((state, S::zero(), done))
    }
}
