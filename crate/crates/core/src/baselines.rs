//! Reference engines the overlapped design is measured against: a fully
//! synchronous lockstep engine (barrier every step, update between epochs,
//! zero lag) and an asynchronous queue engine (actors race ahead, updates
//! use whatever parameters are current, lag is a random variable).

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Barrier, Condvar, Mutex, RwLock};
use std::time::Instant;

use crate::buffers::{RolloutStorage, Snapshot, Transition};
use crate::engine::{derive_step_seed, episode_seed, EngineConfig, MetricsRecord, RunOutput};
use crate::policy::{
    actor_critic_gradient, apply_policy_update, apply_value_update, policy_forward,
    sample_action, PolicyParams, ValueParams,
};
use crate::rng::unit_f64;
use crate::{Error, Result, Scalar};

const STOP_UNSET: u64 = u64::MAX;
const DIGEST_SEED: u64 = 0x6A09_E667_F3BC_C908;

fn recent_mean(recent: &VecDeque<f64>) -> f64 {
    if recent.is_empty() {
        0.0
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    }
}

fn push_recent(recent: &mut VecDeque<f64>, value: f64) {
    recent.push_back(value);
    if recent.len() > 100 {
        recent.pop_front();
    }
}

struct LockShared<S: Scalar> {
    alpha: usize,
    epochs: u64,
    seed: u64,
    hp: crate::policy::LearnerHyperparams<S>,
    published: RwLock<Snapshot<S>>,
    storage: RolloutStorage<S>,
    barrier: Barrier,
    episodes: Vec<Mutex<Vec<f64>>>,
    abort: AtomicBool,
    stop: AtomicU64,
    failure: Mutex<Option<Error>>,
}

impl<S: Scalar> LockShared<S> {
    fn fail(&self, err: Error) {
        let mut slot = self.failure.lock().unwrap();
        if slot.is_none() {
            *slot = Some(err);
        }
        drop(slot);
        self.abort.store(true, Ordering::SeqCst);
    }
}

/// Fully synchronous baseline: all environments step in lockstep behind a
/// per-step barrier, and every `sync_interval` steps the learner updates in
/// the barrier gap using the batch just collected, so updates run at the
/// parameters that generated the data (policy lag 0) and nothing overlaps.
///
/// Each worker computes its own forward pass; `n_actors` is ignored.
/// Deterministic for a fixed seed, and step-for-step identical to the
/// overlapped engine whenever parameters do not change (learning rate 0).
pub fn run_lockstep<S: Scalar>(config: &EngineConfig<S>) -> Result<RunOutput<S>> {
    config.validate()?;
    let feature_dim = config.env.feature_dim();
    let action_count = config.env.action_count();
    let initial = Snapshot {
        policy: PolicyParams::zeros(feature_dim, action_count),
        value: ValueParams::zeros(feature_dim),
    };
    let shared = LockShared {
        alpha: config.sync_interval,
        epochs: config.epochs(),
        seed: config.seed,
        hp: config.hyperparams,
        published: RwLock::new(initial.clone()),
        storage: RolloutStorage::new(config.n_envs, config.sync_interval),
        barrier: Barrier::new(config.n_envs + 1),
        episodes: (0..config.n_envs).map(|_| Mutex::new(Vec::new())).collect(),
        abort: AtomicBool::new(false),
        stop: AtomicU64::new(STOP_UNSET),
        failure: Mutex::new(None),
    };
    shared.storage.set_snapshot(initial.clone());

    let mut envs = Vec::with_capacity(config.n_envs);
    for _ in 0..config.n_envs {
        envs.push(config.env.build()?);
    }

    let mut current = initial;
    let mut metrics = Vec::new();
    let mut recent = VecDeque::new();
    let mut digest = DIGEST_SEED;

    std::thread::scope(|scope| {
        for (env_id, env) in envs.into_iter().enumerate() {
            let shared = &shared;
            scope.spawn(move || lockstep_worker(shared, env_id, env));
        }

        // Coordinator: paces step barriers, updates between epochs.
        let run_start = Instant::now();
        let mut epoch_clock = run_start;
        for epoch in 0..shared.epochs {
            for _ in 0..shared.alpha {
                shared.barrier.wait();
                shared.barrier.wait();
            }
            shared.barrier.wait(); // workers parked; update window open
            if !shared.abort.load(Ordering::SeqCst) {
                let now = Instant::now();
                let wall = now.duration_since(epoch_clock).as_secs_f64();
                epoch_clock = now;

                digest = shared.storage.fold_digest(digest);
                for env in &shared.episodes {
                    for r in env.lock().unwrap().drain(..) {
                        push_recent(&mut recent, r);
                    }
                }
                let steps = (shared.storage.n_envs() * shared.alpha) as u64;
                metrics.push(MetricsRecord {
                    epoch,
                    env_steps: steps,
                    wall_time: wall,
                    sps: steps as f64 / wall.max(1e-9),
                    avg_episode_return: recent_mean(&recent),
                    policy_lag: 0,
                });

                let result = (|| -> Result<()> {
                    let (pg, vg) = actor_critic_gradient(
                        &current.policy,
                        &current.value,
                        &shared.storage,
                        &shared.hp,
                    )?;
                    apply_policy_update(&mut current.policy, &pg, shared.hp.learning_rate)?;
                    apply_value_update(&mut current.value, &vg, shared.hp.learning_rate)
                })();
                match result {
                    Ok(()) => {
                        *shared.published.write().unwrap() = current.clone();
                        shared.storage.reset_for_epoch(epoch + 1, current.clone());
                    }
                    Err(e) => {
                        shared.fail(Error::numeric_or_usage(
                            e,
                            format!("lockstep update at epoch {epoch}"),
                        ));
                        shared.stop.store(epoch, Ordering::SeqCst);
                    }
                }
            } else if shared.stop.load(Ordering::SeqCst) == STOP_UNSET {
                shared.stop.store(epoch, Ordering::SeqCst);
            }
            shared.barrier.wait(); // release workers
            if shared.stop.load(Ordering::SeqCst) <= epoch {
                break;
            }
        }
    });

    if let Some(err) = shared.failure.into_inner().unwrap() {
        return Err(err);
    }
    Ok(RunOutput {
        metrics,
        policy: current.policy,
        value: current.value,
        transition_digest: digest,
    })
}

fn lockstep_worker<S: Scalar>(
    shared: &LockShared<S>,
    env_id: usize,
    mut env: Box<dyn crate::envs::Environment<S>>,
) {
    let mut episode_count = 0u64;
    let mut state = env.reset(episode_seed(shared.seed, env_id as u64, 0));
    let mut ep_return = S::zero();
    let mut ep_discount = S::one();
    for epoch in 0..shared.epochs {
        for k in 0..shared.alpha as u64 {
            shared.barrier.wait();
            if !shared.abort.load(Ordering::SeqCst) {
                let step = epoch * shared.alpha as u64 + k;
                let result = (|| -> Result<()> {
                    let word = derive_step_seed(shared.seed, env_id as u64, step);
                    let snap = shared.published.read().unwrap();
                    let probs = policy_forward(&snap.policy, &state.features)?;
                    drop(snap);
                    let u = S::from(unit_f64(word))
                        .ok_or_else(|| Error::numeric("sample word not representable"))?;
                    let action = sample_action(&probs, u)?;
                    let (next, reward, done) = env.step(action)?;
                    let features = std::mem::take(&mut state.features);
                    shared.storage.append(Transition {
                        env_id,
                        step_index: step,
                        features,
                        action,
                        reward,
                        done,
                    })?;
                    ep_return += ep_discount * reward;
                    ep_discount *= shared.hp.discount;
                    if done {
                        shared.episodes[env_id]
                            .lock()
                            .unwrap()
                            .push(ep_return.to_f64().unwrap_or(f64::NAN));
                        ep_return = S::zero();
                        ep_discount = S::one();
                        episode_count += 1;
                        state = env.reset(episode_seed(shared.seed, env_id as u64, episode_count));
                    } else {
                        state = next;
                    }
                    Ok(())
                })();
                if let Err(e) = result {
                    shared.fail(Error::usage(format!(
                        "lockstep worker {env_id} at step {k} of epoch {epoch}: {e}"
                    )));
                }
            }
            shared.barrier.wait();
        }
        if !shared.abort.load(Ordering::SeqCst) {
            if let Err(e) = shared.storage.set_final(env_id, state.features.clone()) {
                shared.fail(e);
            }
        }
        shared.barrier.wait();
        shared.barrier.wait();
        if shared.stop.load(Ordering::SeqCst) <= epoch {
            break;
        }
    }
}

/// Asynchronous baseline configuration: the base run description plus the
/// bounded fragment queue's capacity.
#[derive(Clone, Debug)]
pub struct AsyncQueueConfig<S> {
    pub base: EngineConfig<S>,
    pub queue_capacity: usize,
}

/// One update's staleness measurement: how many parameter versions ahead the
/// learner was of the parameters that generated the consumed fragment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LagSample {
    pub update_index: u64,
    pub lag: u64,
}

/// Aggregate lag statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagSummary {
    pub mean: f64,
    pub p95: f64,
}

/// Result of an asynchronous run.
#[derive(Clone, Debug)]
pub struct AsyncRunOutput<S> {
    pub run: RunOutput<S>,
    pub lag_samples: Vec<LagSample>,
    /// Fragments discarded because the queue was full (oldest dropped).
    pub dropped_fragments: u64,
}

struct Fragment<S: Scalar> {
    behavior_version: u64,
    storage: RolloutStorage<S>,
}

struct QueueInner<S: Scalar> {
    deque: VecDeque<Fragment<S>>,
    dropped: u64,
    closed: bool,
}

struct FragmentQueue<S: Scalar> {
    inner: Mutex<QueueInner<S>>,
    available: Condvar,
    capacity: usize,
}

impl<S: Scalar> FragmentQueue<S> {
    fn new(capacity: usize) -> Self {
        FragmentQueue {
            inner: Mutex::new(QueueInner { deque: VecDeque::new(), dropped: 0, closed: false }),
            available: Condvar::new(),
            capacity,
        }
    }

    /// Non-blocking: a full queue drops its oldest fragment.
    fn push(&self, fragment: Fragment<S>) {
        let mut inner = self.inner.lock().unwrap();
        if inner.closed {
            return;
        }
        if inner.deque.len() == self.capacity {
            inner.deque.pop_front();
            inner.dropped += 1;
        }
        inner.deque.push_back(fragment);
        drop(inner);
        self.available.notify_one();
    }

    fn pop_wait(&self) -> Option<Fragment<S>> {
        let mut inner = self.inner.lock().unwrap();
        loop {
            if let Some(f) = inner.deque.pop_front() {
                return Some(f);
            }
            if inner.closed {
                return None;
            }
            inner = self.available.wait(inner).unwrap();
        }
    }

    fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.available.notify_all();
    }

    fn dropped(&self) -> u64 {
        self.inner.lock().unwrap().dropped
    }
}

/// Asynchronous baseline: each of `n_actors` workers owns one environment
/// instance (the base `n_envs` is not used), repeatedly rolls out
/// `sync_interval`-step fragments under the freshest parameters it saw, and
/// pushes them into a bounded queue. The learner consumes fragments and
/// applies the gradient at its *current* parameters, recording the version
/// lag per update. `total_steps` counts learner-consumed steps.
///
/// Not deterministic: fragment arrival order depends on scheduling.
pub fn run_async<S: Scalar>(config: &AsyncQueueConfig<S>) -> Result<AsyncRunOutput<S>> {
    config.base.validate()?;
    if config.queue_capacity == 0 {
        return Err(Error::usage("queue_capacity must be >= 1"));
    }
    let alpha = config.base.sync_interval;
    if config.base.total_steps % alpha as u64 != 0 {
        return Err(Error::usage("total_steps must be divisible by sync_interval"));
    }
    let updates = config.base.total_steps / alpha as u64;
    let feature_dim = config.base.env.feature_dim();
    let action_count = config.base.env.action_count();
    let initial = Snapshot {
        policy: PolicyParams::zeros(feature_dim, action_count),
        value: ValueParams::zeros(feature_dim),
    };

    let queue = FragmentQueue::<S>::new(config.queue_capacity);
    let published = RwLock::new(initial.clone());
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let recent: Mutex<VecDeque<f64>> = Mutex::new(VecDeque::new());

    let fail = |err: Error| {
        let mut slot = failure.lock().unwrap();
        if slot.is_none() {
            *slot = Some(err);
        }
        drop(slot);
        stop.store(true, Ordering::SeqCst);
        queue.close();
    };

    let mut envs = Vec::with_capacity(config.base.n_actors);
    for _ in 0..config.base.n_actors {
        envs.push(config.base.env.build()?);
    }

    let hp = config.base.hyperparams;
    let seed = config.base.seed;
    let mut current = initial;
    let mut metrics = Vec::new();
    let mut lag_samples = Vec::new();
    let mut digest = DIGEST_SEED;

    std::thread::scope(|scope| {
        for (actor_id, mut env) in envs.into_iter().enumerate() {
            let queue = &queue;
            let published = &published;
            let stop = &stop;
            let recent = &recent;
            let fail = &fail;
            scope.spawn(move || {
                let mut episode_count = 0u64;
                let mut state = env.reset(episode_seed(seed, actor_id as u64, 0));
                let mut ep_return = S::zero();
                let mut ep_discount = S::one();
                let mut local_step = 0u64;
                while !stop.load(Ordering::SeqCst) {
                    let snap = published.read().unwrap().clone();
                    let storage = RolloutStorage::new(1, alpha);
                    storage.set_snapshot(snap.clone());
                    let result = (|| -> Result<()> {
                        for _ in 0..alpha {
                            let word = derive_step_seed(seed, actor_id as u64, local_step);
                            let probs = policy_forward(&snap.policy, &state.features)?;
                            let u = S::from(unit_f64(word))
                                .ok_or_else(|| Error::numeric("sample word not representable"))?;
                            let action = sample_action(&probs, u)?;
                            let (next, reward, done) = env.step(action)?;
                            let features = std::mem::take(&mut state.features);
                            storage.append(Transition {
                                env_id: 0,
                                step_index: local_step,
                                features,
                                action,
                                reward,
                                done,
                            })?;
                            ep_return += ep_discount * reward;
                            ep_discount *= hp.discount;
                            if done {
                                push_recent(
                                    &mut recent.lock().unwrap(),
                                    ep_return.to_f64().unwrap_or(f64::NAN),
                                );
                                ep_return = S::zero();
                                ep_discount = S::one();
                                episode_count += 1;
                                state = env
                                    .reset(episode_seed(seed, actor_id as u64, episode_count));
                            } else {
                                state = next;
                            }
                            local_step += 1;
                        }
                        storage.set_final(0, state.features.clone())
                    })();
                    match result {
                        Ok(()) => queue.push(Fragment {
                            behavior_version: snap.policy.version,
                            storage,
                        }),
                        Err(e) => {
                            fail(Error::usage(format!("async actor {actor_id}: {e}")));
                            return;
                        }
                    }
                }
            });
        }

        // Learner.
        let run_start = Instant::now();
        let mut update_clock = run_start;
        for update in 0..updates {
            let Some(fragment) = queue.pop_wait() else {
                break; // queue closed by a failing actor
            };
            let lag = current.policy.version - fragment.behavior_version;
            lag_samples.push(LagSample { update_index: update, lag });
            let result = (|| -> Result<()> {
                let (pg, vg) =
                    crate::policy::stale_gradient(&current.policy, &current.value, &fragment.storage, &hp)?;
                apply_policy_update(&mut current.policy, &pg, hp.learning_rate)?;
                apply_value_update(&mut current.value, &vg, hp.learning_rate)
            })();
            if let Err(e) = result {
                fail(Error::numeric_or_usage(e, format!("async update {update}")));
                break;
            }
            digest = fragment.storage.fold_digest(digest);
            *published.write().unwrap() = current.clone();

            let now = Instant::now();
            let wall = now.duration_since(update_clock).as_secs_f64();
            update_clock = now;
            metrics.push(MetricsRecord {
                epoch: update,
                env_steps: alpha as u64,
                wall_time: wall,
                sps: alpha as f64 / wall.max(1e-9),
                avg_episode_return: recent_mean(&recent.lock().unwrap()),
                policy_lag: lag,
            });
        }
        stop.store(true, Ordering::SeqCst);
        queue.close();
    });

    if let Some(err) = failure.into_inner().unwrap() {
        return Err(err);
    }
    Ok(AsyncRunOutput {
        run: RunOutput {
            metrics,
            policy: current.policy,
            value: current.value,
            transition_digest: digest,
        },
        lag_samples,
        dropped_fragments: queue.dropped(),
    })
}

/// Mean and 95th-percentile lag (order statistic at rank `ceil(0.95 n)`).
pub fn measure_lag(samples: &[LagSample]) -> Result<LagSummary> {
    if samples.is_empty() {
        return Err(Error::usage("no lag samples"));
    }
    let mut lags: Vec<u64> = samples.iter().map(|s| s.lag).collect();
    lags.sort_unstable();
    let mean = lags.iter().sum::<u64>() as f64 / lags.len() as f64;
    let rank = ((0.95 * lags.len() as f64).ceil() as usize).clamp(1, lags.len());
    Ok(LagSummary { mean, p95: lags[rank - 1] as f64 })
}
