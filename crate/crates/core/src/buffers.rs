//! Communication fabric between executors, actors, and the learner: the
//! observation buffer, the per-environment action rendezvous, and the pair
//! of role-swapping rollout storages.
//!
//! Capacity discipline: each environment has at most one observation in
//! flight and at most one undelivered action; each storage slot is written
//! exactly once per epoch. Violations are protocol errors, not races, so
//! they surface as [`Error::Usage`].

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

use crate::policy::{PolicyParams, ValueParams};
use crate::rng::{mix64, GOLDEN_GAMMA};
use crate::{Error, Result, Scalar};

/// Observation handed from an executor to whichever actor drains it.
#[derive(Clone, Debug, PartialEq)]
pub struct StateMsg<S> {
    pub env_id: usize,
    pub features: Vec<S>,
    /// Global step index of the environment (epoch * alpha + offset).
    pub step_index: u64,
    /// Counter-derived RNG word for this step's action draw.
    pub sample_word: u64,
}

/// Chosen action routed back to the owning executor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActionMsg {
    pub env_id: usize,
    pub action: usize,
}

/// One environment step as stored for learning. `features` are the
/// pre-step observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition<S> {
    pub env_id: usize,
    pub step_index: u64,
    pub features: Vec<S>,
    pub action: usize,
    pub reward: S,
    pub done: bool,
}

/// Parameters that generated a storage's batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<S> {
    pub policy: PolicyParams<S>,
    pub value: ValueParams<S>,
}

struct StateInner<S> {
    queue: Vec<StateMsg<S>>,
    pending: Vec<bool>,
    accepting: bool,
    closed: bool,
}

/// Many-producer buffer of observations. Bounded by protocol: at most one
/// in-flight observation per environment.
pub struct StateBuffer<S> {
    inner: Mutex<StateInner<S>>,
    available: Condvar,
    n_envs: usize,
}

impl<S: Scalar> StateBuffer<S> {
    pub fn new(n_envs: usize) -> Self {
        StateBuffer {
            inner: Mutex::new(StateInner {
                queue: Vec::new(),
                pending: vec![false; n_envs],
                accepting: true,
                closed: false,
            }),
            available: Condvar::new(),
            n_envs,
        }
    }

    pub fn push(&self, msg: StateMsg<S>) -> Result<()> {
        if msg.env_id >= self.n_envs {
            return Err(Error::usage(format!("env id {} out of range", msg.env_id)));
        }
        let mut inner = self.inner.lock().unwrap();
        if !inner.accepting || inner.closed {
            return Err(Error::usage("state buffer push after close"));
        }
        if inner.pending[msg.env_id] {
            return Err(Error::usage(format!(
                "state buffer already holds an observation for env {}",
                msg.env_id
            )));
        }
        inner.pending[msg.env_id] = true;
        inner.queue.push(msg);
        drop(inner);
        self.available.notify_one();
        Ok(())
    }

    /// Drain everything currently queued without blocking.
    pub fn take_all(&self) -> Vec<StateMsg<S>> {
        let mut inner = self.inner.lock().unwrap();
        Self::drain(&mut inner)
    }

    /// Block until at least one observation is queued; `None` once closed
    /// and empty.
    pub fn take_all_wait(&self) -> Option<Vec<StateMsg<S>>> {
        let mut inner = self.inner.lock().unwrap();
        loop {
            if !inner.queue.is_empty() {
                return Some(Self::drain(&mut inner));
            }
            if inner.closed {
                return None;
            }
            inner = self.available.wait(inner).unwrap();
        }
    }

    fn drain(inner: &mut StateInner<S>) -> Vec<StateMsg<S>> {
        let msgs = std::mem::take(&mut inner.queue);
        for m in &msgs {
            inner.pending[m.env_id] = false;
        }
        msgs
    }

    /// Reject further pushes without waking blocked consumers.
    pub fn set_accepting(&self, accepting: bool) {
        self.inner.lock().unwrap().accepting = accepting;
    }

    pub fn close(&self) {
        let mut inner = self.inner.lock().unwrap();
        inner.accepting = false;
        inner.closed = true;
        drop(inner);
        self.available.notify_all();
    }
}

struct ActionSlot {
    action: Option<usize>,
    closed: bool,
}

/// Per-environment rendezvous cell: the executor blocks in [`take`] until
/// an actor delivers the action for that environment.
///
/// [`take`]: ActionBuffer::take
pub struct ActionBuffer {
    slots: Vec<(Mutex<ActionSlot>, Condvar)>,
}

impl ActionBuffer {
    pub fn new(n_envs: usize) -> Self {
        ActionBuffer {
            slots: (0..n_envs)
                .map(|_| (Mutex::new(ActionSlot { action: None, closed: false }), Condvar::new()))
                .collect(),
        }
    }

    pub fn push(&self, msg: ActionMsg) -> Result<()> {
        let (lock, cv) = self
            .slots
            .get(msg.env_id)
            .ok_or_else(|| Error::usage(format!("env id {} out of range", msg.env_id)))?;
        let mut slot = lock.lock().unwrap();
        if slot.closed {
            return Err(Error::usage("action buffer closed"));
        }
        if slot.action.is_some() {
            return Err(Error::usage(format!(
                "two pending actions for env {}",
                msg.env_id
            )));
        }
        slot.action = Some(msg.action);
        drop(slot);
        cv.notify_one();
        Ok(())
    }

    /// Block until an action arrives for `env_id`.
    pub fn take(&self, env_id: usize) -> Result<usize> {
        let (lock, cv) = self
            .slots
            .get(env_id)
            .ok_or_else(|| Error::usage(format!("env id {env_id} out of range")))?;
        let mut slot = lock.lock().unwrap();
        loop {
            if let Some(a) = slot.action.take() {
                return Ok(a);
            }
            if slot.closed {
                return Err(Error::usage("action buffer closed"));
            }
            slot = cv.wait(slot).unwrap();
        }
    }

    pub fn close(&self) {
        for (lock, cv) in &self.slots {
            lock.lock().unwrap().closed = true;
            cv.notify_all();
        }
    }
}

/// Storage role within a [`StoragePair`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Write,
    Read,
}

const ROLE_WRITE: u8 = 0;
const ROLE_READ: u8 = 1;

/// Fixed-capacity rollout batch: `n_envs * alpha` transition slots plus one
/// final bootstrap state per environment.
///
/// Appends may arrive in any interleaving; [`canonical_transitions`] always
/// yields env-ascending, step-ascending order.
///
/// [`canonical_transitions`]: RolloutStorage::canonical_transitions
pub struct RolloutStorage<S: Scalar> {
    n_envs: usize,
    alpha: usize,
    slots: Vec<Mutex<Option<Transition<S>>>>,
    finals: Vec<Mutex<Option<Vec<S>>>>,
    filled: AtomicUsize,
    finals_set: AtomicUsize,
    epoch: AtomicU64,
    role: AtomicU8,
    exhausted: AtomicBool,
    snapshot: Mutex<Option<Snapshot<S>>>,
}

impl<S: Scalar> RolloutStorage<S> {
    pub fn new(n_envs: usize, alpha: usize) -> Self {
        assert!(n_envs >= 1 && alpha >= 1, "storage dimensions must be >= 1");
        RolloutStorage {
            n_envs,
            alpha,
            slots: (0..n_envs * alpha).map(|_| Mutex::new(None)).collect(),
            finals: (0..n_envs).map(|_| Mutex::new(None)).collect(),
            filled: AtomicUsize::new(0),
            finals_set: AtomicUsize::new(0),
            epoch: AtomicU64::new(0),
            role: AtomicU8::new(ROLE_WRITE),
            exhausted: AtomicBool::new(false),
            snapshot: Mutex::new(None),
        }
    }

    pub fn n_envs(&self) -> usize {
        self.n_envs
    }

    pub fn alpha(&self) -> usize {
        self.alpha
    }

    pub fn capacity(&self) -> usize {
        self.n_envs * self.alpha
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::Acquire)
    }

    pub fn role(&self) -> Role {
        if self.role.load(Ordering::Acquire) == ROLE_WRITE {
            Role::Write
        } else {
            Role::Read
        }
    }

    pub fn is_complete(&self) -> bool {
        self.filled.load(Ordering::Acquire) == self.capacity()
    }

    pub fn finals_ready(&self) -> bool {
        self.finals_set.load(Ordering::Acquire) == self.n_envs
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted.load(Ordering::Acquire)
    }

    pub fn mark_exhausted(&self) {
        self.exhausted.store(true, Ordering::Release);
    }

    pub fn set_snapshot(&self, snapshot: Snapshot<S>) {
        *self.snapshot.lock().unwrap() = Some(snapshot);
    }

    /// `(policy.version, value.version)` of the behavior snapshot.
    pub fn snapshot_versions(&self) -> Option<(u64, u64)> {
        self.snapshot
            .lock()
            .unwrap()
            .as_ref()
            .map(|s| (s.policy.version, s.value.version))
    }

    pub fn snapshot(&self) -> Option<Snapshot<S>> {
        self.snapshot.lock().unwrap().clone()
    }

    /// Store one transition into its slot (`env_id * alpha + step % alpha`).
    pub fn append(&self, transition: Transition<S>) -> Result<()> {
        if self.role() != Role::Write {
            return Err(Error::usage("append to read-role storage"));
        }
        if transition.env_id >= self.n_envs {
            return Err(Error::usage(format!("env id {} out of range", transition.env_id)));
        }
        let offset = (transition.step_index % self.alpha as u64) as usize;
        let idx = transition.env_id * self.alpha + offset;
        let mut slot = self.slots[idx].lock().unwrap();
        if slot.is_some() {
            return Err(Error::usage(format!(
                "double fill of slot (env {}, offset {offset})",
                transition.env_id
            )));
        }
        *slot = Some(transition);
        drop(slot);
        self.filled.fetch_add(1, Ordering::Release);
        Ok(())
    }

    /// Record the final observed state of `env_id`, the bootstrap state for
    /// the window end.
    pub fn set_final(&self, env_id: usize, features: Vec<S>) -> Result<()> {
        if self.role() != Role::Write {
            return Err(Error::usage("set_final on read-role storage"));
        }
        let slot = self
            .finals
            .get(env_id)
            .ok_or_else(|| Error::usage(format!("env id {env_id} out of range")))?;
        let mut f = slot.lock().unwrap();
        if f.is_some() {
            return Err(Error::usage(format!("final state for env {env_id} set twice")));
        }
        *f = Some(features);
        drop(f);
        self.finals_set.fetch_add(1, Ordering::Release);
        Ok(())
    }

    pub fn final_features(&self, env_id: usize) -> Option<Vec<S>> {
        self.finals.get(env_id)?.lock().unwrap().clone()
    }

    /// All stored transitions, env ascending then step ascending, regardless
    /// of append interleaving.
    pub fn canonical_transitions(&self) -> Vec<Transition<S>> {
        self.slots
            .iter()
            .filter_map(|s| s.lock().unwrap().clone())
            .collect()
    }

    /// Fold the scalar fields of all stored transitions (canonical order)
    /// into a running digest. A cheap trajectory fingerprint: two runs that
    /// visit the same (env, step, action, reward, done) stream in the same
    /// canonical order produce the same value.
    pub fn fold_digest(&self, mut digest: u64) -> u64 {
        for slot in &self.slots {
            if let Some(t) = slot.lock().unwrap().as_ref() {
                let words = [
                    t.env_id as u64,
                    t.step_index,
                    t.action as u64,
                    t.reward.to_f64().map(f64::to_bits).unwrap_or(u64::MAX),
                    t.done as u64,
                ];
                for w in words {
                    digest = mix64(digest ^ w.wrapping_add(GOLDEN_GAMMA));
                }
            }
        }
        digest
    }

    /// Clear all slots and re-arm for a new epoch (synchronous baselines
    /// reuse one storage instead of a pair).
    pub(crate) fn reset_for_epoch(&self, epoch: u64, snapshot: Snapshot<S>) {
        self.reset_to_write(epoch, snapshot);
    }

    fn reset_to_write(&self, epoch: u64, snapshot: Snapshot<S>) {
        for slot in &self.slots {
            *slot.lock().unwrap() = None;
        }
        for f in &self.finals {
            *f.lock().unwrap() = None;
        }
        self.filled.store(0, Ordering::Release);
        self.finals_set.store(0, Ordering::Release);
        self.exhausted.store(false, Ordering::Release);
        self.epoch.store(epoch, Ordering::Release);
        *self.snapshot.lock().unwrap() = Some(snapshot);
        self.role.store(ROLE_WRITE, Ordering::Release);
    }
}

struct PairState {
    write_idx: usize,
}

/// Two storages alternating write/read roles. [`swap`] blocks until the
/// write storage is complete (all slots and finals) and the read storage is
/// exhausted, then flips the roles and re-arms the new write storage with
/// the next epoch and behavior snapshot.
///
/// [`swap`]: StoragePair::swap
pub struct StoragePair<S: Scalar> {
    storages: [RolloutStorage<S>; 2],
    state: Mutex<PairState>,
    progress: Condvar,
}

impl<S: Scalar> StoragePair<S> {
    /// New pair: storage 0 writes epoch 0 under `initial` behavior
    /// parameters; storage 1 is a vacuously exhausted read placeholder.
    pub fn new(n_envs: usize, alpha: usize, initial: Snapshot<S>) -> Self {
        let write = RolloutStorage::new(n_envs, alpha);
        write.set_snapshot(initial);
        let read = RolloutStorage::new(n_envs, alpha);
        read.role.store(ROLE_READ, Ordering::Release);
        read.mark_exhausted();
        StoragePair {
            storages: [write, read],
            state: Mutex::new(PairState { write_idx: 0 }),
            progress: Condvar::new(),
        }
    }

    pub fn write_storage(&self) -> &RolloutStorage<S> {
        let idx = self.state.lock().unwrap().write_idx;
        &self.storages[idx]
    }

    pub fn read_storage(&self) -> &RolloutStorage<S> {
        let idx = self.state.lock().unwrap().write_idx;
        &self.storages[idx ^ 1]
    }

    pub fn append(&self, transition: Transition<S>) -> Result<()> {
        self.write_storage().append(transition)?;
        self.nudge();
        Ok(())
    }

    pub fn set_final(&self, env_id: usize, features: Vec<S>) -> Result<()> {
        self.write_storage().set_final(env_id, features)?;
        self.nudge();
        Ok(())
    }

    pub fn mark_exhausted(&self) {
        self.read_storage().mark_exhausted();
        self.nudge();
    }

    fn nudge(&self) {
        let _guard = self.state.lock().unwrap();
        self.progress.notify_all();
    }

    /// Swap roles once the write side is full and the read side consumed.
    /// `next_snapshot` becomes the behavior snapshot of the new write epoch;
    /// its policy version must equal that epoch.
    pub fn swap(&self, next_snapshot: Snapshot<S>) -> Result<u64> {
        let mut state = self.state.lock().unwrap();
        loop {
            let write = &self.storages[state.write_idx];
            let read = &self.storages[state.write_idx ^ 1];
            if write.is_complete() && write.finals_ready() && read.is_exhausted() {
                break;
            }
            state = self.progress.wait(state).unwrap();
        }
        let old_write = &self.storages[state.write_idx];
        let next_epoch = old_write.epoch() + 1;
        if next_snapshot.policy.version != next_epoch {
            return Err(Error::usage(format!(
                "snapshot version {} does not match epoch {next_epoch}",
                next_snapshot.policy.version
            )));
        }
        old_write.role.store(ROLE_READ, Ordering::Release);
        let reader = &self.storages[state.write_idx ^ 1];
        reader.reset_to_write(next_epoch, next_snapshot);
        state.write_idx ^= 1;
        drop(state);
        self.progress.notify_all();
        Ok(next_epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicBool;
    use std::sync::Arc;
    use std::time::Duration;

    fn msg(env_id: usize, step_index: u64) -> StateMsg<f64> {
        StateMsg { env_id, features: vec![env_id as f64], step_index, sample_word: 7 }
    }

    fn transition(env_id: usize, step_index: u64) -> Transition<f64> {
        Transition {
            env_id,
            step_index,
            features: vec![step_index as f64],
            action: 0,
            reward: 1.0,
            done: false,
        }
    }

    fn snapshot(version: u64) -> Snapshot<f64> {
        let mut policy = PolicyParams::zeros(1, 2);
        policy.version = version;
        let mut value = ValueParams::zeros(1);
        value.version = version;
        Snapshot { policy, value }
    }

    #[test]
    fn state_buffer_roundtrip() {
        let buf = StateBuffer::new(3);
        for e in 0..3 {
            buf.push(msg(e, 0)).unwrap();
        }
        let got = buf.take_all();
        assert_eq!(got.len(), 3);
        assert!(buf.take_all().is_empty());
        // Pending flags cleared: same envs may push again.
        buf.push(msg(1, 1)).unwrap();
    }

    #[test]
    fn state_buffer_one_in_flight_per_env() {
        let buf = StateBuffer::new(2);
        buf.push(msg(0, 0)).unwrap();
        assert!(matches!(buf.push(msg(0, 1)), Err(Error::Usage(_))));
        assert!(matches!(buf.push(msg(5, 0)), Err(Error::Usage(_))));
    }

    #[test]
    fn state_buffer_close_semantics() {
        let buf = Arc::new(StateBuffer::<f64>::new(1));
        let waiter = {
            let buf = Arc::clone(&buf);
            std::thread::spawn(move || buf.take_all_wait())
        };
        std::thread::sleep(Duration::from_millis(20));
        buf.close();
        assert!(waiter.join().unwrap().is_none());
        assert!(matches!(buf.push(msg(0, 0)), Err(Error::Usage(_))));
    }

    #[test]
    fn state_buffer_rejects_when_not_accepting() {
        let buf = StateBuffer::<f64>::new(1);
        buf.set_accepting(false);
        assert!(matches!(buf.push(msg(0, 0)), Err(Error::Usage(_))));
        buf.set_accepting(true);
        buf.push(msg(0, 0)).unwrap();
    }

    #[test]
    fn action_rendezvous() {
        let buf = Arc::new(ActionBuffer::new(2));
        let taker = {
            let buf = Arc::clone(&buf);
            std::thread::spawn(move || buf.take(1).unwrap())
        };
        std::thread::sleep(Duration::from_millis(10));
        buf.push(ActionMsg { env_id: 1, action: 3 }).unwrap();
        assert_eq!(taker.join().unwrap(), 3);
    }

    #[test]
    fn action_buffer_single_slot() {
        let buf = ActionBuffer::new(1);
        buf.push(ActionMsg { env_id: 0, action: 1 }).unwrap();
        assert!(matches!(
            buf.push(ActionMsg { env_id: 0, action: 2 }),
            Err(Error::Usage(_))
        ));
        assert_eq!(buf.take(0).unwrap(), 1);
        buf.push(ActionMsg { env_id: 0, action: 2 }).unwrap();
        assert_eq!(buf.take(0).unwrap(), 2);
    }

    #[test]
    fn action_buffer_close_unblocks_taker() {
        let buf = Arc::new(ActionBuffer::new(1));
        let taker = {
            let buf = Arc::clone(&buf);
            std::thread::spawn(move || buf.take(0))
        };
        std::thread::sleep(Duration::from_millis(10));
        buf.close();
        assert!(taker.join().unwrap().is_err());
    }

    #[test]
    fn storage_canonical_order_ignores_append_order() {
        let storage = RolloutStorage::new(3, 4);
        // Shuffled fill: env 2 first, odd steps before even.
        for env in [2usize, 0, 1] {
            for step in [3u64, 1, 2, 0] {
                storage.append(transition(env, step)).unwrap();
            }
        }
        assert!(storage.is_complete());
        let all = storage.canonical_transitions();
        let order: Vec<(usize, u64)> = all.iter().map(|t| (t.env_id, t.step_index)).collect();
        let expected: Vec<(usize, u64)> =
            (0..3).flat_map(|e| (0..4).map(move |s| (e, s))).collect();
        assert_eq!(order, expected);
    }

    #[test]
    fn storage_rejects_double_fill() {
        let storage = RolloutStorage::new(1, 2);
        storage.append(transition(0, 0)).unwrap();
        assert!(matches!(storage.append(transition(0, 0)), Err(Error::Usage(_))));
        // Offsets wrap modulo alpha: global step 2 collides with step 0.
        assert!(matches!(storage.append(transition(0, 2)), Err(Error::Usage(_))));
        assert!(!storage.is_complete());
    }

    #[test]
    fn storage_final_state_set_once() {
        let storage = RolloutStorage::<f64>::new(1, 1);
        storage.set_final(0, vec![1.0]).unwrap();
        assert!(matches!(storage.set_final(0, vec![2.0]), Err(Error::Usage(_))));
        assert_eq!(storage.final_features(0).unwrap(), vec![1.0]);
        assert!(storage.finals_ready());
    }

    #[test]
    fn pair_swap_blocks_until_complete_and_exhausted() {
        let pair = Arc::new(StoragePair::new(1, 1, snapshot(0)));

        // Phase 1: swap must wait for write completeness.
        let done = Arc::new(AtomicBool::new(false));
        let swapper = {
            let pair = Arc::clone(&pair);
            let done = Arc::clone(&done);
            std::thread::spawn(move || {
                pair.swap(snapshot(1)).unwrap();
                done.store(true, Ordering::SeqCst);
            })
        };
        std::thread::sleep(Duration::from_millis(40));
        assert!(!done.load(Ordering::SeqCst), "swap returned before write was complete");
        pair.append(transition(0, 0)).unwrap();
        pair.set_final(0, vec![0.0]).unwrap();
        swapper.join().unwrap();
        assert!(done.load(Ordering::SeqCst));

        // Phase 2: the old write is now the read side and unconsumed, so the
        // next swap must wait for exhaustion.
        pair.append(transition(0, 1)).unwrap();
        pair.set_final(0, vec![1.0]).unwrap();
        let done = Arc::new(AtomicBool::new(false));
        let swapper = {
            let pair = Arc::clone(&pair);
            let done = Arc::clone(&done);
            std::thread::spawn(move || {
                pair.swap(snapshot(2)).unwrap();
                done.store(true, Ordering::SeqCst);
            })
        };
        std::thread::sleep(Duration::from_millis(40));
        assert!(!done.load(Ordering::SeqCst), "swap returned before read was exhausted");
        pair.mark_exhausted();
        swapper.join().unwrap();
    }

    #[test]
    fn pair_roles_alternate_and_epochs_advance() {
        let pair = StoragePair::new(2, 2, snapshot(0));
        for epoch in 0..100u64 {
            assert_eq!(pair.write_storage().epoch(), epoch);
            assert_eq!(pair.write_storage().role(), Role::Write);
            assert_eq!(pair.read_storage().role(), Role::Read);
            assert_eq!(pair.write_storage().snapshot_versions().unwrap().0, epoch);
            for env in 0..2 {
                for k in 0..2 {
                    pair.append(transition(env, epoch * 2 + k)).unwrap();
                }
                pair.set_final(env, vec![0.0]).unwrap();
            }
            pair.mark_exhausted();
            let next = pair.swap(snapshot(epoch + 1)).unwrap();
            assert_eq!(next, epoch + 1);
            // The swapped-out storage kept its batch and epoch.
            assert_eq!(pair.read_storage().epoch(), epoch);
            assert!(pair.read_storage().is_complete());
            assert!(!pair.read_storage().is_exhausted());
            pair.mark_exhausted();
        }
    }

    #[test]
    fn pair_rejects_mismatched_snapshot_version() {
        let pair = StoragePair::new(1, 1, snapshot(0));
        pair.append(transition(0, 0)).unwrap();
        pair.set_final(0, vec![0.0]).unwrap();
        assert!(matches!(pair.swap(snapshot(7)), Err(Error::Usage(_))));
    }

    #[test]
    fn read_role_storage_rejects_writes() {
        let pair = StoragePair::new(1, 1, snapshot(0));
        pair.append(transition(0, 0)).unwrap();
        pair.set_final(0, vec![0.0]).unwrap();
        pair.swap(snapshot(1)).unwrap();
        let read = pair.read_storage();
        assert!(matches!(read.append(transition(0, 1)), Err(Error::Usage(_))));
        assert!(matches!(read.set_final(0, vec![1.0]), Err(Error::Usage(_))));
    }

    /// Rendezvous stress: producers and consumers exchange 2000 steps per
    /// env through the buffers; every (env, step) pair arrives exactly once
    /// and per-env arrival order is chronological.
    #[test]
    fn buffer_stress_multiset_and_order() {
        const ENVS: usize = 4;
        const STEPS: u64 = 2000;
        const CONSUMERS: usize = 2;
        let states = Arc::new(StateBuffer::<f64>::new(ENVS));
        let actions = Arc::new(ActionBuffer::new(ENVS));
        let seen: Arc<Mutex<Vec<(usize, u64)>>> = Arc::new(Mutex::new(Vec::new()));

        let mut producers = Vec::new();
        for env in 0..ENVS {
            let states = Arc::clone(&states);
            let actions = Arc::clone(&actions);
            producers.push(std::thread::spawn(move || {
                for step in 0..STEPS {
                    states.push(msg(env, step)).unwrap();
                    let a = actions.take(env).unwrap();
                    assert_eq!(a, (step % 5) as usize);
                }
            }));
        }
        let mut consumers = Vec::new();
        for _ in 0..CONSUMERS {
            let states = Arc::clone(&states);
            let actions = Arc::clone(&actions);
            let seen = Arc::clone(&seen);
            consumers.push(std::thread::spawn(move || {
                while let Some(batch) = states.take_all_wait() {
                    let mut log = seen.lock().unwrap();
                    for m in &batch {
                        log.push((m.env_id, m.step_index));
                    }
                    drop(log);
                    for m in batch {
                        actions
                            .push(ActionMsg {
                                env_id: m.env_id,
                                action: (m.step_index % 5) as usize,
                            })
                            .unwrap();
                    }
                }
            }));
        }
        for p in producers {
            p.join().unwrap();
        }
        states.close();
        for c in consumers {
            c.join().unwrap();
        }

        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), ENVS * STEPS as usize);
        let mut per_env: Vec<Vec<u64>> = vec![Vec::new(); ENVS];
        for &(env, step) in seen.iter() {
            per_env[env].push(step);
        }
        for (env, steps) in per_env.iter().enumerate() {
            assert_eq!(steps.len(), STEPS as usize, "env {env} count");
            assert!(
                steps.windows(2).all(|w| w[0] < w[1]),
                "env {env} arrivals out of order"
            );
        }
    }
}
