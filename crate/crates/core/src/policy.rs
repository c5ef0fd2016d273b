//! Softmax policy and linear value function with hand-derived gradients,
//! the n-step truncated return, and the versioned parameter update rule.
//!
//! Gradient accumulation walks transitions in canonical order (env
//! ascending, then step ascending), so every gradient is a pure function of
//! (parameters, batch, hyperparameters) and repeated calls are bit-identical.

use crate::buffers::RolloutStorage;
use crate::{Error, Result, Scalar};

/// Softmax policy weights, row-major `[feature_dim x action_count]`, plus
/// the update counter. All entries must stay finite.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<S> {
    pub feature_dim: usize,
    pub action_count: usize,
    pub weights: Vec<S>,
    pub version: u64,
}

impl<S: Scalar> PolicyParams<S> {
    pub fn zeros(feature_dim: usize, action_count: usize) -> Self {
        PolicyParams {
            feature_dim,
            action_count,
            weights: vec![S::zero(); feature_dim * action_count],
            version: 0,
        }
    }

    #[inline]
    pub fn weight(&self, feature: usize, action: usize) -> S {
        self.weights[feature * self.action_count + action]
    }
}

/// Linear value function: `dot(weights, features) + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueParams<S> {
    pub weights: Vec<S>,
    pub bias: S,
    pub version: u64,
}

impl<S: Scalar> ValueParams<S> {
    pub fn zeros(feature_dim: usize) -> Self {
        ValueParams { weights: vec![S::zero(); feature_dim], bias: S::zero(), version: 0 }
    }
}

/// Learner hyperparameters.
///
/// `learning_rate` of zero is allowed: it disables learning while leaving
/// every data path intact, which the engine-equivalence checks rely on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearnerHyperparams<S> {
    pub discount: S,
    pub nstep: usize,
    pub entropy_coef: S,
    pub value_coef: S,
    pub learning_rate: S,
}

impl<S: Scalar> LearnerHyperparams<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > S::zero() && self.discount <= S::one()) {
            return Err(Error::usage("discount must lie in (0, 1]"));
        }
        if self.nstep == 0 {
            return Err(Error::usage("nstep must be >= 1"));
        }
        if !(self.entropy_coef >= S::zero()) || !self.entropy_coef.is_finite() {
            return Err(Error::usage("entropy_coef must be >= 0"));
        }
        if !(self.value_coef >= S::zero()) || !self.value_coef.is_finite() {
            return Err(Error::usage("value_coef must be >= 0"));
        }
        if !(self.learning_rate >= S::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::usage("learning_rate must be >= 0"));
        }
        Ok(())
    }
}

/// Policy-gradient block, same shape as [`PolicyParams::weights`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGradient<S> {
    pub weights: Vec<S>,
}

impl<S: Scalar> PolicyGradient<S> {
    pub fn zeros(feature_dim: usize, action_count: usize) -> Self {
        PolicyGradient { weights: vec![S::zero(); feature_dim * action_count] }
    }

    pub fn l2_norm(&self) -> S {
        self.weights.iter().map(|w| *w * *w).sum::<S>().sqrt()
    }
}

/// Value-gradient block, same shape as [`ValueParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGradient<S> {
    pub weights: Vec<S>,
    pub bias: S,
}

impl<S: Scalar> ValueGradient<S> {
    pub fn zeros(feature_dim: usize) -> Self {
        ValueGradient { weights: vec![S::zero(); feature_dim], bias: S::zero() }
    }
}

/// Action distribution under the softmax policy: positive entries summing to
/// one within 1e-12 (in `f64`), invariant to constant logit shifts.
pub fn policy_forward<S: Scalar>(params: &PolicyParams<S>, features: &[S]) -> Result<Vec<S>> {
    if features.len() != params.feature_dim {
        return Err(Error::usage(format!(
            "feature dimension mismatch: params expect {}, got {}",
            params.feature_dim,
            features.len()
        )));
    }
    let actions = params.action_count;
    let mut logits = vec![S::zero(); actions];
    for (f, &x) in features.iter().enumerate() {
        if x == S::zero() {
            continue;
        }
        let row = &params.weights[f * actions..(f + 1) * actions];
        for (l, &w) in logits.iter_mut().zip(row) {
            *l += x * w;
        }
    }
    let max = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    let mut probs = logits;
    for p in &mut probs {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in &mut probs {
        *p /= sum;
    }
    Ok(probs)
}

/// Scalar state value `dot(weights, features) + bias`.
pub fn value_forward<S: Scalar>(params: &ValueParams<S>, features: &[S]) -> Result<S> {
    if features.len() != params.weights.len() {
        return Err(Error::usage(format!(
            "feature dimension mismatch: params expect {}, got {}",
            params.weights.len(),
            features.len()
        )));
    }
    let mut v = params.bias;
    for (&w, &x) in params.weights.iter().zip(features) {
        if x != S::zero() {
            v += w * x;
        }
    }
    Ok(v)
}

/// Inverse-CDF sampling: the smallest action index whose cumulative
/// probability exceeds `u`. Deterministic in `(probs, u)`.
pub fn sample_action<S: Scalar>(probs: &[S], u: S) -> Result<usize> {
    validate_distribution(probs)?;
    if !(u >= S::zero() && u < S::one()) {
        return Err(Error::usage("u must lie in [0, 1)"));
    }
    let mut cum = S::zero();
    let mut last_nonzero = None;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if cum > u {
            return Ok(i);
        }
        if p > S::zero() {
            last_nonzero = Some(i);
        }
    }
    // Rounding left cum slightly below one; fall back to the last action
    // that has mass.
    last_nonzero.ok_or_else(|| Error::usage("distribution has no mass"))
}

fn validate_distribution<S: Scalar>(probs: &[S]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::usage("empty distribution"));
    }
    let mut sum = S::zero();
    for &p in probs {
        if !p.is_finite() || p < S::zero() {
            return Err(Error::usage("distribution entries must be finite and >= 0"));
        }
        sum += p;
    }
    let tol = S::epsilon().sqrt();
    if (sum - S::one()).abs() > tol {
        return Err(Error::usage(format!("distribution sums to {sum}, not 1")));
    }
    Ok(())
}

/// Shannon entropy `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy<S: Scalar>(probs: &[S]) -> S {
    let mut h = S::zero();
    for &p in probs {
        if p > S::zero() {
            h -= p * p.ln();
        }
    }
    h
}

/// n-step truncated returns over one stored window.
///
/// `bootstrap_values` holds one value per stored state plus the value of the
/// final observed state (`len == rewards.len() + 1`). The reward sum
/// truncates at episode boundaries (`done`) with the bootstrap zeroed, and
/// at the window end with the final state's value as bootstrap.
pub fn n_step_returns<S: Scalar>(
    rewards: &[S],
    dones: &[bool],
    bootstrap_values: &[S],
    discount: S,
    nstep: usize,
) -> Result<Vec<S>> {
    let t_len = rewards.len();
    if dones.len() != t_len {
        return Err(Error::usage("rewards and dones must have equal length"));
    }
    if bootstrap_values.len() != t_len + 1 {
        return Err(Error::usage("bootstrap_values must have length rewards.len() + 1"));
    }
    if nstep == 0 {
        return Err(Error::usage("nstep must be >= 1"));
    }
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut acc = S::zero();
        let mut pow = S::one();
        let mut j = 0;
        loop {
            if j == nstep {
                acc += pow * bootstrap_values[t + j];
                break;
            }
            if t + j == t_len {
                acc += pow * bootstrap_values[t_len];
                break;
            }
            acc += pow * rewards[t + j];
            if dones[t + j] {
                break;
            }
            pow *= discount;
            j += 1;
        }
        out.push(acc);
    }
    Ok(out)
}

/// n-step actor-critic gradient evaluated at the parameters that generated
/// the batch. The policy term treats the advantage as a constant; the value
/// term is the semi-gradient of the squared error (returns held fixed).
///
/// Errors if the batch is incomplete or its behavior snapshot does not match
/// `policy` (the delayed-update contract: gradients are always taken at the
/// behavior parameters).
pub fn actor_critic_gradient<S: Scalar>(
    policy: &PolicyParams<S>,
    value: &ValueParams<S>,
    batch: &RolloutStorage<S>,
    hp: &LearnerHyperparams<S>,
) -> Result<(PolicyGradient<S>, ValueGradient<S>)> {
    let snapshot_version = batch
        .snapshot_versions()
        .ok_or_else(|| Error::usage("batch has no behavior snapshot"))?;
    if snapshot_version.0 != policy.version {
        return Err(Error::usage(format!(
            "batch was collected under policy version {}, not {}",
            snapshot_version.0, policy.version
        )));
    }
    gradient_at(policy, value, batch, hp)
}

/// Same estimator as [`actor_critic_gradient`] but evaluated at the
/// *current* parameters regardless of which parameters generated the batch.
/// Used only by the asynchronous baseline; with lag zero it reduces
/// bit-exactly to the fresh gradient.
pub fn stale_gradient<S: Scalar>(
    current_policy: &PolicyParams<S>,
    current_value: &ValueParams<S>,
    stale_batch: &RolloutStorage<S>,
    hp: &LearnerHyperparams<S>,
) -> Result<(PolicyGradient<S>, ValueGradient<S>)> {
    gradient_at(current_policy, current_value, stale_batch, hp)
}

fn gradient_at<S: Scalar>(
    policy: &PolicyParams<S>,
    value: &ValueParams<S>,
    batch: &RolloutStorage<S>,
    hp: &LearnerHyperparams<S>,
) -> Result<(PolicyGradient<S>, ValueGradient<S>)> {
    if !batch.is_complete() {
        return Err(Error::usage("incomplete batch"));
    }
    hp.validate()?;
    let transitions = batch.canonical_transitions();
    let n_envs = batch.n_envs();
    let alpha = batch.alpha();
    let total = transitions.len();
    debug_assert_eq!(total, n_envs * alpha);

    let mut pgrad = PolicyGradient::zeros(policy.feature_dim, policy.action_count);
    let mut vgrad = ValueGradient::zeros(value.weights.len());
    let actions = policy.action_count;

    for env in 0..n_envs {
        let window = &transitions[env * alpha..(env + 1) * alpha];
        let final_features = batch.final_features(env).ok_or_else(|| {
            Error::usage(format!("missing final bootstrap state for env {env}"))
        })?;
        let rewards: Vec<S> = window.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = window.iter().map(|t| t.done).collect();
        let mut values = Vec::with_capacity(alpha + 1);
        for t in window {
            values.push(value_forward(value, &t.features)?);
        }
        values.push(value_forward(value, &final_features)?);
        let returns = n_step_returns(&rewards, &dones, &values, hp.discount, hp.nstep)?;

        for (k, t) in window.iter().enumerate() {
            let probs = policy_forward(policy, &t.features)?;
            if t.action >= actions {
                return Err(Error::usage(format!("action id {} out of range", t.action)));
            }
            let advantage = returns[k] - values[k];
            let h = entropy(&probs);
            // Per-action logit coefficients:
            //   A * (indicator - pi_a)  -  entropy_coef * pi_a (ln pi_a + H)
            let mut coeff = vec![S::zero(); actions];
            for a in 0..actions {
                let indicator = if a == t.action { S::one() } else { S::zero() };
                let mut c = advantage * (indicator - probs[a]);
                if probs[a] > S::zero() {
                    c -= hp.entropy_coef * probs[a] * (probs[a].ln() + h);
                }
                coeff[a] = c;
            }
            for (f, &x) in t.features.iter().enumerate() {
                if x == S::zero() {
                    continue;
                }
                let row = &mut pgrad.weights[f * actions..(f + 1) * actions];
                for (g, &c) in row.iter_mut().zip(&coeff) {
                    *g += x * c;
                }
                vgrad.weights[f] -= x * advantage;
            }
            vgrad.bias -= advantage;
        }
    }

    let inv = S::one() / S::from(total).unwrap();
    for g in &mut pgrad.weights {
        *g *= inv;
    }
    let vscale = S::from(2.0).unwrap() * hp.value_coef * inv;
    for g in &mut vgrad.weights {
        *g *= vscale;
    }
    vgrad.bias *= vscale;
    Ok((pgrad, vgrad))
}

/// Gradient-ascent step on the policy: `theta += learning_rate * grad`,
/// version incremented. Non-finite gradient entries abort without mutating.
pub fn apply_policy_update<S: Scalar>(
    target: &mut PolicyParams<S>,
    grad: &PolicyGradient<S>,
    learning_rate: S,
) -> Result<()> {
    if grad.weights.len() != target.weights.len() {
        return Err(Error::usage("policy gradient shape mismatch"));
    }
    if grad.weights.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite policy gradient entry"));
    }
    for (w, &g) in target.weights.iter_mut().zip(&grad.weights) {
        *w += learning_rate * g;
    }
    target.version += 1;
    Ok(())
}

/// Gradient-descent step on the value function: `phi -= learning_rate *
/// grad`, version incremented. Non-finite gradient entries abort without
/// mutating.
pub fn apply_value_update<S: Scalar>(
    target: &mut ValueParams<S>,
    grad: &ValueGradient<S>,
    learning_rate: S,
) -> Result<()> {
    if grad.weights.len() != target.weights.len() {
        return Err(Error::usage("value gradient shape mismatch"));
    }
    if grad.weights.iter().any(|g| !g.is_finite()) || !grad.bias.is_finite() {
        return Err(Error::numeric("non-finite value gradient entry"));
    }
    for (w, &g) in target.weights.iter_mut().zip(&grad.weights) {
        *w -= learning_rate * g;
    }
    target.bias -= learning_rate * grad.bias;
    target.version += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffers::{Snapshot, Transition};

    fn uniform_check(probs: &[f64]) {
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_zero_weights_is_uniform() {
        let params = PolicyParams::<f64>::zeros(3, 4);
        let probs = policy_forward(&params, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(probs, vec![0.25; 4]);
    }

    #[test]
    fn forward_shift_invariance() {
        let mut params = PolicyParams::<f64>::zeros(1, 3);
        params.weights = vec![0.3, -1.2, 2.0];
        let base = policy_forward(&params, &[1.0]).unwrap();
        let mut shifted = params.clone();
        for w in &mut shifted.weights {
            *w += 7.5;
        }
        let probs = policy_forward(&shifted, &[1.0]).unwrap();
        uniform_check(&probs);
        for (a, b) in base.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_closed_form() {
        let mut params = PolicyParams::<f64>::zeros(1, 2);
        params.weights = vec![3f64.ln(), 0.0];
        let probs = policy_forward(&params, &[1.0]).unwrap();
        assert!((probs[0] - 0.75).abs() < 1e-12);
        assert!((probs[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let params = PolicyParams::<f64>::zeros(3, 4);
        assert!(matches!(policy_forward(&params, &[1.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn value_forward_cases() {
        let mut params = ValueParams::<f64>::zeros(3);
        assert_eq!(value_forward(&params, &[1.0, 0.0, 0.0]).unwrap(), 0.0);
        params.bias = 2.0;
        assert_eq!(value_forward(&params, &[0.0, 0.0, 0.0]).unwrap(), 2.0);
        params.weights[1] = 1.0;
        assert_eq!(value_forward(&params, &[0.0, 1.0, 0.0]).unwrap(), 3.0);
    }

    #[test]
    fn sample_action_inverse_cdf() {
        let uniform = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(sample_action(&uniform, 0.6).unwrap(), 2);
        assert_eq!(sample_action(&uniform, 0.0).unwrap(), 0);
        assert_eq!(sample_action(&[0.0, 1.0, 0.0], 0.99).unwrap(), 1);
        assert_eq!(sample_action(&[0.0, 1.0, 0.0], 0.0).unwrap(), 1);
    }

    #[test]
    fn sample_action_rejects_bad_distribution() {
        assert!(matches!(sample_action(&[0.5, 0.4], 0.2), Err(Error::Usage(_))));
        assert!(matches!(sample_action(&[0.5, 0.5], 1.0), Err(Error::Usage(_))));
        assert!(matches!(sample_action(&[f64::NAN, 1.0], 0.2), Err(Error::Usage(_))));
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[0.25f64; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0f64]), 0.0);
        let h = entropy(&[0.75, 0.25f64]);
        let exact = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((h - exact).abs() < 1e-12);
    }

    #[test]
    fn returns_zero_discount() {
        let r = [1.0, 2.0, 3.0];
        let d = [false, false, false];
        let v = [9.0, 9.0, 9.0, 9.0];
        let out = n_step_returns(&r, &d, &v, 0.0, 3).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn returns_arithmetic() {
        let out: Vec<f64> =
            n_step_returns(&[1.0, 2.0], &[false, false], &[0.0, 0.0, 3.0], 1.0, 2).unwrap();
        assert_eq!(out[0], 6.0);
        let out: Vec<f64> = n_step_returns(
            &[1.0, 1.0, 1.0],
            &[false, false, false],
            &[0.0, 0.0, 0.0, 10.0],
            0.9,
            3,
        )
        .unwrap();
        assert!((out[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn returns_one_step_identity() {
        let r = [0.5f64, -1.0, 2.0];
        let d = [false, true, false];
        let v = [0.1, 0.2, 0.3, 0.4];
        let out = n_step_returns(&r, &d, &v, 0.9, 1).unwrap();
        assert!((out[0] - (0.5 + 0.9 * 0.2)).abs() < 1e-12);
        assert_eq!(out[1], -1.0); // done: bootstrap zeroed
        assert!((out[2] - (2.0 + 0.9 * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn returns_done_truncates() {
        let out: Vec<f64> = n_step_returns(
            &[1.0, 5.0, 7.0],
            &[false, true, false],
            &[0.0, 0.0, 0.0, 100.0],
            0.5,
            3,
        )
        .unwrap();
        // t=0 stops after the done at t=1: 1 + 0.5*5, no bootstrap.
        assert!((out[0] - 3.5).abs() < 1e-12);
        // t=2 hits the window end: 7 + 0.5*100.
        assert!((out[2] - 57.0).abs() < 1e-12);
    }

    #[test]
    fn returns_length_mismatch() {
        assert!(matches!(
            n_step_returns(&[1.0], &[false, false], &[0.0, 0.0], 0.9, 1),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            n_step_returns(&[1.0], &[false], &[0.0], 0.9, 1),
            Err(Error::Usage(_))
        ));
    }

    fn hp(entropy_coef: f64) -> LearnerHyperparams<f64> {
        LearnerHyperparams {
            discount: 0.9,
            nstep: 2,
            entropy_coef,
            value_coef: 0.5,
            learning_rate: 0.1,
        }
    }

    /// Single-transition batch: 1 env, alpha 1, one-hot feature.
    fn tiny_batch(
        policy: &PolicyParams<f64>,
        value: &ValueParams<f64>,
        action: usize,
        reward: f64,
    ) -> RolloutStorage<f64> {
        let storage = RolloutStorage::new(1, 1);
        storage.set_snapshot(Snapshot { policy: policy.clone(), value: value.clone() });
        storage
            .append(Transition {
                env_id: 0,
                step_index: 0,
                features: vec![1.0],
                action,
                reward,
                done: true,
            })
            .unwrap();
        storage.set_final(0, vec![1.0]).unwrap();
        storage
    }

    #[test]
    fn gradient_uniform_single_transition() {
        // Zero params, 2 actions, logged action 0, done => return == reward,
        // advantage == reward. Logit gradient = A * [1 - 0.5, -0.5]; the
        // entropy gradient vanishes at uniform.
        let policy = PolicyParams::<f64>::zeros(1, 2);
        let value = ValueParams::<f64>::zeros(1);
        let batch = tiny_batch(&policy, &value, 0, 2.0);
        let (pg, vg) = actor_critic_gradient(&policy, &value, &batch, &hp(0.3)).unwrap();
        assert!((pg.weights[0] - 1.0).abs() < 1e-12);
        assert!((pg.weights[1] + 1.0).abs() < 1e-12);
        // Value semi-gradient: 2 * value_coef * (R - V) * (-x) = -2.
        assert!((vg.weights[0] + 2.0).abs() < 1e-12);
        assert!((vg.bias + 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_zero_advantage_is_zero() {
        let policy = PolicyParams::<f64>::zeros(1, 2);
        let mut value = ValueParams::<f64>::zeros(1);
        value.weights[0] = 2.0; // V(x) == reward, advantage 0
        let batch = tiny_batch(&policy, &value, 0, 2.0);
        let (pg, vg) = actor_critic_gradient(
            &policy,
            &value,
            &batch,
            &LearnerHyperparams { entropy_coef: 0.0, ..hp(0.0) },
        )
        .unwrap();
        assert!(pg.weights.iter().all(|&g| g == 0.0));
        assert!(vg.weights.iter().all(|&g| g == 0.0) && vg.bias == 0.0);
    }

    #[test]
    fn gradient_requires_matching_snapshot() {
        let policy = PolicyParams::<f64>::zeros(1, 2);
        let value = ValueParams::<f64>::zeros(1);
        let batch = tiny_batch(&policy, &value, 0, 1.0);
        let mut newer = policy.clone();
        newer.version = 3;
        assert!(matches!(
            actor_critic_gradient(&newer, &value, &batch, &hp(0.0)),
            Err(Error::Usage(_))
        ));
        // stale_gradient has no such precondition.
        assert!(stale_gradient(&newer, &value, &batch, &hp(0.0)).is_ok());
    }

    #[test]
    fn gradient_incomplete_batch_rejected() {
        let policy = PolicyParams::<f64>::zeros(1, 2);
        let value = ValueParams::<f64>::zeros(1);
        let storage = RolloutStorage::<f64>::new(2, 1);
        storage.set_snapshot(Snapshot { policy: policy.clone(), value: value.clone() });
        assert!(matches!(
            actor_critic_gradient(&policy, &value, &storage, &hp(0.0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn stale_reduces_to_fresh_at_lag_zero() {
        let mut policy = PolicyParams::<f64>::zeros(2, 3);
        policy.weights = vec![0.4, -0.2, 0.1, -0.5, 0.3, 0.2];
        let mut value = ValueParams::<f64>::zeros(2);
        value.weights = vec![0.25, -0.75];
        value.bias = 0.1;
        let storage = RolloutStorage::new(1, 2);
        storage.set_snapshot(Snapshot { policy: policy.clone(), value: value.clone() });
        for (k, (a, r, d)) in [(0usize, 0.3, false), (2, -0.7, false)].iter().enumerate() {
            storage
                .append(Transition {
                    env_id: 0,
                    step_index: k as u64,
                    features: if k == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] },
                    action: *a,
                    reward: *r,
                    done: *d,
                })
                .unwrap();
        }
        storage.set_final(0, vec![1.0, 0.0]).unwrap();
        let fresh = actor_critic_gradient(&policy, &value, &storage, &hp(0.01)).unwrap();
        let stale = stale_gradient(&policy, &value, &storage, &hp(0.01)).unwrap();
        assert_eq!(fresh, stale);
        // Purity: repeated calls are bit-identical.
        let again = actor_critic_gradient(&policy, &value, &storage, &hp(0.01)).unwrap();
        assert_eq!(fresh, again);
    }

    #[test]
    fn stale_gradient_grows_as_logged_action_probability_vanishes() {
        // Current policy drives the logged action's probability toward zero;
        // the stale policy-gradient magnitude must grow monotonically.
        let value = ValueParams::<f64>::zeros(1);
        let behavior = PolicyParams::<f64>::zeros(1, 2);
        let batch = tiny_batch(&behavior, &value, 0, 1.0);
        let hp = LearnerHyperparams {
            discount: 0.9,
            nstep: 1,
            entropy_coef: 0.0,
            value_coef: 0.5,
            learning_rate: 0.1,
        };
        let mut last = -1.0;
        for w in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut current = PolicyParams::<f64>::zeros(1, 2);
            current.weights = vec![0.0, w]; // p(action 0) = 1 / (1 + e^w)
            let (pg, _) = stale_gradient(&current, &value, &batch, &hp).unwrap();
            let norm = pg.l2_norm();
            assert!(norm > last, "norm {norm} did not grow (w = {w})");
            last = norm;
        }
    }

    #[test]
    fn apply_updates() {
        let mut policy = PolicyParams::<f64>::zeros(1, 2);
        let zero = PolicyGradient::zeros(1, 2);
        apply_policy_update(&mut policy, &zero, 0.5).unwrap();
        assert_eq!(policy.weights, vec![0.0, 0.0]);
        assert_eq!(policy.version, 1);

        let g1 = PolicyGradient { weights: vec![1.0, -2.0] };
        let g2 = PolicyGradient { weights: vec![0.5, 0.5] };
        apply_policy_update(&mut policy, &g1, 1.0).unwrap();
        assert_eq!(policy.weights, vec![1.0, -2.0]);
        apply_policy_update(&mut policy, &g2, 1.0).unwrap();
        assert_eq!(policy.weights, vec![1.5, -1.5]);
        assert_eq!(policy.version, 3);

        let mut value = ValueParams::<f64>::zeros(1);
        let vg = ValueGradient { weights: vec![2.0], bias: -1.0 };
        apply_value_update(&mut value, &vg, 0.5).unwrap();
        assert_eq!(value.weights, vec![-1.0]);
        assert_eq!(value.bias, 0.5);
        assert_eq!(value.version, 1);
    }

    #[test]
    fn apply_update_rejects_non_finite() {
        let mut policy = PolicyParams::<f64>::zeros(1, 2);
        let bad = PolicyGradient { weights: vec![f64::NAN, 0.0] };
        assert!(matches!(apply_policy_update(&mut policy, &bad, 0.1), Err(Error::Numeric(_))));
        assert_eq!(policy.version, 0); // untouched
    }

    #[test]
    fn finite_difference_oracle() {
        // Random small instances: analytic gradients vs central differences
        // of the sampled objective, relative error <= 1e-5.
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(0xFD01);
        for case in 0..6 {
            let feature_dim = 3;
            let actions = 2;
            let alpha = 4;
            let n_envs = 2;
            let mut policy = PolicyParams::<f64>::zeros(feature_dim, actions);
            for w in &mut policy.weights {
                *w = rng.next_unit() * 2.0 - 1.0;
            }
            let mut value = ValueParams::<f64>::zeros(feature_dim);
            for w in &mut value.weights {
                *w = rng.next_unit() - 0.5;
            }
            value.bias = rng.next_unit() - 0.5;
            let hp = LearnerHyperparams {
                discount: 0.9,
                nstep: 2,
                entropy_coef: 0.05,
                value_coef: 0.5,
                learning_rate: 0.1,
            };

            let storage = RolloutStorage::new(n_envs, alpha);
            storage.set_snapshot(Snapshot { policy: policy.clone(), value: value.clone() });
            for env in 0..n_envs {
                for k in 0..alpha {
                    let state = (rng.next_u64() % feature_dim as u64) as usize;
                    let mut features = vec![0.0; feature_dim];
                    features[state] = 1.0;
                    storage
                        .append(Transition {
                            env_id: env,
                            step_index: k as u64,
                            features,
                            action: (rng.next_u64() % actions as u64) as usize,
                            reward: rng.next_unit() * 2.0 - 1.0,
                            done: rng.next_unit() < 0.2,
                        })
                        .unwrap();
                }
                let mut features = vec![0.0; feature_dim];
                features[(rng.next_u64() % feature_dim as u64) as usize] = 1.0;
                storage.set_final(env, features).unwrap();
            }

            let (pg, vg) = actor_critic_gradient(&policy, &value, &storage, &hp).unwrap();

            // Frozen pieces of the objective at the base parameters.
            let transitions = storage.canonical_transitions();
            let total = transitions.len() as f64;
            let mut frozen_returns = Vec::new();
            let mut frozen_advantages = Vec::new();
            for env in 0..n_envs {
                let window = &transitions[env * alpha..(env + 1) * alpha];
                let rewards: Vec<f64> = window.iter().map(|t| t.reward).collect();
                let dones: Vec<bool> = window.iter().map(|t| t.done).collect();
                let mut values: Vec<f64> = window
                    .iter()
                    .map(|t| value_forward(&value, &t.features).unwrap())
                    .collect();
                values.push(
                    value_forward(&value, &storage.final_features(env).unwrap()).unwrap(),
                );
                let returns =
                    n_step_returns(&rewards, &dones, &values, hp.discount, hp.nstep).unwrap();
                for k in 0..alpha {
                    frozen_returns.push(returns[k]);
                    frozen_advantages.push(returns[k] - values[k]);
                }
            }

            let policy_objective = |p: &PolicyParams<f64>| -> f64 {
                let mut j = 0.0;
                for (i, t) in transitions.iter().enumerate() {
                    let probs = policy_forward(p, &t.features).unwrap();
                    j += probs[t.action].ln() * frozen_advantages[i]
                        + hp.entropy_coef * entropy(&probs);
                }
                j / total
            };
            let value_objective = |v: &ValueParams<f64>| -> f64 {
                let mut j = 0.0;
                for (i, t) in transitions.iter().enumerate() {
                    let err = frozen_returns[i] - value_forward(v, &t.features).unwrap();
                    j += err * err;
                }
                hp.value_coef * j / total
            };

            let h = 1e-6;
            let mut max_rel = 0.0f64;
            for i in 0..policy.weights.len() {
                let mut plus = policy.clone();
                plus.weights[i] += h;
                let mut minus = policy.clone();
                minus.weights[i] -= h;
                let fd = (policy_objective(&plus) - policy_objective(&minus)) / (2.0 * h);
                let rel = (pg.weights[i] - fd).abs() / pg.weights[i].abs().max(1.0);
                max_rel = max_rel.max(rel);
            }
            for i in 0..value.weights.len() {
                let mut plus = value.clone();
                plus.weights[i] += h;
                let mut minus = value.clone();
                minus.weights[i] -= h;
                let fd = (value_objective(&plus) - value_objective(&minus)) / (2.0 * h);
                let rel = (vg.weights[i] - fd).abs() / vg.weights[i].abs().max(1.0);
                max_rel = max_rel.max(rel);
            }
            {
                let mut plus = value.clone();
                plus.bias += h;
                let mut minus = value.clone();
                minus.bias -= h;
                let fd = (value_objective(&plus) - value_objective(&minus)) / (2.0 * h);
                let rel = (vg.bias - fd).abs() / vg.bias.abs().max(1.0);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel <= 1e-5, "case {case}: max relative error {max_rel}");
        }
    }
}
