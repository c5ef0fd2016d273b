//! Deterministic actor-learner training engine with overlapped rollout and
//! learning, plus reference baseline engines and analytical performance
//! models for runtime and queue latency.
//!
//! The crate is organized around three layers:
//!
//! - learning math and environments ([`envs`], [`policy`]),
//! - the concurrent execution fabric ([`buffers`], [`engine`], [`baselines`]),
//! - closed-form and Monte-Carlo performance models ([`analysis`]).
//!
//! Learning-facing modules are generic over the floating-point [`Scalar`];
//! concrete `f32`/`f64` aliases live at the crate root. The [`analysis`]
//! module works in `f64` throughout because its tolerances (1e-10..1e-12)
//! are below `f32` resolution.

pub mod analysis;
pub mod baselines;
pub mod buffers;
pub mod engine;
pub mod envs;
pub mod policy;
pub mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the learning stack is generic over.
///
/// `Send + Sync + 'static` are required because parameter blocks and
/// transitions cross worker-thread boundaries.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Send + Sync + Debug + Display + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Error type shared by every module in the crate.
///
/// `Usage` covers contract violations by the caller (bad dimensions, bad
/// configuration, buffer protocol misuse). `Numeric` covers non-convergence
/// and non-finite values. `UnstableQueue` is the queueing model outside its
/// stability region.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("unstable queue: n*rho0 = {rho} >= 1")]
    UnstableQueue { rho: f64 },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub type Policy32 = policy::PolicyParams<f32>;
pub type Policy64 = policy::PolicyParams<f64>;
pub type Value32 = policy::ValueParams<f32>;
pub type Value64 = policy::ValueParams<f64>;
pub type EngineConfig64 = engine::EngineConfig<f64>;
pub type RunOutput64 = engine::RunOutput<f64>;
