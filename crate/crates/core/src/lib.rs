//! Safeguarding-based safe reinforcement learning for control-affine plants.
//!
//! The crate is organised bottom-up:
//!
//! - [`dynamics`]: control-affine plants `x' = f(x) + g(x)(u + u_f)` and fault signals.
//! - [`barrier`]: the psi-chain for high-relative-degree constraints and reciprocal barriers.
//! - [`safeguard`]: the safeguarding force, gradient similarity/manipulation, the adaptive
//!   gain law and the KKT / QP baselines.
//! - [`observer`]: the nonlinear fault observer.
//! - [`learner`]: actor-critic on a polynomial basis with simulated experience.
//! - [`simkit`]: fixed-step RK4 simulation with zero-order hold, metrics and CSV output.
//! - [`scenarios`]: the built-in scenario registry.

pub mod barrier;
pub mod dynamics;
pub mod error;
pub mod learner;
pub mod observer;
pub mod safeguard;
pub mod scenarios;
pub mod simkit;

pub use error::{Error, Result};

/// Column vector type used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix type used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
