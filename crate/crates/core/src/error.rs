use thiserror::Error;

/// Errors raised by model construction, evaluation and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("drift does not vanish at the origin (|f(0)| = {0:e})")]
    DriftNotZeroAtOrigin(f64),

    #[error("constraint `{label}`: input appears at level {level}, below the declared relative degree")]
    RelativeDegree { label: String, level: usize },

    #[error("constraint `{label}` crossed its boundary (psi = {psi:e})")]
    BoundaryCrossed { label: String, psi: f64 },

    #[error("fault table queried at t = {t} outside [{start}, {end}]")]
    TableRange { t: f64, start: f64, end: f64 },

    #[error("integration diverged at t = {t}: state component {component} is not finite")]
    IntegrationDiverged { t: f64, component: usize },

    #[error("initial state is infeasible: {0}")]
    Infeasible(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
