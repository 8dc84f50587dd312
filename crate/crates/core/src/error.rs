//! Error type shared by all modules.

use thiserror::Error;

/// Errors from configuration validation, mathematical domain checks, and
/// numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A run or solver configuration is structurally invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input violates a mathematical precondition of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A density that must integrate to a prescribed mass does not.
    #[error("mass not normalized: found {found:.12e}, expected {expected} (tolerance {tol:.1e})")]
    Mass { found: f64, expected: f64, tol: f64 },

    /// The susceptibility matrix is singular because a color density vanishes.
    #[error("singular susceptibility: color {color} has zero density")]
    SingularSusceptibility { color: usize },

    /// An explicit scheme was asked to step beyond its stability limit.
    #[error("CFL violation: dt {dt:.6e} exceeds stable limit {limit:.6e} at K = {k}")]
    Cfl { dt: f64, limit: f64, k: usize },

    /// An iterative or finite-volume computation failed to meet its target.
    #[error("numerics failure: {0}")]
    Numerics(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Serialization or deserialization failure.
    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit-code classification used by command-line tools: configuration
    /// and domain problems are caller mistakes (2), the rest are internal
    /// failures (3).
    pub fn is_config_like(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Domain(_)
                | Error::Mass { .. }
                | Error::SingularSusceptibility { .. }
                | Error::Cfl { .. }
        )
    }
}
