//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A system model violates a structural invariant.
    #[error("invalid system model: {0}")]
    InvalidModel(String),

    /// A configuration value or file is malformed.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A sampling vector lies outside the feasible region of the surrogate
    /// objective (per-client lower bound or threshold-sum violated).
    #[error("infeasible sampling vector: {0}")]
    InfeasibleSampling(String),

    /// The fixed per-round budget `M` cannot be met within the box constraints.
    #[error("round budget M = {m} outside reachable interval [{lo}, {hi}]")]
    InfeasibleM { m: f64, lo: f64, hi: f64 },

    /// The optimization problem has no feasible point at all.
    #[error("infeasible problem: {0}")]
    InfeasibleProblem(String),

    /// A pilot trace never reached the estimation loss.
    #[error("pilot trace never reached loss {f_s} within {rounds} rounds")]
    PilotTooShort { f_s: f64, rounds: usize },

    /// The two pilot runs cannot be fit (equal round counts or a fit with the
    /// wrong sign).
    #[error("degenerate pilot fit: {0}")]
    DegeneratePilot(String),

    /// Training diverged.
    #[error("non-finite loss or parameters at round {round}; reduce the learning rate")]
    NonFinite { round: usize },

    /// Names the pipeline stage an inner error came from.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
