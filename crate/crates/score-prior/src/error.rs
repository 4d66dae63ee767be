//! Error model shared by every module in the crate.
//!
//! Configuration problems (bad schedule parameters, dimension mismatches,
//! invalid solver settings) are reported eagerly as [`Error::Config`].
//! Numerical failures carry enough context (`t`, the operation) to locate
//! the offending integration or sampling step.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or arguments (dimensions, ranges, schedules).
    #[error("config: {0}")]
    Config(String),

    /// A non-finite value appeared during a numerical computation.
    #[error("numerical: non-finite value in {context} at t = {t}")]
    NonFinite { context: &'static str, t: f64 },

    /// An adaptive solve exceeded its step budget before reaching the end
    /// time. Carries the state reached so far for post-mortem inspection.
    #[error("no convergence: {context}: exceeded max_steps = {max_steps} at t = {t}")]
    NoConvergence {
        context: &'static str,
        max_steps: usize,
        t: f64,
        partial: Vec<f64>,
    },

    /// Training loss was non-finite for too many consecutive steps.
    #[error("training diverged at step {step}: non-finite loss for {streak} consecutive steps")]
    TrainingDiverged { step: usize, streak: usize },

    /// A sampler chain left the finite domain (records the noise level index).
    #[error("{method} sampler diverged: non-finite state at level {level}")]
    SamplerDiverged { method: &'static str, level: usize },

    /// Malformed file contents (bad magic, truncated payload, shape mismatch).
    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Helper for formatted config errors.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors that indicate a transient numerical failure rather
    /// than a caller mistake; optimizers treat these as a diverged step.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NoConvergence { .. } | Error::SamplerDiverged { .. }
        )
    }
}
