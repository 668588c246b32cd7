use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite (failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("singular system (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("transition matrix is reducible or periodic ({unit_modulus} eigenvalues of unit modulus)")]
    ReducibleChain { unit_modulus: usize },

    #[error("power iteration did not converge after {iterations} steps (last estimate {last})")]
    NoConvergence { iterations: usize, last: f64 },

    #[error("identification failed: {0}")]
    Identification(String),

    #[error("degenerate filter step at t={t}: all posterior mass vanished")]
    DegenerateFilter { t: usize },

    #[error("filter failed at t={t}, regime pair ({from},{to}): {source}")]
    FilterStep {
        t: usize,
        from: usize,
        to: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("smoother failed at t={t}: {reason}")]
    Smoother { t: usize, reason: String },

    #[error("M-step failed for regime {regime}: {reason}")]
    MStep { regime: usize, reason: String },

    #[error("EM iteration {iteration} failed during {stage}: {source}")]
    Em {
        iteration: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("initialization failed: {0}")]
    Init(String),
}

pub type Result<T> = std::result::Result<T, Error>;
