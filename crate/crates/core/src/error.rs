use thiserror::Error;

/// Errors raised by model construction, evolution, sampling and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The force field violates evenness or positivity at a concrete witness.
    #[error("model invalid: {0}")]
    ModelInvalid(String),

    #[error("lattice mismatch: expected {expected}, found {found}")]
    LatticeMismatch { expected: String, found: String },

    /// A band frequency fell below the singular tolerance where an inverse is required.
    #[error("singular mode at grid point {index} (theta = {theta:?}, omega = {omega:e})")]
    SingularMode {
        index: usize,
        theta: Vec<f64>,
        omega: f64,
    },

    #[error("spectrum invalid: {0}")]
    SpectrumInvalid(String),

    #[error("profile invalid: {0}")]
    ProfileInvalid(String),

    #[error("torus too small: {reason}; need side N >= {required}")]
    TorusTooSmall { reason: String, required: usize },

    #[error("too few samples: need at least {required}, got {got}")]
    TooFewSamples { required: usize, got: usize },

    #[error("degenerate probe: sample variance is zero")]
    DegenerateProbe,

    #[error("CFL number {0} exceeds 0.9")]
    CflViolation(f64),

    /// The two independent constructions of the local covariance disagree.
    #[error("cross-check failed: {0}")]
    CrossCheck(String),

    /// Estimated working memory exceeds the configured cap.
    #[error("estimated memory {estimated_mb:.0} MB exceeds the cap of {cap_mb:.0} MB; try side N <= {suggested_side}")]
    ResourceLimit {
        estimated_mb: f64,
        cap_mb: f64,
        suggested_side: usize,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
