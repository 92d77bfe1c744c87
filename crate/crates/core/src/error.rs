use thiserror::Error;

pub type Result<T> = std::result::Result<T, SbpError>;

#[derive(Debug, Error)]
pub enum SbpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("sketch index {index} out of range (q = {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ground truth is the zero vector")]
    ZeroTruth,

    #[error("exactness assumption violated: rank(E[Z]) = {rank_projector}, rank(A) = {rank_matrix}")]
    ExactnessViolated {
        rank_projector: usize,
        rank_matrix: usize,
    },

    #[error("dual objective has no minimizer along the chosen row")]
    UnboundedDual,

    #[error("inner dual solver stopped after {iters} iterations with gradient norm {grad_norm:.3e}")]
    InnerSolver { iters: usize, grad_norm: f64 },

    #[error("no stopping criterion configured")]
    NoStoppingCriterion,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported MatrixMarket format: {0}")]
    Unsupported(String),

    #[error("trial with seed {seed} failed: {source}")]
    TrialFailed {
        seed: u64,
        #[source]
        source: Box<SbpError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SbpError {
    /// True for failures of the numerics themselves, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            SbpError::UnboundedDual
            | SbpError::InnerSolver { .. }
            | SbpError::ExactnessViolated { .. } => true,
            SbpError::TrialFailed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
