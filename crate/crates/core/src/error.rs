use thiserror::Error;

/// Errors surfaced by every operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A cross-product set is empty because dimension `dim` (0-based) has a single cluster.
    #[error("degenerate design: dimension {} has a single cluster, so pairs sharing exactly one cluster do not exist", .dim + 1)]
    DegenerateDesign { dim: usize },

    #[error("singular or indefinite variance matrix: {0}")]
    SingularVariance(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("empty sample: no observations in any cell")]
    EmptySample,

    #[error("insufficient bootstrap replicates: have {have}, need at least {need}")]
    InsufficientReplicates { have: usize, need: usize },

    #[error("moment model error: {0}")]
    Model(String),

    #[error("optimizer did not converge after {evaluations} evaluations (best objective {best_value:e})")]
    Convergence {
        best_theta: Vec<f64>,
        best_value: f64,
        evaluations: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
