use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(
        "svd did not converge on {rows}x{cols} input after {sweeps} sweeps \
         (frobenius norm {frobenius:.3e}, residual off-diagonal ratio {residual:.3e}, \
         condition estimate {condition:.3e})"
    )]
    NoConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
        frobenius: f64,
        residual: f64,
        condition: f64,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("stereographic singularity: p·o = {0} is at the antipode of the center")]
    Antipode(f64),

    #[error("ipca state for layer {0} has never been updated")]
    UninitializedState(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("cannot write {}: {source}", path.display())]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    MissingCheckpoint,
    Config,
    Numerical,
    Unwritable,
    Other,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::MissingCheckpoint => 2,
            ErrorCategory::Config => 3,
            ErrorCategory::Numerical => 4,
            ErrorCategory::Unwritable => 5,
            ErrorCategory::Other => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::MissingCheckpoint => "missing-checkpoint",
            ErrorCategory::Config => "config",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Unwritable => "unwritable",
            ErrorCategory::Other => "other",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::MissingCheckpoint(_) => ErrorCategory::MissingCheckpoint,
            Error::Config(_) => ErrorCategory::Config,
            Error::NonFinite(_)
            | Error::NoConvergence { .. }
            | Error::DegenerateInput(_)
            | Error::Antipode(_)
            | Error::Diverged { .. } => ErrorCategory::Numerical,
            Error::Unwritable { .. } => ErrorCategory::Unwritable,
            Error::Shape(_)
            | Error::UninitializedState(_)
            | Error::Checkpoint(_)
            | Error::Io(_) => ErrorCategory::Other,
        }
    }
}
