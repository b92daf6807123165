use thiserror::Error;

/// Errors surfaced by the library. Shape mismatches are programmer errors and
/// panic instead of showing up here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel matrix is singular (cholesky failed at pivot {pivot}, value {value:e})")]
    SingularKernel { pivot: usize, value: f64 },

    #[error("rows of X are rank deficient after {attempts} draws (rank {rank} < {wanted})")]
    RankDeficient {
        attempts: usize,
        rank: usize,
        wanted: usize,
    },

    #[error("requested {requested} samples of class {class} but only {available} available")]
    NotEnoughSamples {
        class: usize,
        requested: usize,
        available: usize,
    },

    #[error("training diverged in {stage} at epoch {epoch}")]
    Divergence { stage: String, epoch: usize },

    #[error("pretraining stopped at accuracy {final_acc:.4} below threshold {threshold:.4} after {epochs} epochs")]
    ThresholdUnreachable {
        final_acc: f64,
        threshold: f64,
        epochs: usize,
    },

    #[error("cannot move {requested} layers out of a depth-{depth} backbone")]
    InvalidSplit { requested: usize, depth: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("probe sets differ between snapshots")]
    ProbeMismatch,

    #[error("missing data: {0}")]
    Missing(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("csv parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
