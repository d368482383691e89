use thiserror::Error;

/// Errors surfaced by the library. The CLI wraps these in `anyhow`.
#[derive(Debug, Error)]
pub enum GmrError {
    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("unsupported dimension count {0} (expected 1 or 3)")]
    BadDimCount(usize),
    #[error("truncated idx payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("class {0} requested but absent from dataset")]
    MissingClass(usize),
    #[error("sub-task class sets overlap at class {0}")]
    OverlappingClasses(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("non-finite gradient at batch {batch}")]
    NonFiniteGradient { batch: usize },
    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("weights do not form a simplex (sum {0})")]
    NotSimplex(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no generated sample accepted after {attempts} draws")]
    DegenerateGenerator { attempts: usize },
    #[error("unknown sequential learning task '{0}'")]
    UnknownSlt(String),
    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("summary requires a D10 baseline")]
    MissingBaseline,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GmrError>;
