use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, EgmaError>;

/// Errors emitted by the pipeline, loss, and training modules.
#[derive(Debug, Clone, PartialEq)]
pub enum EgmaError {
    /// A CSV row has the wrong column count, an unparseable field, or a
    /// value outside its documented domain.
    MalformedRow {
        source: String,
        line: usize,
        reason: String,
    },
    /// Timestamps in a fixation or transcript file go backwards.
    NonMonotonicTime { source: String, line: usize },
    /// A transcript file contains no word rows.
    EmptyTranscript { source: String },
    /// A grid does not divide the dimensions it is applied to.
    DimensionMismatch {
        what: &'static str,
        dims: (usize, usize),
        grid: (usize, usize),
    },
    /// Two matrices that must agree in shape do not.
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// A cosine was requested against a (near-)zero vector.
    ZeroVector { row: usize, norm: f64 },
    /// Softmax temperature must be strictly positive.
    NonPositiveTemperature { tau: f64 },
    /// A function handed to the finite-difference oracle returned a
    /// non-finite value.
    NonFiniteFunction { at: String },
    /// Training produced a non-finite loss or gradient.
    NonFiniteLoss { step: u64, detail: String },
    /// A token is not present in the vocabulary.
    UnknownToken { token: String },
    /// A sentence tokenized to nothing.
    EmptySentence { text: String },
    /// The prompt bank has no classes.
    EmptyBank,
    /// Retrieval gallery is smaller than the largest requested K.
    GalleryTooSmall { gallery: usize, k: usize },
    /// A config file contains a key that is not a `TrainConfig` field.
    UnknownConfigKey { key: String },
    /// A config value failed to parse for its key.
    BadConfigValue { key: String, value: String },
    /// Wrapper around I/O failures (message keeps the error cloneable).
    Io { path: String, message: String },
}

impl fmt::Display for EgmaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MalformedRow {
                source,
                line,
                reason,
            } => write!(f, "{source}:{line}: malformed row: {reason}"),
            Self::NonMonotonicTime { source, line } => {
                write!(f, "{source}:{line}: timestamps out of order")
            }
            Self::EmptyTranscript { source } => {
                write!(f, "{source}: transcript has no words")
            }
            Self::DimensionMismatch { what, dims, grid } => write!(
                f,
                "{what}: {}x{} not divisible by {}x{} grid",
                dims.0, dims.1, grid.0, grid.1
            ),
            Self::ShapeMismatch {
                what,
                expected,
                got,
            } => write!(
                f,
                "{what}: expected {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            Self::ZeroVector { row, norm } => {
                write!(f, "row {row} has near-zero norm {norm:.3e}")
            }
            Self::NonPositiveTemperature { tau } => {
                write!(f, "temperature must be positive, got {tau}")
            }
            Self::NonFiniteFunction { at } => {
                write!(f, "function returned a non-finite value at {at}")
            }
            Self::NonFiniteLoss { step, detail } => {
                write!(f, "non-finite loss at step {step}: {detail}")
            }
            Self::UnknownToken { token } => write!(f, "token {token:?} not in vocabulary"),
            Self::EmptySentence { text } => {
                write!(f, "sentence {text:?} tokenized to nothing")
            }
            Self::EmptyBank => write!(f, "prompt bank has no classes"),
            Self::GalleryTooSmall { gallery, k } => {
                write!(f, "gallery of {gallery} items cannot serve top-{k}")
            }
            Self::UnknownConfigKey { key } => write!(f, "unknown config key {key:?}"),
            Self::BadConfigValue { key, value } => {
                write!(f, "bad value {value:?} for config key {key:?}")
            }
            Self::Io { path, message } => write!(f, "{path}: {message}"),
        }
    }
}

impl std::error::Error for EgmaError {}

impl EgmaError {
    pub fn io(path: impl Into<String>, err: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
