use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the selector, simulator and persistence layers.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not agree for the named operation.
    Shape { op: &'static str, detail: String },
    /// Every slot of a panel or mask is invalid.
    NoValidCandidate,
    /// Attention over an empty reference set.
    EmptyReferenceSet,
    /// `backward` was called on a node that is not a scalar.
    NonScalarRoot(Vec<usize>),
    UnknownTask(String),
    InvalidPrediction(String),
    /// A caller broke an operation precondition.
    Contract(String),
    NoValidPanel { uid: u64, attempts: usize },
    NonFinite(String),
    EmptyTrainSet,
    Parse { line: usize, msg: String },
    CorruptCheckpoint { field: &'static str, detail: String },
    UnsupportedVersion(u32),
    Config(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::NoValidCandidate => write!(f, "no valid candidate: every slot is masked"),
            Error::EmptyReferenceSet => write!(f, "attention over an empty reference set"),
            Error::NonScalarRoot(shape) => {
                write!(f, "backward root must be a scalar, got shape {shape:?}")
            }
            Error::UnknownTask(tag) => write!(f, "unknown task family tag {tag:?}"),
            Error::InvalidPrediction(msg) => write!(f, "invalid prediction: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::NoValidPanel { uid, attempts } => {
                write!(f, "query {uid}: no panel with a valid tool after {attempts} attempts")
            }
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::EmptyTrainSet => write!(f, "empty training set"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::CorruptCheckpoint { field, detail } => {
                write!(f, "corrupt checkpoint ({field}): {detail}")
            }
            Error::UnsupportedVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
