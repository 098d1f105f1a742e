use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate mask row {row}: every entry is masked")]
    DegenerateMaskRow { row: usize },
    #[error("sequence too short: {what} (length {len}, need at least {min})")]
    SequenceTooShort {
        what: &'static str,
        len: usize,
        min: usize,
    },
    #[error("sequence length {len} is not divisible by {rate}")]
    SequenceLength { len: usize, rate: usize },
    #[error("index {index} out of range for size {bound}")]
    Index { index: usize, bound: usize },
    #[error("NaN gradient for parameter `{0}`")]
    NanGradient(String),
    #[error("loss became NaN at step {0}")]
    NanLoss(usize),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("empty text: nothing left after tokenization")]
    EmptyText,
    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("missing input file: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("degenerate generation: no motion codes were produced")]
    DegenerateGeneration,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
