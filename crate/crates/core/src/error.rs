use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {op} got {left:?} and {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("index error: {what} index {index} out of range 0..{len}")]
    Index { what: &'static str, index: usize, len: usize },
    #[error("degenerate vector: {0} has zero norm")]
    DegenerateVector(&'static str),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("vocabulary error: token {token} not in vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("evaluation error: split `{split}` {reason}")]
    Evaluation { split: String, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape { op, left: left.to_vec(), right: right.to_vec() }
    }

    /// True for errors caused by user input (bad config or arguments) rather than a runtime fault.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
