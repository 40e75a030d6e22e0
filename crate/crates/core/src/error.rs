use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("too few patients: need at least 3, got {0}")]
    TooFewPatients(usize),

    #[error("timestamp collision for patient {patient} at time {time}")]
    TimestampCollision { patient: String, time: f64 },

    #[error("csv line {line}: {msg}")]
    Csv { line: u64, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty pool")]
    EmptyPool,

    #[error("incompatible head: {0}")]
    IncompatibleHead(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Transport failures are worth retrying; everything else is a caller bug or bad data.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Io(_))
    }
}
