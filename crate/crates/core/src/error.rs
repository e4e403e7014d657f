use std::fmt;

/// Crate-wide error type. Each variant maps to one failure class of the
/// public operations; the CLI maps them onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("scoring error: {0}")]
    Scoring(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn dimension(msg: impl fmt::Display) -> Self {
        Error::Dimension(msg.to_string())
    }

    pub fn domain(msg: impl fmt::Display) -> Self {
        Error::Domain(msg.to_string())
    }

    pub fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub fn format(msg: impl fmt::Display) -> Self {
        Error::Format(msg.to_string())
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn state(msg: impl fmt::Display) -> Self {
        Error::State(msg.to_string())
    }

    pub fn calibration(msg: impl fmt::Display) -> Self {
        Error::Calibration(msg.to_string())
    }

    pub fn scoring(msg: impl fmt::Display) -> Self {
        Error::Scoring(msg.to_string())
    }

    pub fn degenerate(msg: impl fmt::Display) -> Self {
        Error::Degenerate(msg.to_string())
    }
}
