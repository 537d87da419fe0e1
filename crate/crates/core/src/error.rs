use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite value at iteration {iteration}: {message}")]
    Numeric { iteration: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schedule queried outside its range: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn length_mismatch(what: &str, expected: usize, got: usize) -> Self {
        Error::config(what, format!("length mismatch: expected {expected}, got {got}"))
    }
}
