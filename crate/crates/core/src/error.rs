use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label alignment: {0}")]
    Alignment(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("degenerate distractor set: {0}")]
    DegenerateDistractors(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input or configuration rather than
    /// a failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Input(_) | Error::Comparison(_) | Error::Alignment(_)
        )
    }
}
