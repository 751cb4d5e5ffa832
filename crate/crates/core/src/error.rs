use alloc::string::String;

/// Error type shared by every module of the core crate.
///
/// The variant names double as the error category reported by the CLI.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("policy error: {0}")]
    Policy(String),
    #[error("classifier error: {0}")]
    Classifier(String),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Numeric(_) => "numeric",
            Error::Index(_) => "index",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Data(_) => "data",
            Error::Policy(_) => "policy",
            Error::Classifier(_) => "classifier",
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
