use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KcfError {
    #[error("non-finite state at step {step}, coordinate {coordinate}")]
    NonFiniteState { step: usize, coordinate: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("probe evaluations cannot resolve the state-factor span ({0}); add probe points")]
    RankDeficientProbe(String),

    #[error("G(u) is column-rank deficient at u = {input:?}")]
    RankDeficientAtInput { input: Vec<f64> },

    #[error("no switched mode for input value {input:?}")]
    UnknownInputValue { input: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss ({loss}); parameter norm {param_norm}")]
    NonFiniteLoss { loss: f64, param_norm: f64 },

    #[error("non-finite gradient; parameter norm {param_norm}")]
    NonFiniteGradient { param_norm: f64 },

    #[error("unknown system '{name}'; builtins: {builtins}")]
    UnknownSystem { name: String, builtins: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for KcfError {
    fn from(err: std::io::Error) -> Self {
        KcfError::Io(err.to_string())
    }
}

impl From<serde_json::Error> for KcfError {
    fn from(err: serde_json::Error) -> Self {
        KcfError::Parse {
            line: err.line(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, KcfError>;
