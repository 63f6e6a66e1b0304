use thiserror::Error;

use crate::data::DataError;
use crate::em::EmError;
use crate::eval::EvalError;
use crate::impute::ImputeError;
use crate::panel::PanelError;
use crate::ppca::PpcaError;

/// Any failure of the library, tagged with the stage that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("panel: {0}")]
    Panel(#[from] PanelError),
    #[error("ppca: {0}")]
    Ppca(#[from] PpcaError),
    #[error("em: {0}")]
    Em(#[from] EmError),
    #[error("impute: {0}")]
    Impute(#[from] ImputeError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    /// 1 for numerical failures, 2 for input, output and configuration
    /// problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Ppca(_) => 1,
            Error::Em(EmError::Ppca(_) | EmError::NonFinite { .. }) => 1,
            Error::Eval(EvalError::DegenerateBandwidth(_)) => 1,
            Error::Panel(PanelError::DegenerateHistogram(_)) => 1,
            _ => 2,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, e: impl std::fmt::Display) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), message: e.to_string() }
    }
}
