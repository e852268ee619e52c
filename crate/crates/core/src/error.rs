use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("data error at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("numeric error in `{block}`: {message}")]
    Numeric { block: String, message: String },

    #[error("solver failed: {message} (residual {residual:e})")]
    Solver { message: String, residual: f64 },

    #[error("positivity violated for {} unit(s); first offending rows: {:?}", units.len(), &units[..units.len().min(10)])]
    Positivity { units: Vec<usize> },

    #[error("estimation error: {0}")]
    Estimation(String),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric { .. } | Error::Solver { .. } | Error::Positivity { .. }
        )
    }

    pub(crate) fn numeric(block: &str, message: impl Into<String>) -> Self {
        Error::Numeric {
            block: block.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
