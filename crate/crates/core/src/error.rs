use thiserror::Error;

#[derive(Debug, Error)]
pub enum LbmError {
    /// An argument lies outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs are individually valid but inconsistent with each other.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("calibration failed: target risk {target} not reachable in epsilon bracket [{lo}, {hi}] (risks {risk_lo:.4} .. {risk_hi:.4})")]
    Calibration {
        target: f64,
        lo: f64,
        hi: f64,
        risk_lo: f64,
        risk_hi: f64,
    },

    #[error("model selection failed: {0}")]
    Selection(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LbmError {
    /// Short machine-readable tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            LbmError::Domain(_) => "domain",
            LbmError::Contract(_) => "contract",
            LbmError::Parse { .. } => "parse",
            LbmError::Calibration { .. } => "calibration",
            LbmError::Selection(_) => "selection",
            LbmError::Io(_) => "io",
            LbmError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, LbmError>;
