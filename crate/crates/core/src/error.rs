use melrof_autograd::AutogradError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("band {band} of {bands} is empty (too many bands for {bins} bins)")]
    EmptyBand { band: usize, bands: usize, bins: usize },
    #[error("model mode mismatch: expected {expected}, found {found}")]
    ModeMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Autograd(AutogradError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(String),
}

impl From<AutogradError> for CoreError {
    fn from(e: AutogradError) -> Self {
        match e {
            AutogradError::NonFinite { op } => CoreError::NonFinite(format!("in {op}")),
            other => CoreError::Autograd(other),
        }
    }
}

impl CoreError {
    /// True for divergence-type failures (NaN/Inf) as opposed to bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, CoreError::NonFinite(_))
    }
}

pub(crate) fn config(msg: impl Into<String>) -> CoreError {
    CoreError::InvalidConfig(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> CoreError {
    CoreError::Shape(msg.into())
}
