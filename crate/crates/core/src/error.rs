use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("empty dimension in {0}")]
    EmptyDimension(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("frozen parameter '{0}' was modified")]
    FreezingViolation(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("pre-training failed for seed {seed}: source accuracy {accuracy:.4} below {target} after {epochs} epochs ({config})")]
    PretrainFailed {
        seed: u64,
        accuracy: f64,
        target: f64,
        epochs: usize,
        config: String,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at {key} (line {line}): {message}")]
    Parse {
        key: String,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
