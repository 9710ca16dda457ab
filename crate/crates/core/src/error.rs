use thiserror::Error;

pub type Result<T> = std::result::Result<T, StrafeError>;

#[derive(Debug, Error)]
pub enum StrafeError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: parse error: {detail}")]
    Parse { line: usize, detail: String },

    #[error("line {line}: invalid field `{field}`: {detail}")]
    Validation {
        line: usize,
        field: String,
        detail: String,
    },

    #[error("size error: {0}")]
    Size(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("unknown patient `{0}`")]
    UnknownPatient(String),

    #[error("undefined metric {metric}: {reason}")]
    UndefinedMetric { metric: &'static str, reason: String },

    #[error("closure is not deterministic: loss {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("variant `{0}` has no representation-phase attention")]
    UnsupportedVariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl StrafeError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        StrafeError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn undefined(metric: &'static str, reason: impl Into<String>) -> Self {
        StrafeError::UndefinedMetric {
            metric,
            reason: reason.into(),
        }
    }
}
