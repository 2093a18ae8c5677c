use thiserror::Error;

/// Errors produced anywhere in the model, data and harness code.
#[derive(Debug, Error)]
pub enum MianError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("field `{field}`: index {index} out of vocabulary (size {vocab})")]
    OutOfVocabulary {
        field: String,
        index: usize,
        vocab: usize,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("all behavior positions are masked")]
    AllMasked,

    #[error("invalid label {0}; expected 0 or 1")]
    InvalidLabel(String),

    #[error("metric undefined: {0}")]
    Metric(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MianError>;

impl MianError {
    /// Short stable tag used by the CLI's machine-parsable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            MianError::ShapeMismatch { .. } => "shape",
            MianError::Empty(_) => "empty",
            MianError::NonFinite(_) => "non_finite",
            MianError::OutOfVocabulary { .. } => "out_of_vocabulary",
            MianError::Schema(_) => "schema",
            MianError::AllMasked => "all_masked",
            MianError::InvalidLabel(_) => "label",
            MianError::Metric(_) => "metric",
            MianError::Config(_) => "config",
            MianError::Parse { .. } => "parse",
            MianError::Diverged { .. } => "diverged",
            MianError::Io(_) => "io",
        }
    }
}
