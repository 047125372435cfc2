use thiserror::Error;

pub type Result<T> = std::result::Result<T, TunesError>;

#[derive(Debug, Error)]
pub enum TunesError {
    /// A layer or operator hyperparameter is out of its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Every key of an attention query row is masked, so its softmax is undefined.
    #[error("attention query row {row} has no unmasked key")]
    FullyMaskedRow { row: usize },

    #[error("label {label} out of range 1..={num_classes} at index {index}")]
    LabelOutOfRange {
        label: u8,
        num_classes: usize,
        index: usize,
    },

    #[error("class {class} never occurs in the training labels")]
    ZeroFrequencyClass { class: usize },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TunesError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        TunesError::Parameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        TunesError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TunesError::Config(msg.into())
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        TunesError::Parse {
            offset,
            message: msg.into(),
        }
    }
}
