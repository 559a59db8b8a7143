use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch is not PK-structured: {0}")]
    BatchStructure(String),

    #[error("label {label} out of range for {num_classes} classes (sample {sample})")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("non-finite value in {term}: {value}")]
    NonFinite { term: String, value: f64 },

    #[error("branch `{0}` is disabled in this model")]
    BranchDisabled(&'static str),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint was written for a different model configuration:\n{0}")]
    FingerprintMismatch(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
