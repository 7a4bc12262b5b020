use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: cannot record on a closed tape")]
    TapeClosed { op: &'static str },

    #[error("{op}: inputs belong to different tapes")]
    DifferentTapes { op: &'static str },

    #[error("grad: output must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("grad: wrt tensor #{index} is not recorded on the output's tape")]
    NotOnTape { index: usize },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
