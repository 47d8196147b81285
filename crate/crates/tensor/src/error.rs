use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    Size { shape: Vec<usize>, len: usize },
    #[error("expected shape {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("expected rank {expected}, got shape {got:?}")]
    Rank { expected: usize, got: Vec<usize> },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("empty input")]
    Empty,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("convolution: {0}")]
    Conv(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
