use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward called on non-scalar node with {0} elements")]
    NonScalarLoss(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;
