use std::io;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: Shape,
        actual: Shape,
    },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("unsupported stride {0}, expected 1 or 2")]
    UnsupportedStride(usize),

    #[error("invalid block spec: {0}")]
    InvalidBlock(String),

    #[error("invalid model spec: {0}")]
    InvalidModel(String),

    #[error("batch norm: {0}")]
    BatchNorm(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("weight format: {0}")]
    Format(String),

    #[error("weight file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("weights were written for a different model spec (hash {found:#018x}, expected {expected:#018x})")]
    SpecHashMismatch { found: u64, expected: u64 },

    #[error("parameter {name}: stored dims {stored:?} do not match model dims {model:?}")]
    ParamShapeMismatch {
        name: String,
        stored: Vec<usize>,
        model: Vec<usize>,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
