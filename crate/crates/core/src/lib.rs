//! SeesawNet: a small CPU deep-learning library for uneven group convolution
//! networks and their even-group and dense baselines.

pub mod autodiff;
pub mod blocks;
pub mod cost;
pub mod error;
pub mod layers;
pub mod model;
pub mod par;
pub mod tensor;
pub mod train;

pub use blocks::{BlockKind, BlockSpec, ConnectivityMatrix};
pub use error::{Error, Result};
pub use layers::{Block, Layer, LayerGraph, LayerKind, Param};
pub use model::{build_model, Depth, InputLayout, Model, ModelSpec};
pub use tensor::ops::BnMode;
pub use tensor::{ChannelPartition, DType, GroupLayout, Permutation, Real, Shape, Tensor};
