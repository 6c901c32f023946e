//! Quaternion neural networks with separable Hamilton-product convolution.
//!
//! Tensors are `B × C × H × W × 4` with the quaternion axis innermost. Layers
//! implement [`Module`] with explicit forward and backward passes; all
//! reductions accumulate in 64-bit.

pub mod engine;
pub mod ablation;
pub mod bench;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod mapping;
pub mod models;
pub mod quaternion;
pub mod scalar;
pub mod tensor;

pub use error::{QuanError, Result};
pub use layers::{ConvMode, ConvSpec, Module, Param, ParamKind, QConv, QConvParams, Sequential};
pub use losses::{LossWeights, OrientedTarget};
pub use mapping::MappingStrategy;
pub use quaternion::Quaternion;
pub use scalar::Real;
pub use tensor::{QTensor, Shape, Q};
