//! Differentiable 3-D mathematical morphology.
//!
//! Flat and counter-harmonic-mean erosion, dilation, opening and closing on
//! a small reverse-mode autodiff tape, the morphological residual block built
//! from them, a U-Net style segmentation network whose encoder embeds those
//! blocks, and the training / cross-validation harness around it.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the 64-bit instantiation used by the file formats and
//! the experiment driver.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod morphology;
pub mod network;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kernels::conv::Padding;
pub use kernels::extremum::ExtremumKind;
pub use blocks::{MorphBlockConfig, OpImpl};
pub use morphology::{MorphOp, StructElement};
pub use network::{build_network, NetworkConfig, SegmentationModel, Variant};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
