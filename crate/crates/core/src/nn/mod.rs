//! Tensor type and explicit forward/backward kernels.

mod conv;
mod layer;
mod ops;
mod params;
mod tensor;

pub use conv::{conv_backward, conv_forward, conv_output_shape, ConvGrads, ConvSpec};
pub use layer::Conv2d;
pub use ops::{add_elementwise, concat_channels, relu_backward, relu_forward, split_channels};
pub use params::ParamSet;
pub use tensor::{Real, Tensor};
