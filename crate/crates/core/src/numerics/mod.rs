//! Dense tensors and the forward/backward primitives every layer is built from.
//!
//! There is no autodiff graph: each op pairs a forward function with a
//! hand-written backward, and layers chain them explicitly.

pub mod conv;
pub mod layers;
pub mod ops;
pub mod pmax;
pub mod tensor;

pub use conv::{conv2d, conv2d_backward, conv2d_backward_parts, ConvGeometry};
pub use layers::{BatchNorm2d, Conv2d, Linear, Param};
pub use ops::{
    batchnorm2d, batchnorm2d_backward, global_avg_pool, global_avg_pool_backward, linear,
    linear_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, softmax_cross_entropy,
    BatchNormCache, PoolIndex,
};
pub use pmax::{max_over_paths, pixelwise_max, pixelwise_max_backward, PathIndex};
