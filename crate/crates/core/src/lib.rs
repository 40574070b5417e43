//! Elastically-augmented convolutions.
//!
//! Convolution filters are expressed as trainable combinations of a fixed
//! Hermite-Gaussian basis. The basis is evaluated once per elastic
//! (rotation-scaling) transformation, giving one kernel per transformation
//! path for the same weights; the layer output is the per-pixel maximum of the
//! β-scaled path responses.
//!
//! Crate layout:
//! - [`numerics`]: dense tensors and forward/backward primitives.
//! - [`basis`]: displaced Hermite-Gaussian filter banks.
//! - [`eaconv`]: EAConv layers, residual blocks, models and weight transfer.
//! - [`perturb`]: deterministic image perturbations used for robustness sweeps.
//! - [`data`]: datasets (CIFAR-10 binary, synthetic shapes) and checkpoints.
//! - [`train`]: SGD training, evaluation, robustness sweeps and the comparison protocol.

pub mod basis;
pub mod data;
pub mod eaconv;
mod error;
pub mod gradcheck;
pub mod numerics;
pub mod perturb;
pub mod train;

pub use error::{Error, Result};
pub use numerics::tensor::Tensor;
