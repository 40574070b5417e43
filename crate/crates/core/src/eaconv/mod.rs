//! Elastically-augmented layers, residual blocks, model assembly and weight
//! transfer from standard networks.

mod layer;
mod model;
mod resblock;
mod transfer;

pub use layer::{EaConv2d, EaConvCache};
pub use model::{build_model, Layer, LayerConfig, Model, ModelConfig, Tape};
pub use resblock::{BranchCache, BranchWeights, ResBlock, ResBlockCache};
pub use transfer::{transfer_weights, TransferReport};
