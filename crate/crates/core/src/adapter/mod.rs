//! The mask adapter: a small convolutional network mapping a binary mask and
//! a feature map to `K` spatially normalized semantic activation maps, with
//! hand-written reverse mode.

mod layers;
mod network;
mod params;

pub use layers::{gelu, gelu_grad};
pub use network::{adapter_backward, adapter_forward, AdapterGrads, AdapterTape, NORM_EPS};
pub use params::{
    decode_checkpoint, encode_checkpoint, init_params, layout, load_checkpoint, save_checkpoint, AdapterParams,
    BlockParams, CheckpointHeader, Stage, TensorSpec, DW_KERNEL, EXPANSION, NUM_BLOCKS, PATCH_KERNEL,
};
