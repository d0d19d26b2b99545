//! The dual-stream classifier: one small CNN backbone per stream, a fusion
//! block chosen by name from a [`FusionRegistry`], and a two-layer MLP head.

mod checkpoint;
mod fusion;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ParamEntry, PARAMS_MAGIC};
pub use fusion::{AffineBypass, Attended, CrossAttention, FusionBlock, FusionRegistry, SimpleAttention};
pub use network::{
    affine, BackboneConfig, ConvStage, Dianet, ForwardOutput, FusionConfig, Init, ModelConfig, ParamSpec, INPUT_MEAN,
    INPUT_STD,
};
