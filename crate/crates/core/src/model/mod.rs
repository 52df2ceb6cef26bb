//! Co-attention and temporal enhancement of frame and caption features.

mod blocks;
mod checkpoint;
mod params;

pub use blocks::{co_attention, enhance, temporal, EnhancedFeatures, EnhancedVars, Modality};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use params::{
    Attention, CoAttentionStream, EncoderLayer, FeedForward, LayerNorm, ModelConfig, ModelParams, ModelVars, ParamTree,
    Weights,
};
