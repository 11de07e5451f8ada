//! The dual encoder and its parameter plumbing.

mod config;
mod dual_encoder;
pub mod layers;
pub mod params;
mod types;


pub use config::{ModelConfig, SUPPORTED_FRAME_COUNTS};
pub use dual_encoder::{
    BatchNodes, DualEncoder, Mit, TextNodes, TextTower, VideoEncoding, VideoNodes, VisionTower,
    DEFAULT_TEMPERATURE,
};
pub use layers::{Linear, LoraSlot, Pass};
pub use params::{Binder, ParamEntry, ParamId, ParamKind, ParamStore};
pub use types::{
    ByteTokenizer, ClipTensor, EmbeddingVector, EncodedPairBatch, FrameEmbeddingSequence,
    TextFeatures, TokenSequence,
};
