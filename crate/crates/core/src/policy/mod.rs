//! Attention policy over routing states.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{PolicyConfig, QuantumHeads, ENCODER_LAYERS};
pub use model::{head_attention, mha, DecodeMode, DemandGate, Encoded, EncoderLayer, Episode, HeadParams, MhaParams, Policy, Rollout};
