//! Embeddings, multi-head self-attention blocks and the masked-language-model head.

pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod model;

pub use checkpoint::{load_checkpoint, read_checkpoint, read_checkpoint_expecting, save_checkpoint, write_checkpoint};
pub use config::EncoderConfig;
pub use embedding::{embed_input, sinusoid_table, EmbeddingVars, SequenceInput};
pub use model::{core_param_count, Encoded, Encoder, ModelVars};
