//! Pre-norm transformer encoder–decoder with shared embeddings, a
//! teacher-forced tape forward pass, and cached greedy/beam decoding.

pub mod config;
pub mod inference;
pub mod transformer;

pub use config::TransformerConfig;
pub use inference::{beam_decode, decode_batch, decode_batch_by, greedy_decode, Engine};
pub use transformer::{positional_encoding, Seq2SeqBatch, Seq2SeqExample, TransformerModel};
