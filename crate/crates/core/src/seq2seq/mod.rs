//! Encoder-decoder sequence model, its vocabulary and checkpoints.

mod checkpoint;
mod model;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ParamEntry};
pub use model::{argmax, Bound, ModelConfig, Seq2SeqModel};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, NUM_RESERVED, PAD, UNK};

#[cfg(test)]
mod tests;
