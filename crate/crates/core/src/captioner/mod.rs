//! Caption generation: a small transformer decoder that cross-attends to the
//! aligned audio features, its training loss, and beam-search decoding.

mod beam;
mod decoder;
mod vocab;

pub use beam::{beam_search, greedy, Hypothesis, NextTokenScorer};
pub use decoder::{ce_loss, CaptionDecoder, CaptionDecoderConfig, DecoderBlock, DecoderScorer};
pub use vocab::{CaptionBatch, Vocab};
