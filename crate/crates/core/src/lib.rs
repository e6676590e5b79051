//! Transformer-based multi-aspect modeling for aspect sentiment classification.
//!
//! All aspects of a sentence are encoded into one anchored sequence, a small
//! transformer encoder runs once over it, and every aspect is classified from
//! the hidden state at its `[AS]` anchor token.

pub mod numerics;
pub mod tokenizer;
pub mod encoder;
pub mod aspect_head;
pub mod optimizer;
pub mod metrics;
pub mod data;
pub mod train;
pub mod checkpoint;
pub mod diagnostics;
pub mod attention;
pub mod compare;
