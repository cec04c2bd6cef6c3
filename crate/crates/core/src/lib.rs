//! Cause-effect triplet extraction.
//!
//! Sentences are labeled with a seven-tag causality scheme by a
//! self-attentive BiLSTM-CRF tagger; the tag sequences are then decoded into
//! (cause, effect) span pairs.

pub mod cli;
pub mod corpus;
pub mod crf;
pub mod decoder;
pub mod embeddings;
pub mod eval;
pub mod fixtures;
pub mod net;
pub mod scheme;
pub mod synthetic;
pub mod train;

pub use decoder::{decode, tag2triplet, DecodeError, DecoderConfig, Decoding};
pub use scheme::{
    encode_triplets, extract_spans, validate_tags, CausalSpan, CausalTriplet, Role, Sentence, Span, Tag, TagSequence,
};
