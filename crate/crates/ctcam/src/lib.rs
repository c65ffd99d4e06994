//! Desk-scale LSTM acoustic modeling toolkit.
//!
//! The crate covers the full small-corpus pipeline: log-mel feature
//! extraction with frame stacking and decimation ([`frontend`]), deep
//! unidirectional and bidirectional LSTM networks trained by BPTT
//! ([`nnet`]), alignment graphs with forward-backward and Viterbi
//! ([`graphs`]), context-dependent whole-phone clustering ([`cdphone`]),
//! CTC, frame-wise cross-entropy and sequence-discriminative sMBR
//! criteria ([`criteria`]), beam-search and greedy decoding with WER
//! scoring ([`decoder`]), and the training/evaluation orchestration plus
//! a synthetic toy task ([`harness`]).
//!
//! All in-memory numerics are `f64`; on-disk tensors are little-endian
//! `f32`.

pub mod cdphone;
pub mod criteria;
pub mod decoder;
pub mod error;
pub mod frontend;
pub mod graphs;
pub mod harness;
pub mod nnet;

pub use error::{Error, Result};
