//! Attention-based encoder-decoder speech recognition on a desk scale, with
//! two interchangeable ways of embedding output units: a learned lookup table,
//! or embeddings composed from character sequences by a character-aware
//! recurrent network.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a recorded-operation graph with reverse-mode
//!   differentiation, and a finite-difference gradient checker.
//! - [`vocab`]: word-piece and mixed-unit inventories learned from text, plus
//!   tokenization to and from unit id sequences.
//! - [`data`]: acoustic feature handling (frame stacking), a synthetic
//!   morphology-rich corpus generator, and binary dataset files.
//! - [`model`]: the encoder/attention/decoder network, the two embedding
//!   providers, parameter initialization and counting, and checkpoint files.
//! - [`training`]: label-smoothed cross-entropy, scheduled sampling, and the
//!   Adam training loop.
//! - [`decoding`]: greedy decoding, word error rate, and hypothesis files.
//! - [`config`]: experiment configuration files.
//! - [`experiment`]: the paired comparison harness (lookup-table vs
//!   character-composed embeddings across seeds).

pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
