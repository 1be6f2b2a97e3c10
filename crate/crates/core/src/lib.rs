//! Sequence-level training laboratory for non-autoregressive sequence models.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with a recorded graph and reverse-mode
//!   differentiation, plus finite-difference gradient checking.
//! - [`rewards`]: sentence-level GLEU and smoothed BLEU on token ids.
//! - [`estimators`]: gradient estimators for the expected-reward loss of a
//!   factorized (per-position) output distribution: exact enumeration,
//!   per-position Monte Carlo reward estimation, REINFORCE and the top-k
//!   traversal estimator.
//! - [`models`]: a small Transformer encoder with autoregressive,
//!   non-autoregressive and fused (parallel bottom, autoregressive top)
//!   decoders, length lookup and a binary checkpoint format.
//! - [`pipeline`]: corpora, synthetic tasks, training loops, decoding,
//!   distillation and evaluation.
//! - [`cli`]: the `nsqt` command-line front end and report writers.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod models;
pub mod pipeline;
pub mod rewards;
pub mod tensor;

pub use error::{Error, Result};

/// Token id. Ids `0..4` are reserved, see [`special`].
pub type Token = u32;

/// Reserved token ids shared by every vocabulary.
pub mod special {
    use crate::Token;

    pub const PAD: Token = 0;
    pub const BOS: Token = 1;
    pub const EOS: Token = 2;
    pub const UNK: Token = 3;
    /// First id available to ordinary tokens.
    pub const FIRST_REGULAR: Token = 4;

    pub fn is_special(t: Token) -> bool {
        t < FIRST_REGULAR
    }
}
