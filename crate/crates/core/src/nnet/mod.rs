//! Micro causal transformer with summed token/position/speaker/turn input
//! embeddings, a tied LM head and a two-way NSP head.
//!
//! The model is generic over the scalar type so the same code runs in f32
//! for training and in f64 for gradient checking.

mod checkpoint;
mod graph;
pub(crate) mod ops;
mod params;

pub use checkpoint::{restore, snapshot, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use graph::{forward, forward_traced, ForwardOutput, ForwardTrace, LossGraph, RunMode};
pub use ops::{log_softmax, softmax};
pub use params::{tensor_shapes, LayerParams, Params};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Turn;
use crate::tokenizer::{encode_dialogue, EncodeLimits, TokenizerError, Vocab};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("{stream} id {id} out of range (limit {limit})")]
    IdOutOfRange { stream: &'static str, id: usize, limit: usize },
    #[error("backward called before any forward pass was recorded")]
    BackwardWithoutForward,
    #[error("unknown tape {0}")]
    UnknownTape(usize),
    #[error("upstream gradient has {got} elements, expected {expected}")]
    GradientShape { got: usize, expected: usize },
    #[error("checkpoint vocabulary fingerprint {found} does not match {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("checkpoint config does not match the expected model config")]
    ConfigMismatch,
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub max_turns: usize,
    pub dropout_rate: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size,
            max_seq: 96,
            max_turns: 8,
            dropout_rate: 0.1,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        let bad = |m: String| Err(NnetError::InvalidConfig(m));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < 6 {
            return bad(format!("vocab_size must be at least 6, got {}", self.vocab_size));
        }
        if self.max_turns < 2 {
            return bad(format!("max_turns must be at least 2, got {}", self.max_turns));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn limits(&self) -> EncodeLimits {
        EncodeLimits {
            max_seq: self.max_seq,
            max_turns: self.max_turns,
        }
    }

    pub fn num_parameters(&self) -> usize {
        tensor_shapes(self).iter().map(|(_, [r, c])| r * c).sum()
    }
}

/// Configuration plus all trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F = f32> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

impl<F: Real> ModelState<F> {
    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// Deterministic initialization from `config.init_seed`.
pub fn init_model<F: Real>(config: &ModelConfig) -> Result<ModelState<F>, NnetError> {
    config.validate()?;
    Ok(ModelState {
        config: config.clone(),
        params: params::init_params(config),
    })
}

/// Raw NSP head scores for `candidate` following `context`.
///
/// The sequence is encoded context-first and the head reads the last-layer
/// hidden state at the final (EOS) position.
pub fn nsp_logits<F: Real>(
    state: &ModelState<F>,
    context: &[Turn],
    candidate: &Turn,
    vocab: &Vocab,
    limits: EncodeLimits,
) -> Result<[F; 2], NnetError> {
    let seq = encode_dialogue(context, vocab, Some(candidate), limits)?;
    Ok(forward(state, &seq, RunMode::Eval)?.nsp_logits)
}

#[cfg(test)]
mod tests;
