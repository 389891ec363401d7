//! Decoder-only Transformer language models with sparse causal attention.
//!
//! The crate is organized bottom-up:
//!
//! * [`autograd`]: `f64` tensors with reverse-mode differentiation and SGD.
//! * [`patterns`]: per-layer connectivity masks (full, dilated, dilated with
//!   memory, cascade), receptive fields and cost accounting.
//! * [`model`]: attention, feed-forward and layer-norm blocks assembled into
//!   a language model with a tied output projection, plus checkpoints.
//! * [`pipeline`]: vocabulary, segment batching, training and perplexity.

pub mod autograd;
pub mod error;
pub mod model;
pub mod patterns;
pub mod pipeline;
pub mod rng;

pub use autograd::{Parameter, Tensor};
pub use error::{Error, Result};
pub use model::{LightTransformerLm, Mode, ModelConfig};
pub use patterns::{build_mask, AttentionMask, PatternKind, PatternSpec};
