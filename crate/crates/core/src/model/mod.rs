//! The decoder-only language model and its checkpoint format.

mod block;
mod checkpoint;
mod config;
mod lm;

pub use block::{block_forward, multi_head_attention, position_wise_ffn, BlockWeights, DropoutState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use lm::LightTransformerLm;

/// Whether a forward pass trains (dropout active, keyed by seed and step)
/// or evaluates (dropout off).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64, step: u64 },
}
