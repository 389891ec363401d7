//! One decoder block: masked multi-head attention and a position-wise
//! feed-forward network, each wrapped as `layer_norm(x + dropout(f(x)))`.

use crate::autograd::{dropout, layer_norm, masked_softmax, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::patterns::AttentionMask;
use crate::rng::DropoutKey;

use super::Mode;

/// Trainable weights of one block. Projections are stored `[in, out]` so
/// that a row-vector input multiplies from the left.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl BlockWeights {
    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    /// Named parameters under `prefix`, in a fixed order.
    pub fn parameters(&self, prefix: &str) -> Vec<Parameter> {
        [
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ffn.w1", &self.ffn_w1),
            ("ffn.b1", &self.ffn_b1),
            ("ffn.w2", &self.ffn_w2),
            ("ffn.b2", &self.ffn_b2),
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
        ]
        .into_iter()
        .map(|(name, t)| Parameter::new(format!("{prefix}.{name}"), t.clone()))
        .collect()
    }
}

/// Dropout settings for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DropoutState {
    pub rate: f64,
    pub mode: Mode,
}

impl DropoutState {
    pub fn eval() -> Self {
        DropoutState { rate: 0.0, mode: Mode::Eval }
    }

    fn apply(&self, x: &Tensor, site: u64) -> Result<Tensor> {
        match self.mode {
            Mode::Eval => Ok(x.clone()),
            Mode::Train { seed, step } => dropout(x, self.rate, true, DropoutKey::new(seed, site, step)),
        }
    }
}

const SITES_PER_LAYER: u64 = 3;

fn site(layer: usize, offset: u64) -> u64 {
    layer as u64 * SITES_PER_LAYER + offset
}

/// Masked multi-head self-attention over `x: [batch, n, d]`.
///
/// A mask longer than `n` is cut to its top-left `n × n` corner; a shorter
/// one is an error.
pub fn multi_head_attention(
    x: &Tensor,
    mask: &AttentionMask,
    w: &BlockWeights,
    heads: usize,
    drop: &DropoutState,
    layer: usize,
) -> Result<Tensor> {
    let &[batch, n, d] = x.shape() else {
        return Err(Error::shape("attention", x.shape(), w.wq.shape()));
    };
    if d != w.d_model() {
        return Err(Error::shape("attention", x.shape(), w.wq.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("dmodel {d} is not divisible by {heads} heads")));
    }
    if n > mask.n() {
        return Err(Error::shape("attention mask", x.shape(), &[mask.n(), mask.n()]));
    }
    let truncated;
    let mask = if n < mask.n() {
        truncated = mask.truncated(n);
        &truncated
    } else {
        mask
    };
    let head_dim = d / heads;

    let split = |t: Tensor| t.reshape(&[batch, n, heads, head_dim]);
    let q = split(x.matmul(&w.wq)?.add(&w.bq)?)?.permute(&[0, 2, 1, 3])?;
    let k_t = split(x.matmul(&w.wk)?.add(&w.bk)?)?.permute(&[0, 2, 3, 1])?;
    let v = split(x.matmul(&w.wv)?.add(&w.bv)?)?.permute(&[0, 2, 1, 3])?;

    let scores = q.matmul(&k_t)?.scale(1.0 / (head_dim as f64).sqrt())?;
    let probs = drop.apply(&masked_softmax(&scores, mask)?, site(layer, 0))?;
    let context = probs.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[batch, n, d])?;
    context.matmul(&w.wo)?.add(&w.bo)
}

/// `relu(x · w1 + b1) · w2 + b2`, independently at every position.
pub fn position_wise_ffn(x: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    x.matmul(&w.ffn_w1)?.add(&w.ffn_b1)?.relu()?.matmul(&w.ffn_w2)?.add(&w.ffn_b2)
}

/// Post-norm block: `y1 = LN(x + drop(attn(x)))`, `y2 = LN(y1 + drop(ffn(y1)))`.
pub fn block_forward(
    x: &Tensor,
    mask: &AttentionMask,
    w: &BlockWeights,
    heads: usize,
    eps: f64,
    drop: &DropoutState,
    layer: usize,
) -> Result<Tensor> {
    let attn = multi_head_attention(x, mask, w, heads, drop, layer)?;
    let y1 = layer_norm(&x.add(&drop.apply(&attn, site(layer, 1))?)?, &w.ln1_gain, &w.ln1_bias, eps)?;
    let ffn = position_wise_ffn(&y1, w)?;
    layer_norm(&y1.add(&drop.apply(&ffn, site(layer, 2))?)?, &w.ln2_gain, &w.ln2_bias, eps)
}
