use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::block::{block_forward, BlockWeights, DropoutState};
use super::{Mode, ModelConfig};
use crate::autograd::{cross_entropy, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::patterns::MaskCache;
use crate::rng::init_rng;

/// Decoder-only language model:
///
/// ```text
/// h_0    = E[tokens] + P[0..n)
/// h_l    = block_l(h_{l-1}) with the layer-l connectivity mask
/// logits = h_L · Eᵀ
/// ```
///
/// The token embedding `E` doubles as the output projection; there is no
/// separate output matrix or output bias.
pub struct LightTransformerLm {
    config: ModelConfig,
    token_embedding: Tensor,
    positional: Tensor,
    blocks: Vec<BlockWeights>,
    masks: Arc<MaskCache>,
}

impl std::fmt::Debug for LightTransformerLm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LightTransformerLm").field("config", &self.config).finish_non_exhaustive()
    }
}

struct Init<R> {
    rng: R,
    normal: Normal<f64>,
    bound: f64,
}

impl<R: Rng> Init<R> {
    /// Normal(0, std) samples redrawn until they fall within ±2 std.
    fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| loop {
                let v = self.normal.sample(&mut self.rng);
                if v.abs() <= self.bound {
                    break v;
                }
            })
            .collect();
        Tensor::leaf(&[rows, cols], data).expect("shape matches data")
    }
}

fn constant(len: usize, value: f64) -> Tensor {
    Tensor::leaf(&[len], vec![value; len]).expect("shape matches data")
}

impl LightTransformerLm {
    /// Freshly initialized model. Weight matrices are drawn in parameter
    /// order from a stream keyed by `config.seed`; biases start at zero and
    /// layer-norm gains at one.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: init_rng(config.seed),
            normal: Normal::new(0.0, config.init_std).map_err(|e| Error::Config(format!("init-std: {e}")))?,
            bound: 2.0 * config.init_std,
        };
        let (d, ff) = (config.d_model, config.d_ff);
        let token_embedding = init.matrix(config.vocab_size, d);
        let positional = init.matrix(config.max_len, d);
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                wq: init.matrix(d, d),
                bq: constant(d, 0.0),
                wk: init.matrix(d, d),
                bk: constant(d, 0.0),
                wv: init.matrix(d, d),
                bv: constant(d, 0.0),
                wo: init.matrix(d, d),
                bo: constant(d, 0.0),
                ffn_w1: init.matrix(d, ff),
                ffn_b1: constant(ff, 0.0),
                ffn_w2: init.matrix(ff, d),
                ffn_b2: constant(d, 0.0),
                ln1_gain: constant(d, 1.0),
                ln1_bias: constant(d, 0.0),
                ln2_gain: constant(d, 1.0),
                ln2_bias: constant(d, 0.0),
            })
            .collect();
        Ok(LightTransformerLm {
            config,
            token_embedding,
            positional,
            blocks,
            masks: Arc::new(MaskCache::new()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.token_embedding
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    /// All trainable tensors with stable dotted names, in a fixed order.
    pub fn parameters(&self) -> Vec<Parameter> {
        let mut params = vec![
            Parameter::new("embed.tokens", self.token_embedding.clone()),
            Parameter::new("embed.positions", self.positional.clone()),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            params.extend(block.parameters(&format!("block.{l}")));
        }
        params
    }

    /// Copies of every parameter value, in [`parameters`](Self::parameters) order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.parameters().iter().map(|p| p.value.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) -> Result<()> {
        let params = self.parameters();
        if params.len() != snapshot.len() {
            return Err(Error::contract("restore", "snapshot has a different parameter count"));
        }
        for (p, values) in params.iter().zip(snapshot) {
            let mut data = p.value.data_mut()?;
            if data.len() != values.len() {
                return Err(Error::shape("restore", &[data.len()], &[values.len()]));
            }
            data.copy_from_slice(values);
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::shape("model input", &[tokens.len()], &[batch]));
        }
        let n = tokens.len() / batch;
        if n > self.config.max_len {
            return Err(Error::SequenceTooLong { len: n, max: self.config.max_len });
        }
        Ok(n)
    }

    /// `h_0 = E[tokens] + P[0..n)` for `tokens` laid out as `batch` rows.
    pub fn embed(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let n = self.check_tokens(tokens, batch)?;
        let words = self.token_embedding.gather_rows(tokens, &[batch, n])?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = self.positional.gather_rows(&positions, &[n])?;
        words.add(&pos)
    }

    /// Runs the block stack and tied projection on `h_0: [batch, n, d]`.
    pub fn forward_hidden(&self, h0: &Tensor, mode: Mode) -> Result<Tensor> {
        let &[_, n, d] = h0.shape() else {
            return Err(Error::shape("forward", h0.shape(), &[self.config.d_model]));
        };
        if d != self.config.d_model {
            return Err(Error::shape("forward", h0.shape(), &[self.config.d_model]));
        }
        if n > self.config.max_len {
            return Err(Error::SequenceTooLong { len: n, max: self.config.max_len });
        }
        let drop = DropoutState { rate: self.config.dropout, mode };
        let mut h = h0.clone();
        for (layer, block) in self.blocks.iter().enumerate() {
            let mask = self.masks.get(&self.config.pattern, layer, n)?;
            h = block_forward(&h, &mask, block, self.config.heads, self.config.ln_eps, &drop, layer)?;
        }
        h.matmul(&self.token_embedding.transpose()?)
    }

    /// Logits `[batch, n, V]` for `tokens` laid out as `batch` rows of `n`.
    pub fn forward(&self, tokens: &[usize], batch: usize, mode: Mode) -> Result<Tensor> {
        let h0 = self.embed(tokens, batch)?;
        self.forward_hidden(&h0, mode)
    }

    /// Mean next-token cross-entropy of `targets` given `inputs`.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize, mode: Mode) -> Result<Tensor> {
        if inputs.len() != targets.len() {
            return Err(Error::shape("loss", &[inputs.len()], &[targets.len()]));
        }
        cross_entropy(&self.forward(inputs, batch, mode)?, targets)
    }
}
