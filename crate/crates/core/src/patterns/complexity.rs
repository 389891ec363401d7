//! Exact connection counts next to the asymptotic per-block cost formulas.

use std::fmt::Write as _;

use super::{build_mask, PatternKind, PatternSpec};
use crate::error::Result;
use crate::model::ModelConfig;

/// Cost accounting for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerComplexity {
    pub layer: usize,
    pub kind: PatternKind,
    /// Exact number of (query, key) pairs the mask admits.
    pub connection_count: usize,
    /// The asymptotic cost formula with its constant dropped, instantiated
    /// at the given `n` and `h`.
    pub symbolic_bound: u128,
    /// `2 · nnz · h`: score computation plus value mixing, projections excluded.
    pub attention_flops: u128,
}

/// Asymptotic bound and exact mask statistics for one layer.
///
/// | kind           | bound         |
/// |----------------|---------------|
/// | full           | `n² h`        |
/// | dilated        | `n k h`       |
/// | dilated-memory | `n k c h`     |
/// | cascade        | `n b m^l h`   |
///
/// `c` is 1 at layer 0, where no lower layer exists, and 2 above it.
pub fn complexity_estimate(spec: &PatternSpec, n: usize, h: usize, layer: usize) -> Result<LayerComplexity> {
    let mask = build_mask(spec, layer, n)?;
    let nnz = mask.nnz();
    let (n128, h128) = (n as u128, h as u128);
    let per_query: u128 = match spec.kind {
        PatternKind::Full => n128,
        PatternKind::Dilated => spec.filter_size as u128,
        PatternKind::DilatedMemory => {
            let extra = if layer == 0 { 1 } else { 2 };
            spec.filter_size as u128 * extra
        }
        PatternKind::Cascade => spec.window(layer) as u128,
    };
    Ok(LayerComplexity {
        layer,
        kind: spec.kind,
        connection_count: nnz,
        symbolic_bound: n128.saturating_mul(per_query).saturating_mul(h128),
        attention_flops: 2 * nnz as u128 * h128,
    })
}

/// Per-layer accounting for a whole stack, with optional parameter counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityReport {
    pub spec: PatternSpec,
    pub n: usize,
    pub h: usize,
    pub layers: Vec<LayerComplexity>,
    pub params: Option<ParameterCount>,
}

pub fn complexity_report(
    spec: &PatternSpec,
    n: usize,
    h: usize,
    layers: usize,
    params: Option<ParameterCount>,
) -> Result<ComplexityReport> {
    let rows = (0..layers).map(|l| complexity_estimate(spec, n, h, l)).collect::<Result<Vec<_>>>()?;
    Ok(ComplexityReport { spec: *spec, n, h, layers: rows, params })
}

impl ComplexityReport {
    pub fn total_connections(&self) -> usize {
        self.layers.iter().map(|l| l.connection_count).sum()
    }

    pub fn total_bound(&self) -> u128 {
        self.layers.iter().map(|l| l.symbolic_bound).sum()
    }

    pub fn total_flops(&self) -> u128 {
        self.layers.iter().map(|l| l.attention_flops).sum()
    }

    /// Tab-separated table with header `layer kind nnz bound flops params`
    /// and a trailing `total` row. `params` is the per-block count, or `-`
    /// when no model dimensions were supplied.
    pub fn to_tsv(&self) -> String {
        let block = self.params.as_ref().map(|p| p.per_block.total());
        let fmt_params = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        let mut out = String::from("layer\tkind\tnnz\tbound\tflops\tparams\n");
        for row in &self.layers {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                row.layer,
                row.kind,
                row.connection_count,
                row.symbolic_bound,
                row.attention_flops,
                fmt_params(block)
            );
        }
        let _ = writeln!(
            out,
            "total\t{}\t{}\t{}\t{}\t{}",
            self.spec.kind,
            self.total_connections(),
            self.total_bound(),
            self.total_flops(),
            fmt_params(self.params.as_ref().map(|p| p.total))
        );
        out
    }
}

/// Parameter counts of one block, split by weight group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParameterCount {
    /// Four `d × d` projections with biases.
    pub attention: usize,
    /// Two dense layers of the position-wise network with biases.
    pub ffn: usize,
    /// Gain and bias of both layer norms.
    pub layer_norm: usize,
}

impl BlockParameterCount {
    pub fn total(&self) -> usize {
        self.attention + self.ffn + self.layer_norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCount {
    /// Token embedding, shared with the output projection.
    pub embedding: usize,
    pub positional: usize,
    pub per_block: BlockParameterCount,
    pub blocks: usize,
    pub total: usize,
}

/// Closed-form parameter count of a model. The connectivity pattern does not
/// enter: masks remove attention pairs, not weights.
pub fn parameter_count(config: &ModelConfig) -> ParameterCount {
    let d = config.d_model;
    let ff = config.d_ff;
    let per_block = BlockParameterCount {
        attention: 4 * d * d + 4 * d,
        ffn: d * ff + ff + ff * d + d,
        layer_norm: 4 * d,
    };
    let embedding = config.vocab_size * d;
    let positional = config.max_len * d;
    ParameterCount {
        embedding,
        positional,
        per_block,
        blocks: config.layers,
        total: embedding + positional + config.layers * per_block.total(),
    }
}
