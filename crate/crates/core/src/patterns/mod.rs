//! Causal connectivity patterns for the attention layers.
//!
//! Every pattern yields, per layer, an `n × n` lower-triangular boolean mask
//! whose diagonal is always set. Four kinds are supported:
//!
//! * `Full`: every earlier position, the standard causal decoder.
//! * `Dilated`: `k` taps spaced `base^layer` apart, reaching strictly backward.
//! * `DilatedMemory`: the dilated taps of this layer and of the layer below.
//! * `Cascade`: a contiguous window of the `b · m^layer` most recent positions.

mod complexity;
mod io;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

pub use complexity::{
    complexity_estimate, complexity_report, parameter_count, ComplexityReport, LayerComplexity,
    ParameterCount,
};
pub use io::{write_csv, write_pgm, MaskFormat};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    Full,
    Dilated,
    DilatedMemory,
    Cascade,
}

impl PatternKind {
    pub const ALL: [PatternKind; 4] =
        [PatternKind::Full, PatternKind::Dilated, PatternKind::DilatedMemory, PatternKind::Cascade];

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::Full => "full",
            PatternKind::Dilated => "dilated",
            PatternKind::DilatedMemory => "dilated-memory",
            PatternKind::Cascade => "cascade",
        }
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full" => Ok(PatternKind::Full),
            "dilated" => Ok(PatternKind::Dilated),
            "dilated-memory" | "dilatedmemory" | "memory" => Ok(PatternKind::DilatedMemory),
            "cascade" => Ok(PatternKind::Cascade),
            other => Err(Error::Config(format!(
                "unknown pattern '{other}' (expected full, dilated, dilated-memory or cascade)"
            ))),
        }
    }
}

/// Connectivity pattern and its hyperparameters.
///
/// Fields that a kind does not use are still validated so that a config
/// cannot carry a nonsensical value silently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatternSpec {
    pub kind: PatternKind,
    /// Number of taps `k` of a dilated query, self included.
    pub filter_size: usize,
    /// Dilation at layer `l` is `dilation_base^l`.
    pub dilation_base: usize,
    /// Cascade window at layer 0.
    pub base_window: usize,
    /// Cascade window growth factor per layer.
    pub cardinal: usize,
}

impl Default for PatternSpec {
    fn default() -> Self {
        PatternSpec::full()
    }
}

impl PatternSpec {
    pub fn full() -> Self {
        PatternSpec { kind: PatternKind::Full, filter_size: 3, dilation_base: 2, base_window: 4, cardinal: 2 }
    }

    pub fn dilated(filter_size: usize, dilation_base: usize) -> Self {
        PatternSpec { kind: PatternKind::Dilated, filter_size, dilation_base, ..PatternSpec::full() }
    }

    pub fn dilated_memory(filter_size: usize, dilation_base: usize) -> Self {
        PatternSpec { kind: PatternKind::DilatedMemory, ..PatternSpec::dilated(filter_size, dilation_base) }
    }

    pub fn cascade(base_window: usize, cardinal: usize) -> Self {
        PatternSpec { kind: PatternKind::Cascade, base_window, cardinal, ..PatternSpec::full() }
    }

    /// Same hyperparameters, different kind.
    pub fn with_kind(self, kind: PatternKind) -> Self {
        PatternSpec { kind, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("filter size k", self.filter_size),
            ("dilation base", self.dilation_base),
            ("base window b", self.base_window),
            ("cardinal m", self.cardinal),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Stride between dilated taps at `layer`; saturates instead of overflowing.
    pub fn dilation(&self, layer: usize) -> usize {
        saturating_pow(self.dilation_base, layer)
    }

    /// Cascade window width at `layer`; saturates instead of overflowing.
    pub fn window(&self, layer: usize) -> usize {
        self.base_window.saturating_mul(saturating_pow(self.cardinal, layer))
    }
}

fn saturating_pow(base: usize, exp: usize) -> usize {
    u32::try_from(exp).ok().and_then(|e| base.checked_pow(e)).unwrap_or(usize::MAX)
}

/// Boolean `n × n` connectivity matrix stored as one bitset per query row.
///
/// `get(i, j)` is true when query position `i` may attend to key position `j`.
/// Equality compares connectivity only, not the layer tag.
#[derive(Clone)]
pub struct AttentionMask {
    n: usize,
    layer: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask(n={}, layer={})", self.n, self.layer)?;
        for i in 0..self.n {
            let row: String = (0..self.n).map(|j| if self.get(i, j) { '1' } else { '.' }).collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

impl PartialEq for AttentionMask {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.bits == other.bits
    }
}

impl Eq for AttentionMask {}

impl AttentionMask {
    /// Builds a mask from an arbitrary predicate without checking the
    /// causal invariants; see [`AttentionMask::validate`].
    pub fn from_fn(n: usize, layer: usize, mut connected: impl FnMut(usize, usize) -> bool) -> Self {
        let words_per_row = n.div_ceil(64);
        let mut mask = AttentionMask { n, layer, words_per_row, bits: vec![0; n * words_per_row] };
        for i in 0..n {
            for j in 0..n {
                if connected(i, j) {
                    mask.set(i, j);
                }
            }
        }
        mask
    }

    fn empty(n: usize, layer: usize) -> Self {
        let words_per_row = n.div_ceil(64);
        AttentionMask { n, layer, words_per_row, bits: vec![0; n * words_per_row] }
    }

    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words_per_row + j / 64] |= 1 << (j % 64);
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.n && j < self.n);
        self.bits[i * self.words_per_row + j / 64] >> (j % 64) & 1 == 1
    }

    fn row_words(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    /// Number of connections in row `i`.
    pub fn row_len(&self, i: usize) -> usize {
        self.row_words(i).iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Total number of connections.
    pub fn nnz(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Ascending key positions visible from query `i`.
    pub fn row_support(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.n {
            return Err(Error::Index { what: "query position", index: i, limit: self.n, position: i });
        }
        Ok(self.iter_row(i).collect())
    }

    pub(crate) fn iter_row(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row_words(i).iter().enumerate().flat_map(|(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + tz)
            })
        })
    }

    /// Top-left `len × len` corner, which is the mask the same pattern
    /// produces for a shorter sequence.
    pub fn truncated(&self, len: usize) -> AttentionMask {
        let len = len.min(self.n);
        AttentionMask::from_fn(len, self.layer, |i, j| self.get(i, j))
    }

    pub fn union(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.n != other.n {
            return Err(Error::shape("mask union", &[self.n, self.n], &[other.n, other.n]));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect();
        Ok(AttentionMask { bits, ..self.clone() })
    }

    /// True when every connection of `other` is also present in `self`.
    pub fn is_superset_of(&self, other: &AttentionMask) -> bool {
        self.n == other.n && self.bits.iter().zip(&other.bits).all(|(a, b)| b & !a == 0)
    }

    /// Checks causality (no `j > i`) and self-attachment (`i` sees `i`).
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if !self.get(i, i) {
                return Err(Error::InvalidMask { row: i });
            }
            if self.iter_row(i).any(|j| j > i) {
                return Err(Error::contract(
                    "attention mask",
                    format!("row {i} attends to a future position"),
                ));
            }
        }
        Ok(())
    }
}

/// Connectivity mask of `spec` at 0-based `layer` for sequences of length `n`.
pub fn build_mask(spec: &PatternSpec, layer: usize, n: usize) -> Result<AttentionMask> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let mut mask = AttentionMask::empty(n, layer);
    match spec.kind {
        PatternKind::Full => {
            for i in 0..n {
                for j in 0..=i {
                    mask.set(i, j);
                }
            }
        }
        PatternKind::Dilated => add_dilated(&mut mask, spec.filter_size, spec.dilation(layer)),
        PatternKind::DilatedMemory => {
            add_dilated(&mut mask, spec.filter_size, spec.dilation(layer));
            if layer > 0 {
                add_dilated(&mut mask, spec.filter_size, spec.dilation(layer - 1));
            }
        }
        PatternKind::Cascade => {
            let window = spec.window(layer);
            for i in 0..n {
                let start = (i + 1).saturating_sub(window);
                for j in start..=i {
                    mask.set(i, j);
                }
            }
        }
    }
    Ok(mask)
}

fn add_dilated(mask: &mut AttentionMask, taps: usize, stride: usize) {
    for i in 0..mask.n {
        for t in 0..taps {
            match t.checked_mul(stride).and_then(|back| i.checked_sub(back)) {
                Some(j) => mask.set(i, j),
                None => break,
            }
        }
    }
}

/// Sorted key positions visible from query `i`.
pub fn row_support(mask: &AttentionMask, i: usize) -> Result<Vec<usize>> {
    mask.row_support(i)
}

/// Which input positions can influence each output position after a stack
/// of layers, i.e. the boolean product `M_{L-1} · … · M_1 · M_0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reachability {
    inner: AttentionMask,
}

impl Reachability {
    pub fn compute(spec: &PatternSpec, layers: usize, n: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("receptive field needs at least one layer".into()));
        }
        let mut reach = build_mask(spec, 0, n)?;
        for layer in 1..layers {
            let mask = build_mask(spec, layer, n)?;
            let mut next = AttentionMask::empty(n, layer);
            for i in 0..n {
                let out = i * next.words_per_row..(i + 1) * next.words_per_row;
                for j in mask.iter_row(i) {
                    for (dst, src) in next.bits[out.clone()].iter_mut().zip(reach.row_words(j)) {
                        *dst |= src;
                    }
                }
            }
            reach = next;
        }
        Ok(Reachability { inner: reach })
    }

    pub fn n(&self) -> usize {
        self.inner.n
    }

    /// Whether input position `j` can influence output position `i`.
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.inner.get(i, j)
    }

    pub fn coverage(&self) -> Vec<usize> {
        (0..self.inner.n).map(|i| self.inner.row_len(i)).collect()
    }
}

/// Per-position count of source positions reachable through `layers` layers.
pub fn receptive_field(spec: &PatternSpec, layers: usize, n: usize) -> Result<Vec<usize>> {
    Ok(Reachability::compute(spec, layers, n)?.coverage())
}

/// Shared cache of built masks keyed by `(spec, layer, n)`.
///
/// Lookups take a read lock; a miss builds the mask outside any lock and
/// inserts it under the write lock, keeping whichever copy landed first.
#[derive(Debug, Default)]
pub struct MaskCache {
    masks: RwLock<HashMap<(PatternSpec, usize, usize), Arc<AttentionMask>>>,
}

impl MaskCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, spec: &PatternSpec, layer: usize, n: usize) -> Result<Arc<AttentionMask>> {
        let key = (*spec, layer, n);
        if let Some(mask) = self.masks.read().expect("mask cache poisoned").get(&key) {
            return Ok(Arc::clone(mask));
        }
        let built = Arc::new(build_mask(spec, layer, n)?);
        let mut guard = self.masks.write().expect("mask cache poisoned");
        Ok(Arc::clone(guard.entry(key).or_insert(built)))
    }

    pub fn len(&self) -> usize {
        self.masks.read().expect("mask cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
