use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{LightTransformerLm, Mode};

/// Summed negative log-likelihood of `targets` under `softmax(logits)`
/// along the last axis.
pub fn sequence_nll(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let v = *logits.shape().last().unwrap_or(&0);
    if v == 0 || logits.numel() / v != targets.len() {
        return Err(Error::shape("sequence_nll", logits.shape(), &[targets.len()]));
    }
    let data = logits.data();
    let mut total = 0.0;
    for (position, (row, &t)) in data.chunks(v).zip(targets).enumerate() {
        if t >= v {
            return Err(Error::Index { what: "target id", index: t, limit: v, position });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total)
}

/// Consecutive `(start, len)` segments covering targets `1..T` exactly once.
fn segments(total: usize, seg_len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..total.saturating_sub(1))
        .step_by(seg_len.max(1))
        .map(move |start| (start, seg_len.min(total - 1 - start)))
}

/// Perplexity over `ids`, scored as one stream cut into consecutive segments
/// of at most `seg_len` inputs. Every token after the first is predicted
/// exactly once, from the context inside its own segment.
pub fn evaluate_perplexity(model: &LightTransformerLm, ids: &[usize], seg_len: usize) -> Result<f64> {
    evaluate_perplexity_batched(model, ids, seg_len, 1)
}

/// Same quantity as [`evaluate_perplexity`], running up to `batch`
/// equal-length segments per forward pass.
pub fn evaluate_perplexity_batched(
    model: &LightTransformerLm,
    ids: &[usize],
    seg_len: usize,
    batch: usize,
) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    if seg_len == 0 || batch == 0 {
        return Err(Error::Config("segment length and batch must be at least 1".into()));
    }
    let segs: Vec<(usize, usize)> = segments(ids.len(), seg_len).collect();
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut i = 0;
    while i < segs.len() {
        let len = segs[i].1;
        let mut group = vec![segs[i]];
        while group.len() < batch && i + group.len() < segs.len() && segs[i + group.len()].1 == len {
            group.push(segs[i + group.len()]);
        }
        i += group.len();
        let inputs: Vec<usize> = group.iter().flat_map(|&(s, l)| ids[s..s + l].iter().copied()).collect();
        let targets: Vec<usize> =
            group.iter().flat_map(|&(s, l)| ids[s + 1..s + 1 + l].iter().copied()).collect();
        let logits = model.forward(&inputs, group.len(), Mode::Eval)?;
        total += sequence_nll(&logits, &targets)?;
        scored += targets.len();
    }
    Ok((total / scored as f64).exp())
}

/// Perplexity of `eval` under add-one smoothed unigram frequencies of `train`.
pub fn unigram_perplexity(train: &[usize], eval: &[usize], vocab_size: usize) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts = vec![1.0f64; vocab_size];
    for &id in train {
        let slot = counts.get_mut(id).ok_or(Error::Index {
            what: "token id",
            index: id,
            limit: vocab_size,
            position: 0,
        })?;
        *slot += 1.0;
    }
    let norm = (train.len() + vocab_size) as f64;
    let mut nll = 0.0;
    for (position, &id) in eval.iter().enumerate() {
        let c = counts.get(id).ok_or(Error::Index {
            what: "token id",
            index: id,
            limit: vocab_size,
            position,
        })?;
        nll -= (c / norm).ln();
    }
    Ok((nll / eval.len() as f64).exp())
}
