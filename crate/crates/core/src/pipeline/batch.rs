use crate::error::{Error, Result};

/// One training step worth of data: `batch` rows of `len` input ids and the
/// ids one position later as targets, both row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

/// Splits a token sequence into `batch_size` contiguous lanes of
/// `⌊T / batch_size⌋` tokens and walks them in lockstep, one non-overlapping
/// segment of `seg_len` inputs per step. Nothing carries over between
/// segments: each is an independent forward and backward pass.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    ids: &'a [usize],
    batch_size: usize,
    seg_len: usize,
    lane_len: usize,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(ids: &'a [usize], batch_size: usize, seg_len: usize) -> Result<Self> {
        if batch_size == 0 || seg_len == 0 {
            return Err(Error::Config("batch size and segment length must be at least 1".into()));
        }
        let needed = batch_size * (seg_len + 1);
        if ids.len() < needed {
            return Err(Error::CorpusTooSmall { needed, got: ids.len() });
        }
        Ok(BatchStream { ids, batch_size, seg_len, lane_len: ids.len() / batch_size, cursor: 0 })
    }

    pub fn lane_len(&self) -> usize {
        self.lane_len
    }

    /// Number of segments per lane in one pass.
    pub fn steps(&self) -> usize {
        (self.lane_len - 1) / self.seg_len
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let start = self.cursor;
        if start + self.seg_len + 1 > self.lane_len {
            return None;
        }
        self.cursor += self.seg_len;
        let mut inputs = Vec::with_capacity(self.batch_size * self.seg_len);
        let mut targets = Vec::with_capacity(self.batch_size * self.seg_len);
        for lane in 0..self.batch_size {
            let base = lane * self.lane_len + start;
            inputs.extend_from_slice(&self.ids[base..base + self.seg_len]);
            targets.extend_from_slice(&self.ids[base + 1..base + self.seg_len + 1]);
        }
        Some(Batch { inputs, targets, batch: self.batch_size, len: self.seg_len })
    }
}

pub fn make_batches(ids: &[usize], batch_size: usize, seg_len: usize) -> Result<Vec<Batch>> {
    Ok(BatchStream::new(ids, batch_size, seg_len)?.collect())
}
