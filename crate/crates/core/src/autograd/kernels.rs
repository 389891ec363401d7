//! Raw slice kernels. Every output row is produced by the same sequence of
//! floating-point operations regardless of how rows are split across
//! threads, so parallel and serial runs agree bit for bit.

use rayon::prelude::*;

/// Below this many multiply-adds a product runs on the calling thread.
const PARALLEL_WORK: usize = 1 << 18;

/// `c[p×r] += a[p×q] · b[q×r]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    let row = |(i, c_row): (usize, &mut [f64])| {
        let a_row = &a[i * q..(i + 1) * q];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (c, &bkj) in c_row.iter_mut().zip(b_row) {
                *c += aik * bkj;
            }
        }
    };
    if p * q * r >= PARALLEL_WORK && r > 0 {
        c.par_chunks_mut(r).enumerate().for_each(row);
    } else if r > 0 {
        c.chunks_mut(r).enumerate().for_each(row);
    }
}

/// `c[p×q] += a[p×r] · b[q×r]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    let row = |(i, c_row): (usize, &mut [f64])| {
        let a_row = &a[i * r..(i + 1) * r];
        for (k, c) in c_row.iter_mut().enumerate() {
            let b_row = &b[k * r..(k + 1) * r];
            *c += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    };
    if p * q * r >= PARALLEL_WORK && q > 0 {
        c.par_chunks_mut(q).enumerate().for_each(row);
    } else if q > 0 {
        c.chunks_mut(q).enumerate().for_each(row);
    }
}

/// `c[q×r] += a[p×q]ᵀ · b[p×r]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    let row = |(k, c_row): (usize, &mut [f64])| {
        for i in 0..p {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[i * r..(i + 1) * r];
            for (c, &bij) in c_row.iter_mut().zip(b_row) {
                *c += aik * bij;
            }
        }
    };
    if p * q * r >= PARALLEL_WORK && r > 0 {
        c.par_chunks_mut(r).enumerate().for_each(row);
    } else if r > 0 {
        c.chunks_mut(r).enumerate().for_each(row);
    }
}

/// Numpy-style broadcast of two shapes aligned at the trailing dimension.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (axis, slot) in out.iter_mut().enumerate() {
        let da = dim_from_end(a, rank - axis);
        let db = dim_from_end(b, rank - axis);
        *slot = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_end(shape: &[usize], from_end: usize) -> usize {
    if from_end > shape.len() {
        1
    } else {
        shape[shape.len() - from_end]
    }
}

/// For each flat index of `out`, the flat index of the element of an
/// operand with shape `input` that broadcasts onto it.
pub(crate) fn broadcast_offsets(out: &[usize], input: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    let in_numel: usize = input.iter().product();
    if out == input {
        return (0..numel).collect();
    }
    // Trailing-suffix case: bias vectors, positional tables.
    if input.len() <= out.len() && out[out.len() - input.len()..] == *input {
        return (0..numel).map(|i| i % in_numel.max(1)).collect();
    }
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut stride = 1;
    for axis in (0..rank).rev() {
        let d = dim_from_end(input, rank - axis);
        strides[axis] = if d == 1 { 0 } else { stride };
        stride *= d;
    }
    let mut offsets = Vec::with_capacity(numel);
    let mut index = vec![0usize; rank];
    for _ in 0..numel {
        offsets.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < out[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    offsets
}
