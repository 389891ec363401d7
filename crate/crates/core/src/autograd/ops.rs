//! Differentiable operations and their vector-Jacobian products.

use rand::Rng;

use super::kernels::{broadcast_offsets, broadcast_shape, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::patterns::AttentionMask;
use crate::rng::DropoutKey;

/// Batch layout of a matrix product after broadcasting.
pub(crate) struct MatMulPlan {
    p: usize,
    q: usize,
    r: usize,
    a_slots: Vec<usize>,
    b_slots: Vec<usize>,
}

pub(crate) enum Op {
    Add { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Tensor, factor: f64 },
    MatMul { a: Tensor, b: Tensor, plan: MatMulPlan },
    Relu { a: Tensor },
    Reshape { a: Tensor },
    Permute { a: Tensor, axes: Vec<usize> },
    MaskedSoftmax { a: Tensor },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, normalized: Vec<f64>, inv_std: Vec<f64> },
    Dropout { a: Tensor, keep: Vec<f64> },
    Gather { table: Tensor, ids: Vec<usize> },
    CrossEntropy { logits: Tensor, targets: Vec<usize> },
    Sum { a: Tensor },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Relu { .. } => "relu",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add { a, b } | Op::Mul { a, b } | Op::MatMul { a, b, .. } => vec![a, b],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::MaskedSoftmax { a }
            | Op::Dropout { a, .. }
            | Op::Sum { a } => vec![a],
            Op::Gather { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Gradients with respect to each parent, `None` where `needs` is false.
    pub(crate) fn backward(&self, out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        match self {
            Op::Add { a, b } => {
                let shape = out.shape();
                vec![
                    needs[0].then(|| reduce_broadcast(grad, shape, a.shape(), |_| 1.0)),
                    needs[1].then(|| reduce_broadcast(grad, shape, b.shape(), |_| 1.0)),
                ]
            }
            Op::Mul { a, b } => {
                let shape = out.shape();
                let (ad, bd) = (a.data(), b.data());
                let a_off = broadcast_offsets(shape, a.shape());
                let b_off = broadcast_offsets(shape, b.shape());
                vec![
                    needs[0].then(|| reduce_broadcast(grad, shape, a.shape(), |i| bd[b_off[i]])),
                    needs[1].then(|| reduce_broadcast(grad, shape, b.shape(), |i| ad[a_off[i]])),
                ]
            }
            Op::Scale { factor, .. } => vec![Some(grad.iter().map(|g| g * factor).collect())],
            Op::MatMul { a, b, plan } => {
                let MatMulPlan { p, q, r, .. } = *plan;
                let (ad, bd) = (a.data(), b.data());
                let mut da = needs[0].then(|| vec![0.0; ad.len()]);
                let mut db = needs[1].then(|| vec![0.0; bd.len()]);
                for (batch, (&sa, &sb)) in plan.a_slots.iter().zip(&plan.b_slots).enumerate() {
                    let g = &grad[batch * p * r..(batch + 1) * p * r];
                    let a_mat = &ad[sa * p * q..(sa + 1) * p * q];
                    let b_mat = &bd[sb * q * r..(sb + 1) * q * r];
                    if let Some(da) = da.as_mut() {
                        gemm_nt(g, b_mat, &mut da[sa * p * q..(sa + 1) * p * q], p, q, r);
                    }
                    if let Some(db) = db.as_mut() {
                        gemm_tn(a_mat, g, &mut db[sb * q * r..(sb + 1) * q * r], p, q, r);
                    }
                }
                vec![da, db]
            }
            Op::Relu { a } => {
                let ad = a.data();
                vec![Some(grad.iter().zip(ad.iter()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Reshape { .. } => vec![Some(grad.to_vec())],
            Op::Permute { axes, .. } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                vec![Some(permute_data(grad, out.shape(), &inverse).0)]
            }
            Op::MaskedSoftmax { .. } => {
                let y = out.data();
                let n = *out.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for ((dx_row, y_row), g_row) in dx.chunks_mut(n).zip(y.chunks(n)).zip(grad.chunks(n)) {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(y, g)| y * g).sum();
                    for ((d, &yv), &gv) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNorm { gain, normalized, inv_std, .. } => {
                let gd = gain.data();
                let d = gd.len();
                let mut dx = needs[0].then(|| vec![0.0; grad.len()]);
                let mut dgain = needs[1].then(|| vec![0.0; d]);
                let mut dbias = needs[2].then(|| vec![0.0; d]);
                let mut dxhat = vec![0.0; d];
                for (row, (g_row, xhat)) in grad.chunks(d).zip(normalized.chunks(d)).enumerate() {
                    if let Some(dgain) = dgain.as_mut() {
                        for ((acc, g), x) in dgain.iter_mut().zip(g_row).zip(xhat) {
                            *acc += g * x;
                        }
                    }
                    if let Some(dbias) = dbias.as_mut() {
                        for (acc, g) in dbias.iter_mut().zip(g_row) {
                            *acc += g;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        for ((h, g), gn) in dxhat.iter_mut().zip(g_row).zip(gd.iter()) {
                            *h = g * gn;
                        }
                        let mean_h = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_hx = dxhat.iter().zip(xhat).map(|(h, x)| h * x).sum::<f64>() / d as f64;
                        let scale = inv_std[row];
                        for ((out, h), x) in dx[row * d..(row + 1) * d].iter_mut().zip(&dxhat).zip(xhat) {
                            *out = scale * (h - mean_h - x * mean_hx);
                        }
                    }
                }
                vec![dx, dgain, dbias]
            }
            Op::Dropout { keep, .. } => vec![Some(grad.iter().zip(keep).map(|(g, k)| g * k).collect())],
            Op::Gather { table, ids } => {
                let d = table.shape()[1];
                let mut dt = vec![0.0; table.numel()];
                for (g_row, &id) in grad.chunks(d).zip(ids) {
                    for (acc, g) in dt[id * d..(id + 1) * d].iter_mut().zip(g_row) {
                        *acc += g;
                    }
                }
                vec![Some(dt)]
            }
            Op::CrossEntropy { logits, targets } => {
                let ld = logits.data();
                let v = *logits.shape().last().unwrap_or(&1);
                let scale = grad[0] / targets.len() as f64;
                let mut dl = vec![0.0; ld.len()];
                for ((d_row, l_row), &t) in dl.chunks_mut(v).zip(ld.chunks(v)).zip(targets) {
                    let max = l_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = l_row.iter().map(|x| (x - max).exp()).sum();
                    for (d, x) in d_row.iter_mut().zip(l_row) {
                        *d = (x - max).exp() / total * scale;
                    }
                    d_row[t] -= scale;
                }
                vec![Some(dl)]
            }
            Op::Sum { a } => vec![Some(vec![grad[0]; a.numel()])],
        }
    }
}

/// Sums `grad * factor(i)` over the output elements that broadcast onto each
/// element of `input`.
fn reduce_broadcast(grad: &[f64], out: &[usize], input: &[usize], factor: impl Fn(usize) -> f64) -> Vec<f64> {
    let numel: usize = input.iter().product();
    if out == input {
        return grad.iter().enumerate().map(|(i, g)| g * factor(i)).collect();
    }
    let offsets = broadcast_offsets(out, input);
    let mut acc = vec![0.0; numel];
    for (i, (g, &o)) in grad.iter().zip(&offsets).enumerate() {
        acc[o] += g * factor(i);
    }
    acc
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for axis in (0..rank.saturating_sub(1)).rev() {
        in_strides[axis] = in_strides[axis + 1] * shape[axis + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
    (out, out_shape)
}

impl Tensor {
    fn elementwise(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(op, self.shape(), other.shape()))?;
        let (ad, bd) = (self.data(), other.data());
        let data = if self.shape() == other.shape() {
            ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let a_off = broadcast_offsets(&shape, self.shape());
            let b_off = broadcast_offsets(&shape, other.shape());
            a_off.iter().zip(&b_off).map(|(&i, &j)| f(ad[i], bd[j])).collect()
        };
        Ok((shape, data))
    }

    /// Element-wise sum with trailing-axis broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = self.elementwise(other, "add", |x, y| x + y)?;
        Tensor::from_op(shape, data, Op::Add { a: self.clone(), b: other.clone() })
    }

    /// Element-wise product with trailing-axis broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = self.elementwise(other, "mul", |x, y| x * y)?;
        Tensor::from_op(shape, data, Op::Mul { a: self.clone(), b: other.clone() })
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| x * factor).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale { a: self.clone(), factor })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Relu { a: self.clone() })
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data().iter().sum();
        Tensor::from_op(Vec::new(), vec![total], Op::Sum { a: self.clone() })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape { a: self.clone() })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        let valid =
            axes.len() == rank && axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::shape("permute", self.shape(), axes));
        }
        let (data, shape) = permute_data(&self.data(), self.shape(), axes);
        Tensor::from_op(shape, data, Op::Permute { a: self.clone(), axes: axes.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    /// Looks up rows of a `[rows, d]` table; the result has shape
    /// `lead_shape ++ [d]` and `ids.len()` must equal `product(lead_shape)`.
    pub fn gather_rows(&self, ids: &[usize], lead_shape: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::shape("gather", self.shape(), lead_shape));
        }
        if lead_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather", lead_shape, &[ids.len()]));
        }
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        let table = self.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::Index { what: "row id", index: id, limit: rows, position });
            }
            data.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        drop(table);
        let mut shape = lead_shape.to_vec();
        shape.push(d);
        Tensor::from_op(shape, data, Op::Gather { table: self.clone(), ids: ids.to_vec() })
    }
}

/// Batched matrix product `[.., p, q] × [.., q, r] → [.., p, r]` with
/// broadcasting over the leading (batch) axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (p, q, r) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
    let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let out_batch = broadcast_shape(batch_a, batch_b).ok_or_else(|| Error::shape("matmul", sa, sb))?;
    let plan = if batch_b.iter().all(|&d| d == 1) && out_batch == batch_a {
        // A single right-hand matrix: fold the batch into the rows.
        MatMulPlan { p: p * batch_a.iter().product::<usize>(), q, r, a_slots: vec![0], b_slots: vec![0] }
    } else {
        MatMulPlan {
            p,
            q,
            r,
            a_slots: broadcast_offsets(&out_batch, batch_a),
            b_slots: broadcast_offsets(&out_batch, batch_b),
        }
    };
    let mut out = vec![0.0; plan.a_slots.len() * plan.p * r];
    {
        let (ad, bd) = (a.data(), b.data());
        let (pp, q, r) = (plan.p, plan.q, plan.r);
        for (batch, (&slot_a, &slot_b)) in plan.a_slots.iter().zip(&plan.b_slots).enumerate() {
            gemm_nn(
                &ad[slot_a * pp * q..(slot_a + 1) * pp * q],
                &bd[slot_b * q * r..(slot_b + 1) * q * r],
                &mut out[batch * pp * r..(batch + 1) * pp * r],
                pp,
                q,
                r,
            );
        }
    }
    let mut shape = out_batch;
    shape.extend([p, r]);
    Tensor::from_op(shape, out, Op::MatMul { a: a.clone(), b: b.clone(), plan })
}

/// Row-wise softmax over the last axis restricted to the mask's support.
///
/// The trailing two axes of `scores` must both equal `mask.n()`. Masked
/// entries come out exactly zero, and the row maximum is taken over the
/// unmasked entries only.
pub fn masked_softmax(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let shape = scores.shape();
    let n = mask.n();
    if shape.len() < 2 || shape[shape.len() - 1] != n || shape[shape.len() - 2] != n {
        return Err(Error::shape("masked_softmax", shape, &[n, n]));
    }
    let supports: Vec<Vec<usize>> = (0..n).map(|i| mask.iter_row(i).collect()).collect();
    if let Some(row) = supports.iter().position(Vec::is_empty) {
        return Err(Error::InvalidMask { row });
    }
    let sd = scores.data();
    let mut out = vec![0.0; sd.len()];
    for (row, (o_row, s_row)) in out.chunks_mut(n).zip(sd.chunks(n)).enumerate() {
        let support = &supports[row % n];
        let max = support.iter().map(|&j| s_row[j]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &j in support {
            let e = (s_row[j] - max).exp();
            o_row[j] = e;
            total += e;
        }
        for &j in support {
            o_row[j] /= total;
        }
    }
    drop(sd);
    Tensor::from_op(shape.to_vec(), out, Op::MaskedSoftmax { a: scores.clone() })
}

/// Normalizes the last axis to zero mean and unit variance, then applies
/// `gain` and `bias`. `eps` is added to the variance inside the square root.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", x.shape(), gain.shape()))?;
    if gain.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    if bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), bias.shape()));
    }
    let xd = x.data();
    let (gd, bd) = (gain.data(), bias.data());
    let rows = xd.len() / d.max(1);
    let mut normalized = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; xd.len()];
    for (row, x_row) in xd.chunks(d).enumerate() {
        let mean = x_row.iter().sum::<f64>() / d as f64;
        let var = x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[row] = istd;
        for k in 0..d {
            let xh = (x_row[k] - mean) * istd;
            normalized[row * d + k] = xh;
            out[row * d + k] = xh * gd[k] + bd[k];
        }
    }
    drop((xd, gd, bd));
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        Op::LayerNorm { x: x.clone(), gain: gain.clone(), bias: bias.clone(), normalized, inv_std },
    )
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`; the
/// draw is fully determined by `key`. Outside training it is the identity.
pub fn dropout(x: &Tensor, rate: f64, training: bool, key: DropoutKey) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = key.rng();
    let scale = 1.0 / (1.0 - rate);
    let keep: Vec<f64> =
        (0..x.numel()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale }).collect();
    let data = x.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
    Tensor::from_op(x.shape().to_vec(), data, Op::Dropout { a: x.clone(), keep })
}

/// Mean negative log-likelihood of `targets` under `softmax(logits)` along
/// the last axis. `targets` holds one id per leading position.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let v = *logits.shape().last().ok_or_else(|| Error::shape("cross_entropy", logits.shape(), &[]))?;
    let rows = logits.numel() / v.max(1);
    if rows != targets.len() || rows == 0 {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let ld = logits.data();
    let mut total = 0.0;
    for (position, (l_row, &t)) in ld.chunks(v).zip(targets).enumerate() {
        if t >= v {
            return Err(Error::Index { what: "target id", index: t, limit: v, position });
        }
        let max = l_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l_row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - l_row[t];
    }
    drop(ld);
    Tensor::from_op(
        Vec::new(),
        vec![total / rows as f64],
        Op::CrossEntropy { logits: logits.clone(), targets: targets.to_vec() },
    )
}
