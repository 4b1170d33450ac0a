//! Forward primitives. Each method validates shapes, computes the output value
//! and records whatever the backward pass needs.

use super::gemm::{gemm, Layout};
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Geometry of a multi-head scaled dot-product attention call.
///
/// Queries are `[batch * query_len, d_model]`, keys and values are
/// `[batch * key_len, d_model]`; heads split the model dimension.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub heads: usize,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
    /// `true` marks a padded key, `batch * key_len` entries.
    pub key_padding: Vec<bool>,
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddBias { a: Var, bias: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Softmax { a: Var },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Sum { a: Var },
    Mean { a: Var },
    GatherRows { a: Var, rows: Vec<usize> },
    GatherElems { a: Var, idx: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    CosineRows { a: Var, b: Var },
    L2Norm { a: Var },
    SegmentLogSumExp { a: Var, segments: Vec<(usize, usize)> },
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::invalid(format!("{op}: {detail}"))
}

fn as_matrix(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(shape_err(op, format!("shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a), "matmul")?;
        let (k2, n) = as_matrix(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            self.value(a).data(),
            Layout::row_major(m, k),
            self.value(b).data(),
            Layout::row_major(k, n),
            0.0,
            &mut out,
            Layout::row_major(m, n),
        );
        let rg = self.tracks(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, Tensor { shape: vec![m, n], data: out }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.tracks(&[a, b]);
        Ok(self.push(Op::Add { a, b }, Tensor { shape, data }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.tracks(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, Tensor { shape, data }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let shape = t.shape().to_vec();
        let rg = self.tracks(&[a]);
        self.push(Op::Scale { a, factor }, Tensor { shape, data }, rg)
    }

    /// Adds a `[c]` bias to every row of an `[r, c]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = as_matrix(self.value(a), "add_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(shape_err(
                "add_bias",
                format!("bias shape {:?} does not match {c} columns", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.tracks(&[a, bias]);
        Ok(self.push(Op::AddBias { a, bias }, Tensor { shape, data }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let rg = self.tracks(&[a]);
        self.push(Op::Relu { a }, Tensor { shape, data }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| gelu(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.tracks(&[a]);
        self.push(Op::Gelu { a }, Tensor { shape, data }, rg)
    }

    /// Rows of a `[vocab, d]` table, one per id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = as_matrix(self.value(table), "embedding")?;
        if ids.is_empty() {
            return Err(shape_err("embedding", "no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(shape_err("embedding", format!("id {bad} out of range for {vocab} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.tracks(&[table]);
        Ok(self.push(
            Op::Embedding { table, ids: ids.to_vec() },
            Tensor { shape: vec![ids.len(), d], data },
            rg,
        ))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma * x + beta`. A constant row maps to `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x), "layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(shape_err("layer_norm", format!("affine shape must be [{c}]")));
            }
        }
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                let n = (row[j] - mean) * s;
                normed[i * c + j] = n;
                out[i * c + j] = n * gs[j] + bs[j];
            }
        }
        let rg = self.tracks(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, normed, inv_std },
            Tensor { shape: vec![r, c], data: out },
            rg,
        ))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / total));
        }
        let shape = t.shape().to_vec();
        let rg = self.tracks(&[a]);
        self.push(Op::Softmax { a }, Tensor { shape, data }, rg)
    }

    /// Multi-head scaled dot-product attention. Disallowed (masked) entries get
    /// probability exactly zero; a query with no allowed key outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = as_matrix(self.value(q), "attention")?;
        let (kr, dk) = as_matrix(self.value(k), "attention")?;
        let (vr, dv) = as_matrix(self.value(v), "attention")?;
        let AttentionSpec { batch, query_len, key_len, heads, causal, .. } = spec;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("d_model {d} not divisible by {heads} heads")));
        }
        if dk != d || dv != d || qr != batch * query_len || kr != batch * key_len || vr != kr {
            return Err(shape_err(
                "attention",
                format!("inconsistent shapes q={qr}x{d} k={kr}x{dk} v={vr}x{dv} for batch {batch}"),
            ));
        }
        if spec.key_padding.len() != batch * key_len {
            return Err(shape_err("attention", "key padding mask has the wrong length".into()));
        }
        if causal && query_len != key_len {
            return Err(shape_err("attention", "causal attention needs equal lengths".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (query_len, key_len);
        let mut probs = vec![0.0; batch * heads * nq * nk];
        let mut out = vec![0.0; qr * d];
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
                let q_off = b * nq * d + h * dh;
                let k_off = b * nk * d + h * dh;
                gemm(
                    scale,
                    &qd[q_off..],
                    Layout::with_strides(nq, dh, d, 1),
                    &kd[k_off..],
                    Layout::with_strides(dh, nk, 1, d),
                    0.0,
                    p,
                    Layout::row_major(nq, nk),
                );
                for i in 0..nq {
                    let row = &mut p[i * nk..(i + 1) * nk];
                    let allowed = |j: usize| !spec.key_padding[b * nk + j] && (!causal || j <= i);
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter().enumerate() {
                        if allowed(j) {
                            max = max.max(*s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        row.iter_mut().for_each(|s| *s = 0.0);
                        continue;
                    }
                    let mut total = 0.0;
                    for (j, s) in row.iter_mut().enumerate() {
                        if allowed(j) {
                            *s = (*s - max).exp();
                            total += *s;
                        } else {
                            *s = 0.0;
                        }
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                }
                gemm(
                    1.0,
                    p,
                    Layout::row_major(nq, nk),
                    &vd[k_off..],
                    Layout::with_strides(nk, dh, d, 1),
                    0.0,
                    &mut out[q_off..],
                    Layout::with_strides(nq, dh, d, 1),
                );
            }
        }
        let rg = self.tracks(&[q, k, v]);
        Ok(self.push(
            Op::Attention { q, k, v, spec, probs },
            Tensor { shape: vec![qr, d], data: out },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[rows, classes]` logits. `None` rows are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = as_matrix(self.value(logits), "cross_entropy")?;
        if targets.len() != r {
            return Err(shape_err("cross_entropy", format!("{} targets for {r} rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(shape_err("cross_entropy", "every position is padded".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("target {bad} out of range for {c} classes")));
        }
        let zs = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for i in 0..r {
            let Some(t) = targets[i] else { continue };
            let row = &zs[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= sum);
            total += max + sum.ln() - row[t];
        }
        let rg = self.tracks(&[logits]);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            Tensor::scalar(total / count as f64),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.tracks(&[a]);
        self.push(Op::Sum { a }, Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.tracks(&[a]);
        self.push(Op::Mean { a }, Tensor::scalar(s), rg)
    }

    /// Selects rows of a matrix (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = as_matrix(self.value(a), "gather_rows")?;
        if rows.is_empty() {
            return Err(shape_err("gather_rows", "no rows selected".into()));
        }
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range for {r} rows")));
        }
        let src = self.value(a).data();
        let data = rows.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        let rg = self.tracks(&[a]);
        Ok(self.push(
            Op::GatherRows { a, rows: rows.to_vec() },
            Tensor { shape: vec![rows.len(), c], data },
            rg,
        ))
    }

    /// Selects flat elements into a vector.
    pub fn gather_elems(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if idx.is_empty() {
            return Err(shape_err("gather_elems", "no elements selected".into()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_elems", format!("index {bad} out of range for {n}")));
        }
        let src = self.value(a).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let rg = self.tracks(&[a]);
        Ok(self.push(
            Op::GatherElems { a, idx: idx.to_vec() },
            Tensor { shape: vec![idx.len()], data },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = as_matrix(self.value(a), "concat_rows")?;
        let (rb, cb) = as_matrix(self.value(b), "concat_rows")?;
        if ca != cb {
            return Err(shape_err("concat_rows", format!("column counts {ca} and {cb} differ")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.tracks(&[a, b]);
        Ok(self.push(Op::ConcatRows { a, b }, Tensor { shape: vec![ra + rb, ca], data }, rg))
    }

    /// Cosine similarity of corresponding rows, `[r, d] x [r, d] -> [r]`.
    /// A row pair involving a zero vector has similarity 0 and no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "cosine_rows")?;
        let (r, c) = as_matrix(self.value(a), "cosine_rows")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let data = (0..r)
            .map(|i| cosine(&ad[i * c..(i + 1) * c], &bd[i * c..(i + 1) * c]))
            .collect();
        let rg = self.tracks(&[a, b]);
        Ok(self.push(Op::CosineRows { a, b }, Tensor { shape: vec![r], data }, rg))
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.tracks(&[a]);
        self.push(Op::L2Norm { a }, Tensor::scalar(n), rg)
    }

    /// Log-sum-exp over contiguous `(start, len)` segments of a flat tensor.
    pub fn segment_logsumexp(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let n = self.value(a).numel();
        if segments.is_empty() {
            return Err(shape_err("segment_logsumexp", "no segments".into()));
        }
        for &(start, len) in segments {
            if len == 0 || start + len > n {
                return Err(shape_err("segment_logsumexp", format!("bad segment ({start}, {len}) for {n}")));
            }
        }
        let src = self.value(a).data();
        let data = segments.iter().map(|&(s, l)| logsumexp(&src[s..s + l])).collect();
        let rg = self.tracks(&[a]);
        Ok(self.push(
            Op::SegmentLogSumExp { a, segments: segments.to_vec() },
            Tensor { shape: vec![segments.len()], data },
            rg,
        ))
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Cosine similarity with the zero-vector convention (similarity 0).
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (x, y) in u.iter().zip(v) {
        dot += x * y;
        nu += x * x;
        nv += y * y;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot / (nu.sqrt() * nv.sqrt())
}
