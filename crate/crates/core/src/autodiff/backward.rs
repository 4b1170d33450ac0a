use super::gemm::{gemm, Layout};
use super::ops::{gelu_grad, Op};
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `∂root/∂node` for every node reached by the backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` tracks gradients and
    /// the root depends on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get), but zeros when the root does not depend on `v`.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shapes[v.0].clone(),
            data: self.get_or_zeros(v),
        }
    }
}

struct Acc<'g> {
    graph: &'g Graph,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'g> Acc<'g> {
    /// Runs `f` on the (zero-initialized) gradient buffer of `v` if it tracks gradients.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.graph.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(buf);
    }

    fn add(&mut self, v: Var, delta: &[f64]) {
        self.with(v, |g| g.iter_mut().zip(delta).for_each(|(a, d)| *a += d));
    }

    fn val(&self, v: Var) -> &'g Tensor {
        &self.graph.nodes[v.0].value
    }
}

impl Graph {
    /// Reverse-mode sweep from a scalar root. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::invalid("backward: root is not in this graph"));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut acc = Acc {
            graph: self,
            grads: vec![None; self.nodes.len()],
        };
        if self.nodes[root.0].requires_grad {
            acc.grads[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let Some(gout) = acc.grads[id].take() else { continue };
            self.propagate(id, &gout, &mut acc);
            acc.grads[id] = Some(gout);
        }
        let grads = acc.grads;
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, gout: &[f64], acc: &mut Acc<'_>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (acc.val(*a).shape()[0], acc.val(*a).shape()[1]);
                let n = acc.val(*b).shape()[1];
                let (av, bv) = (acc.val(*a).data(), acc.val(*b).data());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        1.0,
                        gout,
                        Layout::row_major(m, n),
                        bv,
                        Layout::transposed(k, n),
                        0.0,
                        &mut da,
                        Layout::row_major(m, k),
                    );
                    acc.add(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        1.0,
                        av,
                        Layout::transposed(m, k),
                        gout,
                        Layout::row_major(m, n),
                        0.0,
                        &mut db,
                        Layout::row_major(k, n),
                    );
                    acc.add(*b, &db);
                }
            }
            Op::Add { a, b } => {
                acc.add(*a, gout);
                acc.add(*b, gout);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = gout.iter().zip(acc.val(*b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = gout.iter().zip(acc.val(*a).data()).map(|(g, x)| g * x).collect();
                acc.add(*a, &da);
                acc.add(*b, &db);
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                acc.with(*a, |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x += f * d));
            }
            Op::AddBias { a, bias } => {
                acc.add(*a, gout);
                let c = acc.val(*bias).numel();
                acc.with(*bias, |g| {
                    for row in gout.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(x, d)| *x += d);
                    }
                });
            }
            Op::Relu { a } => {
                let d: Vec<f64> = gout
                    .iter()
                    .zip(acc.val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc.add(*a, &d);
            }
            Op::Gelu { a } => {
                let d: Vec<f64> = gout.iter().zip(acc.val(*a).data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                acc.add(*a, &d);
            }
            Op::Embedding { table, ids } => {
                let d = acc.val(*table).cols();
                acc.with(*table, |g| {
                    for (row, &i) in gout.chunks(d).zip(ids) {
                        g[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(x, v)| *x += v);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                let c = acc.val(*gamma).numel();
                let gam = acc.val(*gamma).data().to_vec();
                acc.with(*gamma, |g| {
                    for (row, nrow) in gout.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            g[j] += row[j] * nrow[j];
                        }
                    }
                });
                acc.with(*beta, |g| {
                    for row in gout.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(x, d)| *x += d);
                    }
                });
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; gout.len()];
                    for (i, (row, nrow)) in gout.chunks(c).zip(normed.chunks(c)).enumerate() {
                        let dn: Vec<f64> = row.iter().zip(&gam).map(|(d, g)| d * g).collect();
                        let mean_dn = dn.iter().sum::<f64>() / c as f64;
                        let mean_dn_n = dn.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] * (dn[j] - mean_dn - nrow[j] * mean_dn_n);
                        }
                    }
                    acc.add(*x, &dx);
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc.add(*a, &d);
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (dq, dk, dv) = attention_backward(acc, *q, *k, *v, spec, probs, gout);
                acc.add(*q, &dq);
                acc.add(*k, &dk);
                acc.add(*v, &dv);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = acc.val(*logits).cols();
                let scale = gout[0] / *count as f64;
                acc.with(*logits, |g| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            g[i * c + j] += scale * probs[i * c + j];
                        }
                        g[i * c + t] -= scale;
                    }
                });
            }
            Op::Sum { a } => {
                let g0 = gout[0];
                acc.with(*a, |g| g.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean { a } => {
                let g0 = gout[0] / acc.val(*a).numel() as f64;
                acc.with(*a, |g| g.iter_mut().for_each(|x| *x += g0));
            }
            Op::GatherRows { a, rows } => {
                let c = acc.val(*a).cols();
                acc.with(*a, |g| {
                    for (row, &i) in gout.chunks(c).zip(rows) {
                        g[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(x, d)| *x += d);
                    }
                });
            }
            Op::GatherElems { a, idx } => {
                acc.with(*a, |g| {
                    for (d, &i) in gout.iter().zip(idx) {
                        g[i] += d;
                    }
                });
            }
            Op::ConcatRows { a, b } => {
                let na = acc.val(*a).numel();
                acc.add(*a, &gout[..na]);
                acc.add(*b, &gout[na..]);
            }
            Op::CosineRows { a, b } => {
                let c = acc.val(*a).cols();
                let (av, bv) = (acc.val(*a).data(), acc.val(*b).data());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for (i, &g) in gout.iter().enumerate() {
                    let (u, w) = (&av[i * c..(i + 1) * c], &bv[i * c..(i + 1) * c]);
                    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if nu == 0.0 || nw == 0.0 {
                        continue;
                    }
                    let s = node.value.data()[i];
                    for j in 0..c {
                        da[i * c + j] = g * (w[j] / (nu * nw) - s * u[j] / (nu * nu));
                        db[i * c + j] = g * (u[j] / (nu * nw) - s * w[j] / (nw * nw));
                    }
                }
                acc.add(*a, &da);
                acc.add(*b, &db);
            }
            Op::L2Norm { a } => {
                let n = node.value.item();
                if n > 0.0 {
                    let f = gout[0] / n;
                    let d: Vec<f64> = acc.val(*a).data().iter().map(|x| f * x).collect();
                    acc.add(*a, &d);
                }
            }
            Op::SegmentLogSumExp { a, segments } => {
                let x = acc.val(*a).data();
                let lse = node.value.data();
                let mut d = vec![0.0; x.len()];
                for (s, &(start, len)) in segments.iter().enumerate() {
                    for j in start..start + len {
                        d[j] += gout[s] * (x[j] - lse[s]).exp();
                    }
                }
                acc.add(*a, &d);
            }
        }
    }
}

fn attention_backward(
    acc: &Acc<'_>,
    q: Var,
    k: Var,
    v: Var,
    spec: &super::AttentionSpec,
    probs: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (qd, kd, vd) = (acc.val(q).data(), acc.val(k).data(), acc.val(v).data());
    let d = acc.val(q).cols();
    let (batch, heads, nq, nk) = (spec.batch, spec.heads, spec.query_len, spec.key_len);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; nq * nk];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * nq * nk..(b * heads + h + 1) * nq * nk];
            let q_off = b * nq * d + h * dh;
            let k_off = b * nk * d + h * dh;
            let q_view = Layout::with_strides(nq, dh, d, 1);
            let k_view = Layout::with_strides(nk, dh, d, 1);
            // dV = P^T dO
            gemm(1.0, p, Layout::transposed(nq, nk), &gout[q_off..], q_view, 1.0, &mut dv[k_off..], k_view);
            // dP = dO V^T
            gemm(
                1.0,
                &gout[q_off..],
                q_view,
                &vd[k_off..],
                Layout::with_strides(dh, nk, 1, d),
                0.0,
                &mut dp,
                Layout::row_major(nq, nk),
            );
            // dS = P * (dP - rowsum(P * dP)), folded with the score scale.
            for i in 0..nq {
                let prow = &p[i * nk..(i + 1) * nk];
                let drow = &mut dp[i * nk..(i + 1) * nk];
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for j in 0..nk {
                    drow[j] = scale * prow[j] * (drow[j] - dot);
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm(1.0, &dp, Layout::row_major(nq, nk), &kd[k_off..], k_view, 1.0, &mut dq[q_off..], q_view);
            gemm(1.0, &dp, Layout::transposed(nq, nk), &qd[q_off..], q_view, 1.0, &mut dk[k_off..], k_view);
        }
    }
    (dq, dk, dv)
}
