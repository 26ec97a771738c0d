//! Minimal reverse-mode autodiff over flat f64 vectors.
//!
//! Each graph node stores its forward value eagerly; `backward` walks nodes
//! in reverse insertion order (already topological) and accumulates gradients
//! into parents. Parameter leaves are tagged with an external parameter index
//! so per-tensor gradients can be collected after a pass.

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    /// Constant input; gradients stop here.
    Input,
    /// Parameter leaf; gradients are collected per `pid`.
    Param { pid: usize },
    /// y = W x with W stored row-major as a vector node.
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Cos { a: NodeId },
    Sin { a: NodeId },
    /// Elementwise scale * x + shift with constants.
    AffineConst { a: NodeId, scale: Vec<f64> },
    Concat { parts: Vec<NodeId> },
    /// Contiguous sub-range of a node.
    Slice { a: NodeId, start: usize },
    /// out = a + t * (b - a), elementwise.
    Lerp { t: NodeId, a: NodeId, b: NodeId },
    /// Scalars stacked into a vector.
    Stack { parts: Vec<NodeId> },
    /// Softmax over unmasked entries; masked outputs are exactly zero.
    MaskedSoftmax { a: NodeId, mask: Vec<bool> },
    /// out = sum_i w_i * v_i over vector nodes v_i.
    WeightedSum { w: NodeId, vs: Vec<NodeId> },
    /// Scalar k * (a . b).
    DotScaled { a: NodeId, b: NodeId, k: f64 },
    /// Scalar sum_i (a_i - target_i)^2.
    SumSqDiff { a: NodeId, target: Vec<f64> },
    /// z = mu + exp(0.5 * clamp(lv, lo, hi)) * eps.
    Reparam { mu: NodeId, logvar: NodeId, eps: Vec<f64>, lo: f64, hi: f64 },
    /// KL(q || p) between diagonal Gaussians with clamped log-variances.
    KlDiag { mu_q: NodeId, lv_q: NodeId, mu_p: NodeId, lv_p: NodeId, lo: f64, hi: f64 },
    /// Scalar bias + sum_i k_i * x_i.
    LinComb { terms: Vec<(f64, NodeId)> },
}

struct Node {
    val: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, val: Vec<f64>, op: Op) -> NodeId {
        let grad = vec![0.0; val.len()];
        self.nodes.push(Node { val, grad, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].val
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].val[0]
    }

    pub fn input(&mut self, v: &[f64]) -> NodeId {
        self.push(v.to_vec(), Op::Input)
    }

    pub fn param(&mut self, pid: usize, data: &[f64]) -> NodeId {
        self.push(data.to_vec(), Op::Param { pid })
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        debug_assert_eq!(self.nodes[w].val.len(), rows * cols);
        debug_assert_eq!(self.nodes[x].val.len(), cols);
        let mut out = vec![0.0; rows];
        {
            let wv = &self.nodes[w].val;
            let xv = &self.nodes[x].val;
            for i in 0..rows {
                let row = &wv[i * cols..(i + 1) * cols];
                out[i] = row.iter().zip(xv.iter()).map(|(a, b)| a * b).sum();
            }
        }
        self.push(out, Op::MatVec { w, x, rows, cols })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<f64> =
            self.nodes[a].val.iter().zip(self.nodes[b].val.iter()).map(|(x, y)| x + y).collect();
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<f64> =
            self.nodes[a].val.iter().zip(self.nodes[b].val.iter()).map(|(x, y)| x * y).collect();
        self.push(out, Op::Mul { a, b })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].val.iter().map(|x| x.tanh()).collect();
        self.push(out, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].val.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        self.push(out, Op::Sigmoid { a })
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].val.iter().map(|x| x.cos()).collect();
        self.push(out, Op::Cos { a })
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].val.iter().map(|x| x.sin()).collect();
        self.push(out, Op::Sin { a })
    }

    /// scale * x + shift, elementwise constants.
    pub fn affine_const(&mut self, a: NodeId, scale: &[f64], shift: &[f64]) -> NodeId {
        let out: Vec<f64> = self.nodes[a]
            .val
            .iter()
            .zip(scale.iter().zip(shift.iter()))
            .map(|(x, (k, b))| k * x + b)
            .collect();
        self.push(out, Op::AffineConst { a, scale: scale.to_vec() })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(&self.nodes[p].val);
        }
        self.push(out, Op::Concat { parts: parts.to_vec() })
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.nodes[a].val[start..start + len].to_vec();
        self.push(out, Op::Slice { a, start })
    }

    pub fn lerp(&mut self, t: NodeId, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<f64> = (0..self.nodes[a].val.len())
            .map(|i| {
                let av = self.nodes[a].val[i];
                av + self.nodes[t].val[i] * (self.nodes[b].val[i] - av)
            })
            .collect();
        self.push(out, Op::Lerp { t, a, b })
    }

    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        let out: Vec<f64> = parts.iter().map(|&p| self.nodes[p].val[0]).collect();
        self.push(out, Op::Stack { parts: parts.to_vec() })
    }

    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        let av = &self.nodes[a].val;
        let mut out = vec![0.0; av.len()];
        let m = av
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if m.is_finite() {
            let mut sum = 0.0;
            for i in 0..av.len() {
                if mask[i] {
                    out[i] = (av[i] - m).exp();
                    sum += out[i];
                }
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::MaskedSoftmax { a, mask: mask.to_vec() })
    }

    pub fn weighted_sum(&mut self, w: NodeId, vs: &[NodeId]) -> NodeId {
        let dim = self.nodes[vs[0]].val.len();
        let mut out = vec![0.0; dim];
        for (i, &v) in vs.iter().enumerate() {
            let wi = self.nodes[w].val[i];
            for (o, x) in out.iter_mut().zip(self.nodes[v].val.iter()) {
                *o += wi * x;
            }
        }
        self.push(out, Op::WeightedSum { w, vs: vs.to_vec() })
    }

    pub fn dot_scaled(&mut self, a: NodeId, b: NodeId, k: f64) -> NodeId {
        let d: f64 =
            self.nodes[a].val.iter().zip(self.nodes[b].val.iter()).map(|(x, y)| x * y).sum();
        self.push(vec![k * d], Op::DotScaled { a, b, k })
    }

    pub fn sum_sq_diff(&mut self, a: NodeId, target: &[f64]) -> NodeId {
        let s: f64 =
            self.nodes[a].val.iter().zip(target.iter()).map(|(x, t)| (x - t) * (x - t)).sum();
        self.push(vec![s], Op::SumSqDiff { a, target: target.to_vec() })
    }

    pub fn reparam(&mut self, mu: NodeId, logvar: NodeId, eps: &[f64], lo: f64, hi: f64) -> NodeId {
        let out: Vec<f64> = (0..self.nodes[mu].val.len())
            .map(|i| {
                let sig = (0.5 * clamp(self.nodes[logvar].val[i], lo, hi)).exp();
                self.nodes[mu].val[i] + sig * eps[i]
            })
            .collect();
        self.push(out, Op::Reparam { mu, logvar, eps: eps.to_vec(), lo, hi })
    }

    pub fn kl_diag(
        &mut self,
        mu_q: NodeId,
        lv_q: NodeId,
        mu_p: NodeId,
        lv_p: NodeId,
        lo: f64,
        hi: f64,
    ) -> NodeId {
        let n = self.nodes[mu_q].val.len();
        let mut s = 0.0;
        for i in 0..n {
            let lq = clamp(self.nodes[lv_q].val[i], lo, hi);
            let lp = clamp(self.nodes[lv_p].val[i], lo, hi);
            let dm = self.nodes[mu_q].val[i] - self.nodes[mu_p].val[i];
            s += 0.5 * ((lp - lq) + (lq.exp() + dm * dm) * (-lp).exp() - 1.0);
        }
        self.push(vec![s], Op::KlDiag { mu_q, lv_q, mu_p, lv_p, lo, hi })
    }

    pub fn lin_comb(&mut self, terms: &[(f64, NodeId)], bias: f64) -> NodeId {
        let s: f64 = bias + terms.iter().map(|&(k, id)| k * self.nodes[id].val[0]).sum::<f64>();
        self.push(vec![s], Op::LinComb { terms: terms.to_vec() })
    }

    /// Backpropagate from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) {
        debug_assert_eq!(self.nodes[loss].val.len(), 1);
        self.nodes[loss].grad[0] = 1.0;
        for i in (0..=loss).rev() {
            let g = std::mem::take(&mut self.nodes[i].grad);
            if g.iter().all(|&v| v == 0.0) {
                self.nodes[i].grad = g;
                continue;
            }
            // split the op out so parents can be mutated
            match &self.nodes[i].op {
                Op::Input | Op::Param { .. } => {}
                Op::MatVec { w, x, rows, cols } => {
                    let (w, x, rows, cols) = (*w, *x, *rows, *cols);
                    let xv = self.nodes[x].val.clone();
                    let wv = self.nodes[w].val.clone();
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            self.nodes[w].grad[r * cols + c] += gr * xv[c];
                            self.nodes[x].grad[c] += gr * wv[r * cols + c];
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (k, gv) in g.iter().enumerate() {
                        self.nodes[a].grad[k] += gv;
                        self.nodes[b].grad[k] += gv;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a].val.clone();
                    let bv = self.nodes[b].val.clone();
                    for k in 0..g.len() {
                        self.nodes[a].grad[k] += g[k] * bv[k];
                        self.nodes[b].grad[k] += g[k] * av[k];
                    }
                }
                Op::Tanh { a } => {
                    let a = *a;
                    let yv = self.nodes[i].val.clone();
                    for k in 0..g.len() {
                        self.nodes[a].grad[k] += g[k] * (1.0 - yv[k] * yv[k]);
                    }
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    let yv = self.nodes[i].val.clone();
                    for k in 0..g.len() {
                        self.nodes[a].grad[k] += g[k] * yv[k] * (1.0 - yv[k]);
                    }
                }
                Op::Cos { a } => {
                    let a = *a;
                    let xv = self.nodes[a].val.clone();
                    for k in 0..g.len() {
                        self.nodes[a].grad[k] -= g[k] * xv[k].sin();
                    }
                }
                Op::Sin { a } => {
                    let a = *a;
                    let xv = self.nodes[a].val.clone();
                    for k in 0..g.len() {
                        self.nodes[a].grad[k] += g[k] * xv[k].cos();
                    }
                }
                Op::AffineConst { a, scale } => {
                    let a = *a;
                    let scale = scale.clone();
                    for k in 0..g.len() {
                        self.nodes[a].grad[k] += g[k] * scale[k];
                    }
                }
                Op::Concat { parts } => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p].val.len();
                        for k in 0..len {
                            self.nodes[p].grad[k] += g[off + k];
                        }
                        off += len;
                    }
                }
                Op::Slice { a, start } => {
                    let (a, start) = (*a, *start);
                    for k in 0..g.len() {
                        self.nodes[a].grad[start + k] += g[k];
                    }
                }
                Op::Lerp { t, a, b } => {
                    let (t, a, b) = (*t, *a, *b);
                    let tv = self.nodes[t].val.clone();
                    let av = self.nodes[a].val.clone();
                    let bv = self.nodes[b].val.clone();
                    for k in 0..g.len() {
                        self.nodes[a].grad[k] += g[k] * (1.0 - tv[k]);
                        self.nodes[b].grad[k] += g[k] * tv[k];
                        self.nodes[t].grad[k] += g[k] * (bv[k] - av[k]);
                    }
                }
                Op::Stack { parts } => {
                    let parts = parts.clone();
                    for (k, p) in parts.into_iter().enumerate() {
                        self.nodes[p].grad[0] += g[k];
                    }
                }
                Op::MaskedSoftmax { a, mask } => {
                    let a = *a;
                    let mask = mask.clone();
                    let yv = self.nodes[i].val.clone();
                    let dot: f64 = (0..g.len()).filter(|&k| mask[k]).map(|k| g[k] * yv[k]).sum();
                    for k in 0..g.len() {
                        if mask[k] {
                            self.nodes[a].grad[k] += yv[k] * (g[k] - dot);
                        }
                    }
                }
                Op::WeightedSum { w, vs } => {
                    let w = *w;
                    let vs = vs.clone();
                    for (idx, v) in vs.into_iter().enumerate() {
                        let wi = self.nodes[w].val[idx];
                        let mut dw = 0.0;
                        for k in 0..g.len() {
                            dw += g[k] * self.nodes[v].val[k];
                            self.nodes[v].grad[k] += g[k] * wi;
                        }
                        self.nodes[w].grad[idx] += dw;
                    }
                }
                Op::DotScaled { a, b, k } => {
                    let (a, b, kk) = (*a, *b, *k);
                    let av = self.nodes[a].val.clone();
                    let bv = self.nodes[b].val.clone();
                    let gs = g[0] * kk;
                    for j in 0..av.len() {
                        self.nodes[a].grad[j] += gs * bv[j];
                        self.nodes[b].grad[j] += gs * av[j];
                    }
                }
                Op::SumSqDiff { a, target } => {
                    let a = *a;
                    let target = target.clone();
                    let gs = g[0];
                    for j in 0..target.len() {
                        let d = self.nodes[a].val[j] - target[j];
                        self.nodes[a].grad[j] += gs * 2.0 * d;
                    }
                }
                Op::Reparam { mu, logvar, eps, lo, hi } => {
                    let (mu, logvar, lo, hi) = (*mu, *logvar, *lo, *hi);
                    let eps = eps.clone();
                    for j in 0..g.len() {
                        self.nodes[mu].grad[j] += g[j];
                        let lv = self.nodes[logvar].val[j];
                        if lv > lo && lv < hi {
                            let sig = (0.5 * lv).exp();
                            self.nodes[logvar].grad[j] += g[j] * 0.5 * sig * eps[j];
                        }
                    }
                }
                Op::KlDiag { mu_q, lv_q, mu_p, lv_p, lo, hi } => {
                    let (mu_q, lv_q, mu_p, lv_p, lo, hi) = (*mu_q, *lv_q, *mu_p, *lv_p, *lo, *hi);
                    let gs = g[0];
                    let n = self.nodes[mu_q].val.len();
                    for j in 0..n {
                        let lqr = self.nodes[lv_q].val[j];
                        let lpr = self.nodes[lv_p].val[j];
                        let lq = clamp(lqr, lo, hi);
                        let lp = clamp(lpr, lo, hi);
                        let dm = self.nodes[mu_q].val[j] - self.nodes[mu_p].val[j];
                        let inv_p = (-lp).exp();
                        self.nodes[mu_q].grad[j] += gs * dm * inv_p;
                        self.nodes[mu_p].grad[j] -= gs * dm * inv_p;
                        if lqr > lo && lqr < hi {
                            self.nodes[lv_q].grad[j] += gs * 0.5 * ((lq - lp).exp() - 1.0);
                        }
                        if lpr > lo && lpr < hi {
                            self.nodes[lv_p].grad[j] +=
                                gs * 0.5 * (1.0 - (lq.exp() + dm * dm) * inv_p);
                        }
                    }
                }
                Op::LinComb { terms } => {
                    let terms = terms.clone();
                    let gs = g[0];
                    for (k, id) in terms {
                        self.nodes[id].grad[0] += gs * k;
                    }
                }
            }
            self.nodes[i].grad = g;
        }
    }

    /// Accumulate parameter gradients into `sinks[pid]` (flat, same layout as
    /// the parameter data).
    pub fn collect_param_grads(&self, sinks: &mut [Vec<f64>]) {
        for node in &self.nodes {
            if let Op::Param { pid } = node.op {
                let sink = &mut sinks[pid];
                for (s, g) in sink.iter_mut().zip(node.grad.iter()) {
                    *s += g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on a tiny composite graph.
    #[test]
    fn gradients_match_finite_differences() {
        let w = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let x = vec![0.9, -1.1];
        let target = vec![0.2, -0.3, 0.4];

        let eval = |w: &[f64], x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let wn = t.param(0, w);
            let xn = t.param(1, x);
            let y = t.matvec(wn, xn, 3, 2);
            let y = t.tanh(y);
            let s = t.sigmoid(y);
            let l = t.mul(y, s);
            t.sum_sq_diff(l, &target);
            t.scalar(t.nodes.len() - 1)
        };

        let mut t = Tape::new();
        let wn = t.param(0, &w);
        let xn = t.param(1, &x);
        let y = t.matvec(wn, xn, 3, 2);
        let y = t.tanh(y);
        let s = t.sigmoid(y);
        let l = t.mul(y, s);
        let loss = t.sum_sq_diff(l, &target);
        t.backward(loss);
        let mut grads = vec![vec![0.0; 6], vec![0.0; 2]];
        t.collect_param_grads(&mut grads);

        let h = 1e-6;
        for i in 0..6 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let num = (eval(&wp, &x) - eval(&wm, &x)) / (2.0 * h);
            let rel = (grads[0][i] - num).abs() / num.abs().max(1e-6);
            assert!(rel < 1e-6, "w[{i}]: analytic {} vs numeric {num}", grads[0][i]);
        }
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let num = (eval(&w, &xp) - eval(&w, &xm)) / (2.0 * h);
            let rel = (grads[1][i] - num).abs() / num.abs().max(1e-6);
            assert!(rel < 1e-6, "x[{i}]: analytic {} vs numeric {num}", grads[1][i]);
        }
    }

    #[test]
    fn masked_softmax_props() {
        let mut t = Tape::new();
        let a = t.input(&[1.0, 2.0, 3.0, 4.0]);
        let sm = t.masked_softmax(a, &[true, false, true, false]);
        let v = t.value(sm);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);

        // all masked -> zeros
        let mut t2 = Tape::new();
        let a2 = t2.input(&[1.0, 2.0]);
        let sm2 = t2.masked_softmax(a2, &[false, false]);
        assert_eq!(t2.value(sm2), &[0.0, 0.0]);
    }

    #[test]
    fn kl_zero_for_identical() {
        let mut t = Tape::new();
        let mu = t.input(&[0.3, -0.5]);
        let lv = t.input(&[-1.0, 0.5]);
        let kl = t.kl_diag(mu, lv, mu, lv, -6.0, 2.0);
        assert!(t.scalar(kl).abs() < 1e-12);
    }
}
