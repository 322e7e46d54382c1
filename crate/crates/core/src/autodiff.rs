//! A small reverse-mode tape over [`Mat`] values.
//!
//! Operations record their inputs (and whatever forward intermediates the
//! backward pass needs) as nodes appended to the tape. Nodes are created in
//! topological order, so `backward` walks them in reverse once.

use crate::losses::{self, ContrastiveConfig};
use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf {
        param: Option<usize>,
    },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Unfold {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    MaskFill {
        x: Var,
        fill: Var,
        mask: Vec<bool>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        heads: usize,
        max_rel: usize,
        valid: usize,
        probs: Vec<Mat>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
        valid: usize,
    },
    /// Scalar loss whose gradients w.r.t. its inputs were computed in forward.
    FusedLoss {
        inputs: Vec<(Var, Mat)>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: gradients per node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf tied to parameter slot `index`.
    pub fn param(&mut self, index: usize, value: Mat) -> Var {
        self.push(value, Op::Leaf { param: Some(index) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `x + bias` with a `1 x cols` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut value = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, value.cols), "bias shape");
        for r in 0..value.rows {
            for (o, bb) in value.row_mut(r).iter_mut().zip(&b.data) {
                *o += bb;
            }
        }
        self.push(value, Op::AddRow(x, bias))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut value = self.value(x).clone();
        value.scale(s);
        self.push(value, Op::Scale(x, s))
    }

    /// Elementwise product with a constant matrix (used for dropout).
    pub fn mul_const(&mut self, x: Var, c: Mat) -> Var {
        let mut value = self.value(x).clone();
        for (v, m) in value.data.iter_mut().zip(&c.data) {
            *v *= m;
        }
        self.push(value, Op::MulConst(x, c))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in &mut value.data {
            *v = gelu(*v);
        }
        self.push(value, Op::Gelu(x))
    }

    /// Row-wise layer normalization with `1 x cols` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in value.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row `t` of the output is rows `stride*t .. stride*t + kernel` of `x`
    /// concatenated, for every full window.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        assert!(xv.rows >= kernel, "unfold input shorter than kernel");
        let out_rows = (xv.rows - kernel) / stride + 1;
        let d = xv.cols;
        let mut value = Mat::zeros(out_rows, kernel * d);
        for t in 0..out_rows {
            let dst = value.row_mut(t);
            for j in 0..kernel {
                dst[j * d..(j + 1) * d].copy_from_slice(xv.row(stride * t + j));
            }
        }
        self.push(value, Op::Unfold { x, kernel, stride })
    }

    /// Rows with `mask[t]` set are replaced by the `1 x cols` vector `fill`.
    pub fn mask_fill(&mut self, x: Var, fill: Var, mask: Vec<bool>) -> Var {
        let mut value = self.value(x).clone();
        let f = self.value(fill).data.clone();
        assert_eq!(mask.len(), value.rows, "mask length");
        for (t, &m) in mask.iter().enumerate() {
            if m {
                value.row_mut(t).copy_from_slice(&f);
            }
        }
        self.push(value, Op::MaskFill { x, fill, mask })
    }

    /// Multi-head scaled dot-product attention with learned relative-position
    /// logit biases.
    ///
    /// `bias` is `heads x (2*max_rel + 1)`; the logit for query `t` and key `s`
    /// gets `bias[h][clip(t - s, -max_rel, max_rel) + max_rel]`. Keys at or
    /// beyond `valid` receive zero weight.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        heads: usize,
        max_rel: usize,
        valid: usize,
    ) -> Var {
        let (qv, kv, vv, bv) = (self.value(q), self.value(k), self.value(v), self.value(bias));
        let (t_len, d) = qv.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(t_len, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Mat::zeros(t_len, t_len);
            for t in 0..t_len {
                let qt = &qv.row(t)[cols.clone()];
                let row = p.row_mut(t);
                for s in 0..valid {
                    let rel = rel_index(t, s, max_rel);
                    row[s] = dot(qt, &kv.row(s)[cols.clone()]) * scale + bv.get(h, rel);
                }
                if valid > 0 {
                    crate::tensor::softmax_in_place(&mut row[..valid]);
                }
                let orow = &mut out.row_mut(t)[cols.clone()];
                for s in 0..valid {
                    let w = row[s];
                    for (o, x) in orow.iter_mut().zip(&vv.row(s)[cols.clone()]) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                max_rel,
                valid,
                probs,
            },
        )
    }

    /// Per-channel 1-D convolution over time with `same` padding; frames at
    /// or beyond `valid` are read as zeros. `w` is `kernel x cols` (odd
    /// kernel), `b` is `1 x cols`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var, valid: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t_len, d) = xv.shape();
        let kernel = wv.rows;
        let half = kernel / 2;
        let mut out = Mat::zeros(t_len, d);
        for t in 0..t_len {
            let orow = out.row_mut(t);
            orow.copy_from_slice(&bv.data);
            for j in 0..kernel {
                let Some(i) = (t + j).checked_sub(half) else {
                    continue;
                };
                if i >= valid.min(t_len) {
                    continue;
                }
                for ((o, ww), xx) in orow.iter_mut().zip(wv.row(j)).zip(xv.row(i)) {
                    *o += ww * xx;
                }
            }
        }
        self.push(out, Op::DepthwiseConv { x, w, b, valid })
    }

    /// Summed frame cross-entropy of `softmax(logits)` against `labels` over
    /// the first `labels.len()` rows. Returns the loss node and the number of
    /// clamped posteriors.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> (Var, usize) {
        let (loss, grad, clamped) = losses::cross_entropy_sum_with_grad(self.value(logits), labels);
        let node = self.push(
            Mat::scalar(loss),
            Op::FusedLoss {
                inputs: vec![(logits, grad)],
            },
        );
        (node, clamped)
    }

    /// Summed contrastive loss over `positions`, with `distractors[i]` the
    /// candidate negatives for `positions[i]`.
    pub fn contrastive(
        &mut self,
        contexts: Var,
        targets: Var,
        positions: &[usize],
        distractors: &[Vec<usize>],
        cfg: &ContrastiveConfig,
    ) -> Var {
        let terms = losses::contrastive_sum_with_grad(
            self.value(contexts),
            self.value(targets),
            positions,
            distractors,
            cfg,
        );
        self.push(
            Mat::scalar(terms.loss),
            Op::FusedLoss {
                inputs: vec![(contexts, terms.d_contexts), (targets, terms.d_targets)],
            },
        )
    }

    /// Backpropagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of the leaves bound to parameters, indexed by parameter slot.
    /// Parameters absent from the graph get `None`.
    pub fn param_grads(&self, grads: &Gradients, num_params: usize) -> Vec<Option<Mat>> {
        let mut out: Vec<Option<Mat>> = (0..num_params).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if let Some(g) = &grads.grads[i] {
                    match &mut out[p] {
                        Some(acc) => acc.add_assign(g),
                        slot @ None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul_nt(bv));
                accumulate(grads, *b, av.matmul_tn(g));
            }
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, g.clone());
                let mut db = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in db.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *bias, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, s) => {
                let mut d = g.clone();
                d.scale(*s);
                accumulate(grads, *x, d);
            }
            Op::MulConst(x, c) => {
                let mut d = g.clone();
                for (v, m) in d.data.iter_mut().zip(&c.data) {
                    *v *= m;
                }
                accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (o, &xx) in d.data.iter_mut().zip(&xv.data) {
                    *o *= gelu_grad(xx);
                }
                accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let (rows, cols) = g.shape();
                let mut dg = Mat::zeros(1, cols);
                let mut db = Mat::zeros(1, cols);
                let mut dx = Mat::zeros(rows, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    for c in 0..cols {
                        dg.data[c] += gr[c] * xr[c];
                        db.data[c] += gr[c];
                        dxhat[c] = gr[c] * gv.data[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx = dot(&dxhat, xr) / cols as f64;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dg);
                accumulate(grads, *beta, db);
            }
            Op::Unfold { x, kernel, stride } => {
                let xv = self.value(*x);
                let d = xv.cols;
                let mut dx = Mat::zeros(xv.rows, d);
                for t in 0..g.rows {
                    let gr = g.row(t);
                    for j in 0..*kernel {
                        for (o, v) in dx.row_mut(stride * t + j).iter_mut().zip(&gr[j * d..(j + 1) * d]) {
                            *o += v;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MaskFill { x, fill, mask } => {
                let mut dx = g.clone();
                let mut df = Mat::zeros(1, g.cols);
                for (t, &m) in mask.iter().enumerate() {
                    if m {
                        for (o, v) in df.data.iter_mut().zip(g.row(t)) {
                            *o += v;
                        }
                        dx.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *fill, df);
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                max_rel,
                valid,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (t_len, d) = qv.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros(t_len, d);
                let mut dk = Mat::zeros(t_len, d);
                let mut dv = Mat::zeros(t_len, d);
                let mut dbias = Mat::zeros(*heads, 2 * max_rel + 1);
                let mut dp = vec![0.0; *valid];
                for (h, p) in probs.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    for t in 0..t_len {
                        let gt = &g.row(t)[cols.clone()];
                        let pt = p.row(t);
                        for s in 0..*valid {
                            dp[s] = dot(gt, &vv.row(s)[cols.clone()]);
                            let w = pt[s];
                            for (o, gg) in dv.row_mut(s)[cols.clone()].iter_mut().zip(gt) {
                                *o += w * gg;
                            }
                        }
                        let inner: f64 = (0..*valid).map(|s| pt[s] * dp[s]).sum();
                        for s in 0..*valid {
                            let ds = pt[s] * (dp[s] - inner);
                            if ds == 0.0 {
                                continue;
                            }
                            dbias.data[h * (2 * max_rel + 1) + rel_index(t, s, *max_rel)] += ds;
                            let ks = &kv.row(s)[cols.clone()];
                            for (o, kk) in dq.row_mut(t)[cols.clone()].iter_mut().zip(ks) {
                                *o += ds * scale * kk;
                            }
                            let qt = &qv.row(t)[cols.clone()];
                            for (o, qq) in dk.row_mut(s)[cols.clone()].iter_mut().zip(qt) {
                                *o += ds * scale * qq;
                            }
                        }
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
                accumulate(grads, *bias, dbias);
            }
            Op::DepthwiseConv { x, w, b, valid } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t_len, d) = xv.shape();
                let kernel = wv.rows;
                let half = kernel / 2;
                let mut dx = Mat::zeros(t_len, d);
                let mut dw = Mat::zeros(kernel, d);
                let mut db = Mat::zeros(1, d);
                for t in 0..t_len {
                    let gr = g.row(t);
                    for (o, gg) in db.data.iter_mut().zip(gr) {
                        *o += gg;
                    }
                    for j in 0..kernel {
                        let Some(i) = (t + j).checked_sub(half) else {
                            continue;
                        };
                        if i >= (*valid).min(t_len) {
                            continue;
                        }
                        for c in 0..d {
                            dx.data[i * d + c] += wv.data[j * d + c] * gr[c];
                            dw.data[j * d + c] += xv.data[i * d + c] * gr[c];
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::FusedLoss { inputs } => {
                let upstream = g.data[0];
                for (var, local) in inputs {
                    let mut d = local.clone();
                    d.scale(upstream);
                    accumulate(grads, *var, d);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn rel_index(t: usize, s: usize, max_rel: usize) -> usize {
    let m = max_rel as i64;
    ((t as i64 - s as i64).clamp(-m, m) + m) as usize
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
