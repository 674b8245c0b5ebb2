//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op of one forward pass. Values are computed
//! eagerly; [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar root with respect to every node that needs one.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    UpsampleNearest(Var),
    UpsampleBilinear(Var),
    PointDot {
        a: Var,
        b: Var,
        scale: f64,
    },
    PairSoftmax {
        first: Var,
        second: Var,
    },
    ScalePoints {
        x: Var,
        weight: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ClassSum {
        x: Var,
        rows: Vec<Option<usize>>,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    AdaptiveSoftmax {
        first: Var,
        second: Var,
        targets: Vec<Option<usize>>,
        probs_first: Vec<f64>,
        probs_second: Vec<f64>,
        count: usize,
    },
    IdentityCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A tracked leaf bound to a parameter in `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.variable(store.get(id).clone());
        self.params.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradients of every parameter bound with [`Graph::param`], summed over
    /// repeated bindings of the same parameter.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for &(id, v) in &self.params {
            if let Some(g) = grads.get(v) {
                out[id.index()].add_assign(g);
            }
        }
        out
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (_, _, cin) = self.value(x).dims3();
        let ws = self.value(weight).shape();
        if ws.len() != 4 || ws[0] != ws[1] {
            return Err(Error::ShapeMismatch(format!("conv weight shape {ws:?}")));
        }
        if ws[2] != cin {
            return Err(Error::ChannelMismatch {
                expected: ws[2],
                actual: cin,
            });
        }
        let value = kernels::conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        );
        let ng = self.ng(x) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                pad,
            },
            ng,
        ))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xt = self.value(x);
        let (h, w, c) = xt.dims3();
        assert!(groups > 0 && c % groups == 0, "groups {groups} must divide {c}");
        let cpg = c / groups;
        let n = (h * w * cpg) as f64;
        let mut mean = vec![0.0; groups];
        let mut var = vec![0.0; groups];
        for px in xt.data().chunks(c) {
            for (ch, &v) in px.iter().enumerate() {
                mean[ch / cpg] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for px in xt.data().chunks(c) {
            for (ch, &v) in px.iter().enumerate() {
                let d = v - mean[ch / cpg];
                var[ch / cpg] += d * d;
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v / n + NORM_EPS).sqrt()).collect();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = xt.data().to_vec();
        for px in out.chunks_mut(c) {
            for (ch, v) in px.iter_mut().enumerate() {
                let g = ch / cpg;
                *v = (*v - mean[g]) * rstd[g] * gm[ch] + bt[ch];
            }
        }
        let value = Tensor::from_vec(vec![h, w, c], out).expect("shape");
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            ng,
        )
    }

    /// Normalizes each row of a `[n, d]` tensor, then applies a per-column
    /// affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xt = self.value(x);
        let (n, d) = xt.dims2();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut mean = Vec::with_capacity(n);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in xt.data().chunks(d) {
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
            let r = 1.0 / (v + NORM_EPS).sqrt();
            out.extend(row.iter().enumerate().map(|(j, x)| (x - m) * r * gm[j] + bt[j]));
            mean.push(m);
            rstd.push(r);
        }
        let value = Tensor::from_vec(vec![n, d], out).expect("shape");
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *x -= y;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, factor), ng)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 - v);
        let ng = self.ng(x);
        self.push(value, Op::OneMinus(x), ng)
    }

    /// Nearest-neighbour resampling of a feature map to `(height, width)`.
    pub fn upsample_nearest(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xt = self.value(x);
        let (h, w, c) = xt.dims3();
        let xs = xt.data();
        let mut out = Vec::with_capacity(height * width * c);
        for oy in 0..height {
            let iy = kernels::nearest_index(oy, h, height);
            for ox in 0..width {
                let ix = kernels::nearest_index(ox, w, width);
                out.extend_from_slice(&xs[(iy * w + ix) * c..][..c]);
            }
        }
        let value = Tensor::from_vec(vec![height, width, c], out).expect("shape");
        let ng = self.ng(x);
        self.push(value, Op::UpsampleNearest(x), ng)
    }

    /// Half-pixel-centred bilinear resampling to `(height, width)`.
    pub fn upsample_bilinear(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xt = self.value(x);
        let (h, w, c) = xt.dims3();
        let ty = kernels::bilinear_taps(h, height);
        let tx = kernels::bilinear_taps(w, width);
        let xs = xt.data();
        let mut out = vec![0.0; height * width * c];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = &mut out[(oy * width + ox) * c..][..c];
                for (iy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (ix, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let src = &xs[(iy * w + ix) * c..][..c];
                        for (a, v) in o.iter_mut().zip(src) {
                            *a += wgt * v;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![height, width, c], out).expect("shape");
        let ng = self.ng(x);
        self.push(value, Op::UpsampleBilinear(x), ng)
    }

    /// Per-point inner product of two `[H, W, C]` maps, times `scale`,
    /// giving `[H, W, 1]`.
    pub fn point_dot(&mut self, a: Var, b: Var, scale: f64) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape(), bt.shape(), "point_dot shapes");
        let (h, w, c) = at.dims3();
        let out: Vec<f64> = at
            .data()
            .chunks(c)
            .zip(bt.data().chunks(c))
            .map(|(x, y)| scale * kernels::dot(x, y))
            .collect();
        let value = Tensor::from_vec(vec![h, w, 1], out).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::PointDot { a, b, scale }, ng)
    }

    /// First component of a softmax taken jointly over the pair
    /// `(first, second)` at each point, i.e. `e^a / (e^a + e^b)`.
    pub fn pair_softmax(&mut self, first: Var, second: Var) -> Var {
        let (ft, st) = (self.value(first), self.value(second));
        assert_eq!(ft.shape(), st.shape(), "pair_softmax shapes");
        let out: Vec<f64> = ft
            .data()
            .iter()
            .zip(st.data())
            .map(|(&a, &b)| {
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                ea / (ea + eb)
            })
            .collect();
        let value = Tensor::from_vec(ft.shape().to_vec(), out).expect("shape");
        let ng = self.ng(first) || self.ng(second);
        self.push(value, Op::PairSoftmax { first, second }, ng)
    }

    /// Multiplies every channel at a point by that point's scalar weight.
    pub fn scale_points(&mut self, x: Var, weight: Var) -> Var {
        let (xt, wt) = (self.value(x), self.value(weight));
        let (h, w, c) = xt.dims3();
        assert_eq!(wt.shape(), [h, w, 1], "scale_points weight shape");
        let mut out = xt.data().to_vec();
        for (px, &s) in out.chunks_mut(c).zip(wt.data()) {
            px.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::from_vec(vec![h, w, c], out).expect("shape");
        let ng = self.ng(x) || self.ng(weight);
        self.push(value, Op::ScalePoints { x, weight }, ng)
    }

    /// `a · b` (or `a · bᵀ` when `transpose_b`) for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (n, k) = self.value(a).dims2();
        let bt = if transpose_b {
            transpose(self.value(b))
        } else {
            self.value(b).clone()
        };
        let (k2, m) = bt.dims2();
        assert_eq!(k, k2, "matmul inner dims");
        let out = kernels::matmul(self.value(a).data(), bt.data(), n, k, m);
        let value = Tensor::from_vec(vec![n, m], out).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, transpose_b }, ng)
    }

    /// Adds a `[m]` bias to every row of a `[.., m]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let bt = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        let m = *value.shape().last().expect("non-scalar");
        assert_eq!(bt.len(), m, "bias length");
        for row in value.data_mut().chunks_mut(m) {
            for (v, b) in row.iter_mut().zip(&bt) {
                *v += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddBias { x, bias }, ng)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (n, d) = xt.dims2();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in xt.data().chunks(d) {
            let norm = kernels::dot(row, row).sqrt().max(L2_EPS);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::from_vec(vec![n, d], out).expect("shape");
        let ng = self.ng(x);
        self.push(value, Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Sums pixel feature vectors into `row_count` rows; `rows[p]` names the
    /// destination row of pixel `p`, `None` drops it.
    pub fn class_sum(&mut self, x: Var, rows: Vec<Option<usize>>, row_count: usize) -> Var {
        let xt = self.value(x);
        let (h, w, c) = xt.dims3();
        assert_eq!(rows.len(), h * w, "one row assignment per pixel");
        let mut out = vec![0.0; row_count * c];
        for (px, r) in xt.data().chunks(c).zip(&rows) {
            if let Some(r) = *r {
                for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(px) {
                    *o += v;
                }
            }
        }
        let value = Tensor::from_vec(vec![row_count, c], out).expect("shape");
        let ng = self.ng(x);
        self.push(value, Op::ClassSum { x, rows }, ng)
    }

    /// Mean negative log-softmax of the target class over pixels whose
    /// target is `Some`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let lt = self.value(logits);
        let k = *lt.shape().last().expect("non-scalar");
        assert_eq!(targets.len() * k, lt.len(), "one target per pixel");
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::NoLabeledPixels);
        }
        let mut probs = vec![0.0; lt.len()];
        let mut total = 0.0;
        for ((row, p), t) in lt.data().chunks(k).zip(probs.chunks_mut(k)).zip(&targets) {
            if let Some(t) = *t {
                total -= log_softmax_at(row, t);
                kernels::softmax_into(row, p);
            }
        }
        let value = Tensor::scalar(total / count as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::MaskedCrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean of `-ln max(p_first[t], p_second[t])` over targeted pixels, with
    /// each branch's probabilities from its own softmax. Ties select `first`.
    pub fn adaptive_softmax(
        &mut self,
        first: Var,
        second: Var,
        targets: Vec<Option<usize>>,
    ) -> Result<Var> {
        let (ft, st) = (self.value(first), self.value(second));
        assert_eq!(ft.shape(), st.shape(), "adaptive softmax shapes");
        let k = *ft.shape().last().expect("non-scalar");
        assert_eq!(targets.len() * k, ft.len(), "one target per pixel");
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::NoLabeledPixels);
        }
        let mut probs_first = vec![0.0; ft.len()];
        let mut probs_second = vec![0.0; st.len()];
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let span = i * k..(i + 1) * k;
                let (lf, ls) = (log_softmax_at(&ft.data()[span.clone()], t), log_softmax_at(&st.data()[span.clone()], t));
                total -= lf.max(ls);
                kernels::softmax_into(&ft.data()[span.clone()], &mut probs_first[span.clone()]);
                kernels::softmax_into(&st.data()[span.clone()], &mut probs_second[span]);
            }
        }
        let value = Tensor::scalar(total / count as f64);
        let ng = self.ng(first) || self.ng(second);
        Ok(self.push(
            value,
            Op::AdaptiveSoftmax {
                first,
                second,
                targets,
                probs_first,
                probs_second,
                count,
            },
            ng,
        ))
    }

    /// Cross-entropy of a square `[n, n]` logit matrix against the identity
    /// pairing (row `i` targets column `i`), averaged over rows.
    pub fn identity_cross_entropy(&mut self, logits: Var) -> Var {
        let lt = self.value(logits);
        let (n, m) = lt.dims2();
        assert_eq!(n, m, "identity cross-entropy needs a square matrix");
        let mut probs = vec![0.0; n * n];
        let mut total = 0.0;
        for (i, (row, p)) in lt.data().chunks(n).zip(probs.chunks_mut(n)).enumerate() {
            total -= log_softmax_at(row, i);
            kernels::softmax_into(row, p);
        }
        let value = Tensor::scalar(if n == 0 { 0.0 } else { total / n as f64 });
        let ng = self.ng(logits);
        self.push(value, Op::IdentityCrossEntropy { logits, probs }, ng)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                pad,
            } => {
                let xt = self.value(x);
                let wt = self.value(weight);
                if self.ng(x) {
                    acc(
                        x,
                        kernels::conv2d_backward_input(g, wt, xt.dims3(), stride, pad),
                    );
                }
                if self.ng(weight) {
                    acc(
                        weight,
                        kernels::conv2d_backward_weight(g, xt, wt.shape()[0], stride, pad),
                    );
                }
                if let Some(b) = bias {
                    let db = kernels::sum_channels(g);
                    acc(b, Tensor::from_vec(vec![db.len()], db).expect("shape"));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xt = self.value(*x);
                let gm = self.value(*gamma).data();
                let (h, w, c) = xt.dims3();
                let cpg = c / groups;
                let n = (h * w * cpg) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; *groups];
                let mut sum_dxhat_xhat = vec![0.0; *groups];
                for (px, gp) in xt.data().chunks(c).zip(g.data().chunks(c)) {
                    for ch in 0..c {
                        let grp = ch / cpg;
                        let xhat = (px[ch] - mean[grp]) * rstd[grp];
                        dgamma[ch] += gp[ch] * xhat;
                        dbeta[ch] += gp[ch];
                        let dxhat = gp[ch] * gm[ch];
                        sum_dxhat[grp] += dxhat;
                        sum_dxhat_xhat[grp] += dxhat * xhat;
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; xt.len()];
                    for ((d, px), gp) in dx.chunks_mut(c).zip(xt.data().chunks(c)).zip(g.data().chunks(c)) {
                        for ch in 0..c {
                            let grp = ch / cpg;
                            let xhat = (px[ch] - mean[grp]) * rstd[grp];
                            let dxhat = gp[ch] * gm[ch];
                            d[ch] = rstd[grp] / n
                                * (n * dxhat - sum_dxhat[grp] - xhat * sum_dxhat_xhat[grp]);
                        }
                    }
                    acc(*x, Tensor::from_vec(vec![h, w, c], dx).expect("shape"));
                }
                acc(*gamma, Tensor::from_vec(vec![c], dgamma).expect("shape"));
                acc(*beta, Tensor::from_vec(vec![c], dbeta).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xt = self.value(*x);
                let gm = self.value(*gamma).data();
                let (rows, d) = xt.dims2();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; rows * d];
                for (r, ((px, gp), dr)) in xt
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let xhat = (px[j] - mean[r]) * rstd[r];
                        dgamma[j] += gp[j] * xhat;
                        dbeta[j] += gp[j];
                        let dxhat = gp[j] * gm[j];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                    }
                    let n = d as f64;
                    for j in 0..d {
                        let xhat = (px[j] - mean[r]) * rstd[r];
                        dr[j] = rstd[r] / n * (n * gp[j] * gm[j] - s1 - xhat * s2);
                    }
                }
                acc(*x, Tensor::from_vec(vec![rows, d], dx).expect("shape"));
                acc(*gamma, Tensor::from_vec(vec![d], dgamma).expect("shape"));
                acc(*beta, Tensor::from_vec(vec![d], dbeta).expect("shape"));
            }
            &Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(x, dx);
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|v| -v));
            }
            &Op::Scale(x, f) => acc(x, g.map(|v| v * f)),
            &Op::OneMinus(x) => acc(x, g.map(|v| -v)),
            &Op::UpsampleNearest(x) => {
                let (h, w, c) = self.value(x).dims3();
                let (ho, wo, _) = g.dims3();
                let mut dx = vec![0.0; h * w * c];
                for oy in 0..ho {
                    let iy = kernels::nearest_index(oy, h, ho);
                    for ox in 0..wo {
                        let ix = kernels::nearest_index(ox, w, wo);
                        let src = &g.data()[(oy * wo + ox) * c..][..c];
                        for (d, v) in dx[(iy * w + ix) * c..][..c].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                acc(x, Tensor::from_vec(vec![h, w, c], dx).expect("shape"));
            }
            &Op::UpsampleBilinear(x) => {
                let (h, w, c) = self.value(x).dims3();
                let (ho, wo, _) = g.dims3();
                let ty = kernels::bilinear_taps(h, ho);
                let tx = kernels::bilinear_taps(w, wo);
                let mut dx = vec![0.0; h * w * c];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let src = &g.data()[(oy * wo + ox) * c..][..c];
                        for (iy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                            for (ix, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                let wgt = wy * wx;
                                if wgt == 0.0 {
                                    continue;
                                }
                                for (d, v) in dx[(iy * w + ix) * c..][..c].iter_mut().zip(src) {
                                    *d += wgt * v;
                                }
                            }
                        }
                    }
                }
                acc(x, Tensor::from_vec(vec![h, w, c], dx).expect("shape"));
            }
            &Op::PointDot { a, b, scale } => {
                let (at, bt) = (self.value(a), self.value(b));
                let c = at.dims3().2;
                let spread = |other: &Tensor| {
                    let mut d = other.clone();
                    for (px, &gv) in d.data_mut().chunks_mut(c).zip(g.data()) {
                        px.iter_mut().for_each(|v| *v *= gv * scale);
                    }
                    d
                };
                if self.ng(a) {
                    acc(a, spread(bt));
                }
                if self.ng(b) {
                    acc(b, spread(at));
                }
            }
            &Op::PairSoftmax { first, second } => {
                let d: Vec<f64> = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&p, &gv)| gv * p * (1.0 - p))
                    .collect();
                let shape = node.value.shape().to_vec();
                acc(first, Tensor::from_vec(shape.clone(), d.clone()).expect("shape"));
                acc(second, Tensor::from_vec(shape, d.iter().map(|v| -v).collect()).expect("shape"));
            }
            &Op::ScalePoints { x, weight } => {
                let (xt, wt) = (self.value(x), self.value(weight));
                let c = xt.dims3().2;
                if self.ng(x) {
                    let mut dx = g.clone();
                    for (px, &s) in dx.data_mut().chunks_mut(c).zip(wt.data()) {
                        px.iter_mut().for_each(|v| *v *= s);
                    }
                    acc(x, dx);
                }
                if self.ng(weight) {
                    let dw: Vec<f64> = g
                        .data()
                        .chunks(c)
                        .zip(xt.data().chunks(c))
                        .map(|(gp, xp)| kernels::dot(gp, xp))
                        .collect();
                    acc(weight, Tensor::from_vec(wt.shape().to_vec(), dw).expect("shape"));
                }
            }
            &Op::MatMul { a, b, transpose_b } => {
                let (at, bt) = (self.value(a), self.value(b));
                let (n, k) = at.dims2();
                let m = g.dims2().1;
                // out = a · B with B = b or bᵀ (B is [k, m]).
                let big_b = if transpose_b { transpose(bt) } else { bt.clone() };
                if self.ng(a) {
                    let da = kernels::matmul(g.data(), transpose(&big_b).data(), n, m, k);
                    acc(a, Tensor::from_vec(vec![n, k], da).expect("shape"));
                }
                if self.ng(b) {
                    // dB = aᵀ · g is [k, m]; db = dB or dBᵀ.
                    let db = kernels::matmul(transpose(at).data(), g.data(), k, n, m);
                    let db = Tensor::from_vec(vec![k, m], db).expect("shape");
                    acc(b, if transpose_b { transpose(&db) } else { db });
                }
            }
            &Op::AddBias { x, bias } => {
                acc(x, g.clone());
                let db = kernels::sum_channels(g);
                acc(bias, Tensor::from_vec(vec![db.len()], db).expect("shape"));
            }
            Op::L2NormalizeRows { x, norms } => {
                let (n, d) = node.value.dims2();
                let mut dx = vec![0.0; n * d];
                for (((dr, y), gr), &norm) in dx
                    .chunks_mut(d)
                    .zip(node.value.data().chunks(d))
                    .zip(g.data().chunks(d))
                    .zip(norms)
                {
                    if norm <= L2_EPS {
                        dr.iter_mut().zip(gr).for_each(|(a, b)| *a = b / norm);
                        continue;
                    }
                    let proj = kernels::dot(gr, y);
                    for j in 0..d {
                        dr[j] = (gr[j] - y[j] * proj) / norm;
                    }
                }
                acc(*x, Tensor::from_vec(vec![n, d], dx).expect("shape"));
            }
            Op::ClassSum { x, rows } => {
                let xt = self.value(*x);
                let c = xt.dims3().2;
                let mut dx = vec![0.0; xt.len()];
                for (d, r) in dx.chunks_mut(c).zip(rows) {
                    if let Some(r) = *r {
                        d.copy_from_slice(&g.data()[r * c..(r + 1) * c]);
                    }
                }
                acc(*x, Tensor::from_vec(xt.shape().to_vec(), dx).expect("shape"));
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let lt = self.value(*logits);
                let k = *lt.shape().last().expect("non-scalar");
                let scale = g.item() / *count as f64;
                let mut d = vec![0.0; lt.len()];
                for ((dr, p), t) in d.chunks_mut(k).zip(probs.chunks(k)).zip(targets) {
                    if let Some(t) = *t {
                        for j in 0..k {
                            dr[j] = scale * (p[j] - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
                acc(*logits, Tensor::from_vec(lt.shape().to_vec(), d).expect("shape"));
            }
            Op::AdaptiveSoftmax {
                first,
                second,
                targets,
                probs_first,
                probs_second,
                count,
            } => {
                let shape = self.value(*first).shape().to_vec();
                let k = *shape.last().expect("non-scalar");
                let scale = g.item() / *count as f64;
                let mut d_first = vec![0.0; probs_first.len()];
                let mut d_second = vec![0.0; probs_second.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let span = i * k..(i + 1) * k;
                    let (pf, ps) = (&probs_first[span.clone()], &probs_second[span.clone()]);
                    let (p, d) = if pf[t] >= ps[t] {
                        (pf, &mut d_first[span])
                    } else {
                        (ps, &mut d_second[span])
                    };
                    for j in 0..k {
                        d[j] = scale * (p[j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                acc(*first, Tensor::from_vec(shape.clone(), d_first).expect("shape"));
                acc(*second, Tensor::from_vec(shape, d_second).expect("shape"));
            }
            Op::IdentityCrossEntropy { logits, probs } => {
                let n = node_rows(self.value(*logits));
                if n == 0 {
                    return;
                }
                let scale = g.item() / n as f64;
                let mut d = probs.clone();
                for (i, row) in d.chunks_mut(n).enumerate() {
                    row[i] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, Tensor::from_vec(vec![n, n], d).expect("shape"));
            }
        }
    }
}

fn node_rows(t: &Tensor) -> usize {
    t.shape()[0]
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[t] - lse
}

pub(crate) fn transpose(t: &Tensor) -> Tensor {
    let (n, m) = t.dims2();
    let src = t.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = src[i * m + j];
        }
    }
    Tensor::from_vec(vec![m, n], out).expect("shape")
}
