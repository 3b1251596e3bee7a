//! A small reverse-mode automatic differentiation tape over [`Mat`] values.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints. Nodes whose inputs are
//! all constants are marked as not requiring gradients and are skipped.
//!
//! Besides generic dense ops the tape has a few fused "segment" ops. A batch of
//! `B` videos with `n` frames each is stored as a `(B*n) x d` matrix, and the
//! segment ops work per video block without materialising slices.

use crate::tensor::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boundary handling for [`Graph::gaussian_conv`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Half-sample symmetric reflection: `x[-1] = x[0]`, `x[n] = x[n-1]`.
    #[default]
    Reflect,
    /// Wrap-around; used to check shift equivariance.
    Circular,
}

impl Padding {
    /// Maps a possibly out-of-range position onto `0..n`.
    #[inline]
    pub fn resolve(self, pos: isize, n: usize) -> usize {
        let n_i = n as isize;
        match self {
            Padding::Circular => pos.rem_euclid(n_i) as usize,
            Padding::Reflect => {
                let m = pos.rem_euclid(2 * n_i);
                if m < n_i {
                    m as usize
                } else {
                    (2 * n_i - 1 - m) as usize
                }
            }
        }
    }
}

/// Normalized truncated Gaussian kernel with half-width `ceil(3 sigma)`.
///
/// Returns the taps for offsets `-R..=R` and their derivatives w.r.t. sigma.
pub fn gaussian_kernel(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let radius = (3.0 * sigma).ceil().max(0.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    let k: Vec<f64> = taps.iter().map(|u| u / z).collect();
    let s3 = sigma * sigma * sigma;
    let weighted: f64 = (-radius..=radius)
        .zip(&k)
        .map(|(j, kj)| kj * (j * j) as f64 / s3)
        .sum();
    let dk = (-radius..=radius)
        .zip(&k)
        .map(|(j, kj)| kj * ((j * j) as f64 / s3 - weighted))
        .collect();
    (k, dk)
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        seg: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SegmentDot {
        frames: Var,
        query: Var,
        seg: usize,
    },
    SegmentPool {
        weights: Var,
        frames: Var,
    },
    GaussianConv {
        x: Var,
        log_sigma: Var,
        padding: Padding,
        kernel: Vec<f64>,
        dkernel: Vec<f64>,
        sigma: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    InfoNce {
        scores: Var,
        candidates: Vec<Vec<usize>>,
        probs: Vec<Vec<f64>>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// `None` when the variable does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients (parameters, or inputs under test).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds the `1 x c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(r));
        assert_eq!(rm.rows(), 1, "add_row expects a row vector");
        assert_eq!(am.cols(), rm.cols(), "add_row width mismatch");
        let mut value = am.clone();
        for i in 0..value.rows() {
            for (o, &b) in value.row_mut(i).iter_mut().zip(rm.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        self.push(value, Op::AddRow(a, r), rg)
    }

    /// Scales row `i` of `a` by `c[i]`, where `c` is `rows x 1`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(c));
        assert_eq!(cm.shape(), (am.rows(), 1), "mul_col expects a column vector");
        let mut value = am.clone();
        for i in 0..value.rows() {
            let s = cm.data()[i];
            for o in value.row_mut(i) {
                *o *= s;
            }
        }
        let rg = self.rg(a) || self.rg(c);
        self.push(value, Op::MulCol(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xm.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = xhat.clone();
        for i in 0..rows {
            for ((o, gj), bj) in value.row_mut(i).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gj + bj;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + pm.cols()].copy_from_slice(pm.row(i));
            }
            off += pm.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Builds a matrix whose row `r` is row `idx[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let am = self.value(a);
        let mut value = Mat::zeros(idx.len(), am.cols());
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(am.row(i));
        }
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    /// Multi-head scaled dot-product self-attention inside consecutive blocks
    /// of `seg` rows. `q`, `k`, `v` are `(B*seg) x d` with `d % heads == 0`.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, seg: usize, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qm.shape();
        assert!(seg > 0 && rows % seg == 0, "rows must be a multiple of the segment length");
        assert!(heads > 0 && d % heads == 0, "width must be divisible by the head count");
        assert_eq!(km.shape(), (rows, d));
        assert_eq!(vm.shape(), (rows, d));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = rows / seg;
        let mut probs = vec![0.0; blocks * heads * seg * seg];
        let mut value = Mat::zeros(rows, d);
        let (qd, kd, vd) = (qm.data(), km.data(), vm.data());
        let od = value.data_mut();
        for b in 0..blocks {
            for h in 0..heads {
                let base = (b * heads + h) * seg * seg;
                let col = h * dh;
                for i in 0..seg {
                    let qi = &qd[(b * seg + i) * d + col..(b * seg + i) * d + col + dh];
                    let prow = &mut probs[base + i * seg..base + (i + 1) * seg];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * seg + j) * d + col..(b * seg + j) * d + col + dh];
                        *p = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut od[(b * seg + i) * d + col..(b * seg + i) * d + col + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &vd[(b * seg + j) * d + col..(b * seg + j) * d + col + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            value,
            Op::SegmentAttention {
                q,
                k,
                v,
                seg,
                heads,
                probs,
            },
            rg,
        )
    }

    /// `out[b, i] = frames[b*seg + i] · query[b]`, giving a `B x seg` matrix.
    pub fn segment_dot(&mut self, frames: Var, query: Var, seg: usize) -> Var {
        let (fm, qm) = (self.value(frames), self.value(query));
        let blocks = qm.rows();
        assert_eq!(fm.rows(), blocks * seg, "segment_dot block count mismatch");
        assert_eq!(fm.cols(), qm.cols(), "segment_dot width mismatch");
        let mut value = Mat::zeros(blocks, seg);
        for b in 0..blocks {
            let qb = qm.row(b);
            for i in 0..seg {
                value[(b, i)] = crate::tensor::dot(fm.row(b * seg + i), qb);
            }
        }
        let rg = self.rg(frames) || self.rg(query);
        self.push(value, Op::SegmentDot { frames, query, seg }, rg)
    }

    /// `out[b] = Σ_i weights[b, i] · frames[b*seg + i]`, giving a `B x d` matrix.
    pub fn segment_pool(&mut self, weights: Var, frames: Var) -> Var {
        let (wm, fm) = (self.value(weights), self.value(frames));
        let (blocks, seg) = wm.shape();
        assert_eq!(fm.rows(), blocks * seg, "segment_pool block count mismatch");
        let mut value = Mat::zeros(blocks, fm.cols());
        for b in 0..blocks {
            for i in 0..seg {
                let w = wm[(b, i)];
                let src = fm.row(b * seg + i);
                for (o, x) in value.row_mut(b).iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(frames);
        self.push(value, Op::SegmentPool { weights, frames }, rg)
    }

    /// Convolves every row of `x` with a normalized Gaussian of width
    /// `exp(log_sigma)` (a `1 x 1` node), truncated at `ceil(3 sigma)` taps.
    pub fn gaussian_conv(&mut self, x: Var, log_sigma: Var, padding: Padding) -> Var {
        let sigma = self.value(log_sigma).item().exp();
        let (kernel, dkernel) = gaussian_kernel(sigma);
        let value = convolve_rows(self.value(x), &kernel, padding);
        let rg = self.rg(x) || self.rg(log_sigma);
        self.push(
            value,
            Op::GaussianConv {
                x,
                log_sigma,
                padding,
                kernel,
                dkernel,
                sigma,
            },
            rg,
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), targets.len(), "one target per row");
        let mut probs = lm.clone();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lm.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(probs.row_mut(i));
        }
        let n = targets.len().max(1) as f64;
        let rg = self.rg(logits);
        self.push(
            Mat::scalar(loss / n),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    /// Contrastive loss over a score matrix: for row `i`, the positive column
    /// `positives[i]` competes with the columns `negatives[i]`. Returns the
    /// mean over rows of `-log softmax(candidates)[positive]`.
    ///
    /// Negatives are summed in ascending column order, so the result does not
    /// depend on the order they were sampled in.
    pub fn info_nce(&mut self, scores: Var, positives: &[usize], negatives: &[Vec<usize>]) -> Var {
        let sm = self.value(scores);
        assert_eq!(sm.rows(), positives.len());
        assert_eq!(sm.rows(), negatives.len());
        let mut candidates = Vec::with_capacity(positives.len());
        let mut probs = Vec::with_capacity(positives.len());
        let mut loss = 0.0;
        for (i, (&p, negs)) in positives.iter().zip(negatives).enumerate() {
            let mut sorted = negs.clone();
            sorted.sort_unstable();
            let mut cand = Vec::with_capacity(sorted.len() + 1);
            cand.push(p);
            cand.extend(sorted);
            let row = sm.row(i);
            let mut s: Vec<f64> = cand.iter().map(|&c| row[c]).collect();
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - s[0];
            softmax_in_place(&mut s);
            candidates.push(cand);
            probs.push(s);
        }
        let n = positives.len().max(1) as f64;
        let rg = self.rg(scores);
        self.push(
            Mat::scalar(loss / n),
            Op::InfoNce {
                scores,
                candidates,
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Mat::scalar(m.sum() / m.len() as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    fn backprop(&self, node: &Node, gout: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    let ga = slot(grads, *a, val(*a));
                    gemm(false, true, 1.0, gout, val(*b), 1.0, ga);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, val(*b));
                    gemm(true, false, 1.0, val(*a), gout, 1.0, gb);
                }
            }
            Op::MatMulT(a, b) => {
                if rg(*a) {
                    let ga = slot(grads, *a, val(*a));
                    gemm(false, false, 1.0, gout, val(*b), 1.0, ga);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, val(*b));
                    gemm(true, false, 1.0, gout, val(*a), 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    slot(grads, *a, val(*a)).add_assign(gout);
                }
                if rg(*b) {
                    slot(grads, *b, val(*b)).add_assign(gout);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    slot(grads, *a, val(*a)).add_assign(gout);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, val(*b));
                    for (g, d) in gb.data_mut().iter_mut().zip(gout.data()) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let other = val(*b);
                    let ga = slot(grads, *a, val(*a));
                    for ((g, d), o) in ga.data_mut().iter_mut().zip(gout.data()).zip(other.data()) {
                        *g += d * o;
                    }
                }
                if rg(*b) {
                    let other = val(*a);
                    let gb = slot(grads, *b, val(*b));
                    for ((g, d), o) in gb.data_mut().iter_mut().zip(gout.data()).zip(other.data()) {
                        *g += d * o;
                    }
                }
            }
            Op::AddRow(a, r) => {
                if rg(*a) {
                    slot(grads, *a, val(*a)).add_assign(gout);
                }
                if rg(*r) {
                    let gr = slot(grads, *r, val(*r));
                    for i in 0..gout.rows() {
                        for (g, d) in gr.data_mut().iter_mut().zip(gout.row(i)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::MulCol(a, c) => {
                let (am, cm) = (val(*a), val(*c));
                if rg(*a) {
                    let ga = slot(grads, *a, am);
                    for i in 0..gout.rows() {
                        let s = cm.data()[i];
                        for (g, d) in ga.row_mut(i).iter_mut().zip(gout.row(i)) {
                            *g += d * s;
                        }
                    }
                }
                if rg(*c) {
                    let gc = slot(grads, *c, cm);
                    for i in 0..gout.rows() {
                        gc.data_mut()[i] += crate::tensor::dot(gout.row(i), am.row(i));
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, val(*a));
                for (g, d) in ga.data_mut().iter_mut().zip(gout.data()) {
                    *g += d * s;
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let ga = slot(grads, *a, x);
                for ((g, d), xv) in ga.data_mut().iter_mut().zip(gout.data()).zip(x.data()) {
                    *g += d * gelu_grad(*xv);
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, *a, val(*a));
                for ((g, d), y) in ga.data_mut().iter_mut().zip(gout.data()).zip(node.value.data()) {
                    *g += d * y * (1.0 - y);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, val(*a));
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row(i), gout.row(i));
                    let inner = crate::tensor::dot(yr, dr);
                    for ((g, yv), dv) in ga.row_mut(i).iter_mut().zip(yr).zip(dr) {
                        *g += yv * (dv - inner);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, val(*a));
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row(i), gout.row(i));
                    let total: f64 = dr.iter().sum();
                    for ((g, yv), dv) in ga.row_mut(i).iter_mut().zip(yr).zip(dr) {
                        *g += dv - yv.exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gm = val(*gain);
                let (rows, cols) = xhat.shape();
                if rg(*gain) {
                    let gg = slot(grads, *gain, gm);
                    for i in 0..rows {
                        for ((g, d), h) in gg.data_mut().iter_mut().zip(gout.row(i)).zip(xhat.row(i)) {
                            *g += d * h;
                        }
                    }
                }
                if rg(*bias) {
                    let gb = slot(grads, *bias, val(*bias));
                    for i in 0..rows {
                        for (g, d) in gb.data_mut().iter_mut().zip(gout.row(i)) {
                            *g += d;
                        }
                    }
                }
                if rg(*x) {
                    let gx = slot(grads, *x, val(*x));
                    let mut dxhat = vec![0.0; cols];
                    for i in 0..rows {
                        for ((o, d), g) in dxhat.iter_mut().zip(gout.row(i)).zip(gm.data()) {
                            *o = d * g;
                        }
                        let hr = xhat.row(i);
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dh = crate::tensor::dot(&dxhat, hr) / cols as f64;
                        for ((g, dv), h) in gx.row_mut(i).iter_mut().zip(&dxhat).zip(hr) {
                            *g += rstd[i] * (dv - mean_d - h * mean_dh);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if rg(p) {
                        let gp = slot(grads, p, val(p));
                        for i in 0..gout.rows() {
                            for (g, d) in gp.row_mut(i).iter_mut().zip(&gout.row(i)[off..off + w]) {
                                *g += d;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let ga = slot(grads, *a, val(*a));
                for (r, &i) in idx.iter().enumerate() {
                    for (g, d) in ga.row_mut(i).iter_mut().zip(gout.row(r)) {
                        *g += d;
                    }
                }
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                seg,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *seg, *heads, probs, gout, grads),
            Op::SegmentDot { frames, query, seg } => {
                let (fm, qm) = (val(*frames), val(*query));
                let blocks = qm.rows();
                if rg(*frames) {
                    let gf = slot(grads, *frames, fm);
                    for b in 0..blocks {
                        for i in 0..*seg {
                            let d = gout[(b, i)];
                            for (g, q) in gf.row_mut(b * seg + i).iter_mut().zip(qm.row(b)) {
                                *g += d * q;
                            }
                        }
                    }
                }
                if rg(*query) {
                    let gq = slot(grads, *query, qm);
                    for b in 0..blocks {
                        for i in 0..*seg {
                            let d = gout[(b, i)];
                            for (g, f) in gq.row_mut(b).iter_mut().zip(fm.row(b * seg + i)) {
                                *g += d * f;
                            }
                        }
                    }
                }
            }
            Op::SegmentPool { weights, frames } => {
                let (wm, fm) = (val(*weights), val(*frames));
                let (blocks, seg) = wm.shape();
                if rg(*weights) {
                    let gw = slot(grads, *weights, wm);
                    for b in 0..blocks {
                        for i in 0..seg {
                            gw[(b, i)] += crate::tensor::dot(gout.row(b), fm.row(b * seg + i));
                        }
                    }
                }
                if rg(*frames) {
                    let gf = slot(grads, *frames, fm);
                    for b in 0..blocks {
                        for i in 0..seg {
                            let w = wm[(b, i)];
                            for (g, d) in gf.row_mut(b * seg + i).iter_mut().zip(gout.row(b)) {
                                *g += w * d;
                            }
                        }
                    }
                }
            }
            Op::GaussianConv {
                x,
                log_sigma,
                padding,
                kernel,
                dkernel,
                sigma,
            } => {
                let xm = val(*x);
                let (rows, n) = xm.shape();
                let radius = (kernel.len() / 2) as isize;
                if rg(*x) {
                    let gx = slot(grads, *x, xm);
                    for b in 0..rows {
                        for i in 0..n {
                            let d = gout[(b, i)];
                            for (t, kv) in kernel.iter().enumerate() {
                                let p = padding.resolve(i as isize + t as isize - radius, n);
                                gx[(b, p)] += kv * d;
                            }
                        }
                    }
                }
                if rg(*log_sigma) {
                    let dconv = convolve_rows(xm, dkernel, *padding);
                    let dsigma = crate::tensor::dot(dconv.data(), gout.data());
                    slot(grads, *log_sigma, val(*log_sigma)).data_mut()[0] += dsigma * sigma;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = gout.item() / targets.len().max(1) as f64;
                let gl = slot(grads, *logits, val(*logits));
                for (i, &t) in targets.iter().enumerate() {
                    for (j, (g, p)) in gl.row_mut(i).iter_mut().zip(probs.row(i)).enumerate() {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        *g += scale * (p - onehot);
                    }
                }
            }
            Op::InfoNce {
                scores,
                candidates,
                probs,
            } => {
                let scale = gout.item() / candidates.len().max(1) as f64;
                let gs = slot(grads, *scores, val(*scores));
                for (i, (cand, p)) in candidates.iter().zip(probs).enumerate() {
                    for (j, (&c, pv)) in cand.iter().zip(p).enumerate() {
                        let target = if j == 0 { 1.0 } else { 0.0 };
                        gs[(i, c)] += scale * (pv - target);
                    }
                }
            }
            Op::Sum(a) => {
                let d = gout.item();
                for g in slot(grads, *a, val(*a)).data_mut() {
                    *g += d;
                }
            }
            Op::Mean(a) => {
                let am = val(*a);
                let d = gout.item() / am.len() as f64;
                for g in slot(grads, *a, am).data_mut() {
                    *g += d;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seg: usize,
        heads: usize,
        probs: &[f64],
        gout: &Mat,
        grads: &mut [Option<Mat>],
    ) {
        let (qm, km, vm) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (rows, d) = qm.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = rows / seg;
        let mut gq = Mat::zeros(rows, d);
        let mut gk = Mat::zeros(rows, d);
        let mut gv = Mat::zeros(rows, d);
        let mut dp = vec![0.0; seg];
        for b in 0..blocks {
            for h in 0..heads {
                let base = (b * heads + h) * seg * seg;
                let col = h * dh;
                let r = |i: usize| (b * seg + i) * d + col..(b * seg + i) * d + col + dh;
                for i in 0..seg {
                    let prow = &probs[base + i * seg..base + (i + 1) * seg];
                    let go = &gout.data()[r(i)];
                    for j in 0..seg {
                        dp[j] = crate::tensor::dot(go, &vm.data()[r(j)]);
                        let gvj = &mut gv.data_mut()[r(j)];
                        for (g, o) in gvj.iter_mut().zip(go) {
                            *g += prow[j] * o;
                        }
                    }
                    let inner = crate::tensor::dot(prow, &dp);
                    for j in 0..seg {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &km.data()[r(j)];
                        for (g, x) in gq.data_mut()[r(i)].iter_mut().zip(kj) {
                            *g += ds * x;
                        }
                        let qi = &qm.data()[r(i)];
                        for (g, x) in gk.data_mut()[r(j)].iter_mut().zip(qi) {
                            *g += ds * x;
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].requires_grad {
                slot(grads, var, &self.nodes[var.0].value).add_assign(&g);
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Mat>], v: Var, like: &Mat) -> &'a mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(like.rows(), like.cols()))
}

/// Row-wise correlation of `x` with an odd-length kernel centred on tap `len/2`.
pub(crate) fn convolve_rows(x: &Mat, kernel: &[f64], padding: Padding) -> Mat {
    let (rows, n) = x.shape();
    let radius = (kernel.len() / 2) as isize;
    let mut out = Mat::zeros(rows, n);
    for b in 0..rows {
        let src = x.row(b);
        let dst = out.row_mut(b);
        for (i, o) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * src[padding.resolve(i as isize + t as isize - radius, n)];
            }
            *o = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` w.r.t. every entry of `x`.
    fn numeric_grad(x: &Mat, f: &dyn Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        let diff = a.zip_map(b, |x, y| x - y).norm();
        diff / a.norm().max(b.norm()).max(1e-12)
    }

    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |vals: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|m| g.leaf(m.clone())).collect();
            let out = build(&mut g, &vars);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let w = Mat::randn(g.value(out).rows(), g.value(out).cols(), 1.0, &mut rng);
            let wv = g.constant(w);
            let prod = g.mul(out, wv);
            let s = g.sum(prod);
            (g, vars, s)
        };
        let (g, vars, s) = eval(&inputs);
        let grads = g.backward(s);
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or(Mat::zeros(inputs[k].rows(), inputs[k].cols()));
            let numeric = numeric_grad(&inputs[k], &|xk| {
                let mut vals = inputs.clone();
                vals[k] = xk.clone();
                let (g, _, s) = eval(&vals);
                g.value(s).item()
            });
            let e = rel_err(&analytic, &numeric);
            assert!(e < 1e-6, "input {k}: relative error {e}");
        }
    }

    fn rand_mats(shapes: &[(usize, usize)], seed: u64) -> Vec<Mat> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shapes.iter().map(|&(r, c)| Mat::randn(r, c, 1.0, &mut rng)).collect()
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        check(rand_mats(&[(3, 4), (4, 2)], 1), |g, v| g.matmul(v[0], v[1]));
        check(rand_mats(&[(3, 4), (5, 4)], 2), |g, v| g.matmul_t(v[0], v[1]));
        check(rand_mats(&[(3, 4), (1, 4)], 3), |g, v| g.add_row(v[0], v[1]));
        check(rand_mats(&[(3, 4), (3, 1)], 4), |g, v| g.mul_col(v[0], v[1]));
        check(rand_mats(&[(3, 4), (3, 4)], 5), |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.sub(a, v[1]);
            g.add(b, v[0])
        });
        check(rand_mats(&[(3, 4)], 6), |g, v| g.gelu(v[0]));
        check(rand_mats(&[(3, 4)], 7), |g, v| g.sigmoid(v[0]));
        check(rand_mats(&[(3, 4)], 8), |g, v| g.softmax_rows(v[0]));
        check(rand_mats(&[(3, 4)], 9), |g, v| g.log_softmax_rows(v[0]));
        check(rand_mats(&[(3, 5), (1, 5), (1, 5)], 10), |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        });
        check(rand_mats(&[(3, 2), (3, 3)], 11), |g, v| g.concat_cols(&[v[0], v[1]]));
        check(rand_mats(&[(3, 2)], 12), |g, v| g.gather_rows(v[0], vec![2, 0, 2, 1]));
        check(rand_mats(&[(3, 4)], 13), |g, v| {
            let s = g.scale(v[0], 0.3);
            g.mean(s)
        });
    }

    #[test]
    fn segment_ops_match_finite_differences() {
        check(rand_mats(&[(8, 4), (8, 4), (8, 4)], 20), |g, v| {
            g.segment_attention(v[0], v[1], v[2], 4, 2)
        });
        check(rand_mats(&[(6, 3), (2, 3)], 21), |g, v| g.segment_dot(v[0], v[1], 3));
        check(rand_mats(&[(2, 3), (6, 3)], 22), |g, v| g.segment_pool(v[0], v[1]));
    }

    #[test]
    fn gaussian_conv_matches_finite_differences() {
        for (padding, log_sigma) in [(Padding::Reflect, 0.1), (Padding::Circular, -0.4), (Padding::Reflect, 0.9)] {
            let mut inputs = rand_mats(&[(2, 7)], 30);
            inputs.push(Mat::scalar(log_sigma));
            check(inputs, move |g, v| g.gaussian_conv(v[0], v[1], padding));
        }
    }

    #[test]
    fn losses_match_finite_differences() {
        check(rand_mats(&[(4, 5)], 40), |g, v| g.cross_entropy(v[0], vec![0, 3, 4, 1]));
        check(rand_mats(&[(3, 4)], 41), |g, v| {
            g.info_nce(v[0], &[0, 1, 2], &[vec![1, 3], vec![0, 2], vec![3, 1]])
        });
    }

    #[test]
    fn reflect_padding_folds_repeatedly() {
        let p = Padding::Reflect;
        let got: Vec<usize> = (-5..9).map(|i| p.resolve(i, 3)).collect();
        assert_eq!(got, vec![1, 2, 2, 1, 0, 0, 1, 2, 2, 1, 0, 0, 1, 2]);
        assert_eq!(p.resolve(-7, 1), 0);
    }

    #[test]
    fn kernels_are_normalized() {
        for sigma in [0.1, 0.5, 1.0, 2.0, 5.0] {
            let (k, dk) = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(dk.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
