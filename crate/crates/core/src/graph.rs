//! Reverse-mode autodiff over 2-D tensors.
//!
//! Values are computed eagerly as ops are recorded; `backward` walks the
//! tape once in reverse. The op set is exactly what the model and losses
//! need: dense linear algebra, a few fused numerically-stable reductions
//! (masked NLL, BCE-with-logits, layer norm, causal softmax), and the
//! gather/scatter ops that implement token embedding, visual-row
//! injection, and hidden-state extraction.
//!
//! Shape errors here are programming errors and panic; the public model
//! APIs validate their inputs and return typed errors before building a
//! graph.

use alloc::vec;
use alloc::vec::Vec;

use crate::mathfn;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MinElem(Var, Var),
    MaxElem(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    AddRow(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    WeightedSum(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mu: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalSoftmax {
        x: Var,
        window: usize,
    },
    MaskedNllMean {
        logits: Var,
        targets: Vec<u32>,
        row_mask: Vec<bool>,
    },
    BceWithLogitsMean {
        logits: Var,
        target: Vec<bool>,
    },
    GatherRows {
        x: Var,
        ids: Vec<usize>,
    },
    OverwriteRows {
        base: Var,
        patch: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    Reindex {
        x: Var,
        perm: Vec<usize>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        grid: (usize, usize),
    },
    IndexScalar {
        x: Var,
        idx: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Gradient of the last `backward` target w.r.t. `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    // ---- elementwise ----

    fn binary_same_shape(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data
            .iter()
            .zip(tb.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| if x <= y { x } else { y }, Op::MinElem(a, b))
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| if x >= y { x } else { y }, Op::MaxElem(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|&x| x + c).collect());
        self.push(t, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|&x| x * c).collect());
        self.push(t, Op::MulScalar(a, c))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|&x| f(x)).collect());
        self.push(t, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, mathfn::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, mathfn::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, mathfn::abs, Op::Abs(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul(self.value(b));
        self.push(t, Op::Matmul(a, b))
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "matmul_nt shape mismatch");
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        for i in 0..ta.rows {
            let ra = ta.row(i);
            for j in 0..tb.rows {
                let rb = tb.row(j);
                let mut acc = 0.0;
                for k in 0..ta.cols {
                    acc += ra[k] * rb[k];
                }
                out.set(i, j, acc);
            }
        }
        self.push(out, Op::MatmulNT(a, b))
    }

    /// Broadcasts a `1xn` row onto every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let t = self.value(a).add_row(self.value(row));
        self.push(t, Op::AddRow(a, row))
    }

    /// `x @ w + b`, the everywhere-used affine map.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let m = self.matmul(x, w);
        self.add_row(m, b)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s: f64 = ta.data.iter().sum();
        let n = ta.len() as f64;
        self.push(Tensor::scalar(s / n), Op::MeanAll(a))
    }

    /// Σ w_i · x_i with constant weights (dice intersection etc.).
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.len(), weights.len(), "weighted_sum length mismatch");
        let s: f64 = ta.data.iter().zip(weights.iter()).map(|(&x, &w)| x * w).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(a, weights))
    }

    // ---- fused neural ops ----

    /// Per-row layer norm with learned gain/bias (both `1xn`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        assert_eq!(self.value(gain).shape(), (1, cols));
        assert_eq!(self.value(bias).shape(), (1, cols));
        let g = self.value(gain).data.clone();
        let b = self.value(bias).data.clone();
        let mut out = Tensor::zeros(rows, cols);
        let mut mu = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let m = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / cols as f64;
            let rs = 1.0 / mathfn::sqrt(var + EPS);
            mu[r] = m;
            rstd[r] = rs;
            for c in 0..cols {
                out.set(r, c, (row[c] - m) * rs * g[c] + b[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, mu, rstd })
    }

    /// Row-wise softmax over a causal (optionally windowed) [LxL] score
    /// matrix: row i sees columns j with j <= i and i - j < window.
    /// Masked entries come out exactly zero.
    pub fn causal_softmax(&mut self, x: Var, window: usize) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        assert_eq!(rows, cols, "causal_softmax expects square scores");
        assert!(window >= 1);
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let lo = i.saturating_sub(window - 1);
            let row = tx.row(i);
            let mut mx = f64::NEG_INFINITY;
            for j in lo..=i {
                if row[j] > mx {
                    mx = row[j];
                }
            }
            let mut denom = 0.0;
            for j in lo..=i {
                denom += mathfn::exp(row[j] - mx);
            }
            for j in lo..=i {
                out.set(i, j, mathfn::exp(row[j] - mx) / denom);
            }
        }
        self.push(out, Op::CausalSoftmax { x, window })
    }

    /// Mean over masked rows of `logsumexp(row) - row[target]`.
    ///
    /// Row i scores the prediction of `targets[i]`; the caller aligns rows
    /// and targets (the LM shifts by one position before calling).
    pub fn masked_nll_mean(&mut self, logits: Var, targets: Vec<u32>, row_mask: Vec<bool>) -> Var {
        let tl = self.value(logits);
        let (rows, vocab) = tl.shape();
        assert_eq!(targets.len(), rows);
        assert_eq!(row_mask.len(), rows);
        let n_masked = row_mask.iter().filter(|&&m| m).count();
        assert!(n_masked > 0, "masked_nll_mean with empty mask");
        let mut total = 0.0;
        for i in 0..rows {
            if !row_mask[i] {
                continue;
            }
            let t = targets[i] as usize;
            assert!(t < vocab, "target id out of vocab");
            let row = tl.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + mathfn::ln(row.iter().map(|&v| mathfn::exp(v - mx)).sum::<f64>());
            total += lse - row[t];
        }
        self.push(
            Tensor::scalar(total / n_masked as f64),
            Op::MaskedNllMean { logits, targets, row_mask },
        )
    }

    /// Mean binary cross-entropy from logits, in the stable
    /// `max(z,0) - z*t + ln(1 + e^-|z|)` form.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: Vec<bool>) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.len(), target.len(), "bce target length mismatch");
        let n = tl.len() as f64;
        let mut total = 0.0;
        for (&z, &t) in tl.data.iter().zip(target.iter()) {
            let tv = if t { 1.0 } else { 0.0 };
            total += z.max(0.0) - z * tv + mathfn::ln_1p(mathfn::exp(-mathfn::abs(z)));
        }
        self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogitsMean { logits, target },
        )
    }

    // ---- gather / scatter / layout ----

    pub fn gather_rows(&mut self, x: Var, ids: Vec<usize>) -> Var {
        let tx = self.value(x);
        let mut out = Tensor::zeros(ids.len(), tx.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tx.rows, "gather_rows id out of range");
            out.row_mut(r).copy_from_slice(tx.row(id));
        }
        self.push(out, Op::GatherRows { x, ids })
    }

    /// Copy of `base` with rows [start, start+patch.rows) replaced by
    /// `patch`; the visual-token injection primitive.
    pub fn overwrite_rows(&mut self, base: Var, patch: Var, start: usize) -> Var {
        let (tb, tp) = (self.value(base), self.value(patch));
        assert_eq!(tb.cols, tp.cols, "overwrite_rows width mismatch");
        assert!(start + tp.rows <= tb.rows, "overwrite_rows out of range");
        let mut out = tb.clone();
        for r in 0..tp.rows {
            out.row_mut(start + r).copy_from_slice(tp.row(r));
        }
        self.push(out, Op::OverwriteRows { base, patch, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut r0 = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.cols, cols, "concat_rows width mismatch");
            for r in 0..tp.rows {
                out.row_mut(r0 + r).copy_from_slice(tp.row(r));
            }
            r0 += tp.rows;
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + tp.cols].copy_from_slice(tp.row(r));
            }
            c0 += tp.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(start + len <= tx.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(tx.rows, len);
        for r in 0..tx.rows {
            out.row_mut(r).copy_from_slice(&tx.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start, len })
    }

    /// Fixed permutation: `out.data[i] = x.data[perm[i]]`. Used to
    /// rearrange per-patch pixel blocks into a full image.
    pub fn reindex(&mut self, x: Var, perm: Vec<usize>, rows: usize, cols: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(perm.len(), rows * cols, "reindex size mismatch");
        let data: Vec<f64> = perm
            .iter()
            .map(|&src| {
                assert!(src < tx.len(), "reindex source out of range");
                tx.data[src]
            })
            .collect();
        self.push(Tensor::from_vec(rows, cols, data), Op::Reindex { x, perm })
    }

    /// 3x3 convolution over a patch grid stored row-major as
    /// `[grid.0 * grid.1, c_in]`, zero padding, weights `[9*c_in, c_out]`,
    /// bias `[1, c_out]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, grid: (usize, usize)) -> Var {
        let (gr, gc) = grid;
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(b);
        let c_in = tx.cols;
        assert_eq!(tx.rows, gr * gc, "conv grid mismatch");
        assert_eq!(tw.rows, 9 * c_in, "conv weight rows mismatch");
        let c_out = tw.cols;
        assert_eq!(tb.shape(), (1, c_out));
        let mut out = Tensor::zeros(gr * gc, c_out);
        for pr in 0..gr {
            for pc in 0..gc {
                let p = pr * gc + pc;
                let dst = out.row_mut(p);
                dst.copy_from_slice(tb.row(0));
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let ny = pr as isize + dy as isize - 1;
                        let nx = pc as isize + dx as isize - 1;
                        if ny < 0 || nx < 0 || ny >= gr as isize || nx >= gc as isize {
                            continue;
                        }
                        let src = tx.row(ny as usize * gc + nx as usize);
                        let k = dy * 3 + dx;
                        for ci in 0..c_in {
                            let xv = src[ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = tw.row(k * c_in + ci);
                            for co in 0..c_out {
                                dst[co] += xv * wrow[co];
                            }
                        }
                    }
                }
            }
        }
        self.push(out, Op::Conv3x3 { x, w, b, grid })
    }

    /// Extracts element `idx` (flat index) as a `1x1` tensor.
    pub fn index_scalar(&mut self, x: Var, idx: usize) -> Var {
        let tx = self.value(x);
        assert!(idx < tx.len(), "index_scalar out of range");
        self.push(Tensor::scalar(tx.data[idx]), Op::IndexScalar { x, idx })
    }

    // ---- backward ----

    /// Backpropagates from a scalar `loss` through the whole tape.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward target must be scalar");
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        self.grads[loss.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = core::mem::take(&mut self.grads[i]);
            self.accumulate(i, &g);
            self.grads[i] = g;
        }
    }

    fn accumulate(&mut self, node: usize, g: &[f64]) {
        // Split borrows: values are read-only, grads are written.
        macro_rules! val {
            ($v:expr) => {
                &self.nodes[$v.0].value
            };
        }
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                for (ga, &gi) in self.grads[a.0].iter_mut().zip(g) {
                    *ga += gi;
                }
                for (gb, &gi) in self.grads[b.0].iter_mut().zip(g) {
                    *gb += gi;
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                for (ga, &gi) in self.grads[a.0].iter_mut().zip(g) {
                    *ga += gi;
                }
                for (gb, &gi) in self.grads[b.0].iter_mut().zip(g) {
                    *gb -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = val!(a).data.clone();
                let bv = val!(b).data.clone();
                for i in 0..g.len() {
                    self.grads[a.0][i] += g[i] * bv[i];
                    self.grads[b.0][i] += g[i] * av[i];
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let av = val!(a).data.clone();
                let bv = val!(b).data.clone();
                for i in 0..g.len() {
                    self.grads[a.0][i] += g[i] / bv[i];
                    self.grads[b.0][i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
            Op::MinElem(a, b) => {
                let (a, b) = (*a, *b);
                let av = val!(a).data.clone();
                let bv = val!(b).data.clone();
                for i in 0..g.len() {
                    if av[i] <= bv[i] {
                        self.grads[a.0][i] += g[i];
                    } else {
                        self.grads[b.0][i] += g[i];
                    }
                }
            }
            Op::MaxElem(a, b) => {
                let (a, b) = (*a, *b);
                let av = val!(a).data.clone();
                let bv = val!(b).data.clone();
                for i in 0..g.len() {
                    if av[i] >= bv[i] {
                        self.grads[a.0][i] += g[i];
                    } else {
                        self.grads[b.0][i] += g[i];
                    }
                }
            }
            Op::AddScalar(a) => {
                let a = *a;
                for (ga, &gi) in self.grads[a.0].iter_mut().zip(g) {
                    *ga += gi;
                }
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                for (ga, &gi) in self.grads[a.0].iter_mut().zip(g) {
                    *ga += gi * c;
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = self.nodes[node].value.data.clone();
                for i in 0..g.len() {
                    self.grads[a.0][i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[node].value.data.clone();
                for i in 0..g.len() {
                    self.grads[a.0][i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                let y = self.nodes[node].value.data.clone();
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        self.grads[a.0][i] += g[i];
                    }
                }
            }
            Op::Abs(a) => {
                let a = *a;
                let x = val!(a).data.clone();
                for i in 0..g.len() {
                    self.grads[a.0][i] += g[i] * if x[i] >= 0.0 { 1.0 } else { -1.0 };
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let ta = val!(a).clone();
                let tb = val!(b).clone();
                let (m, k) = ta.shape();
                let n = tb.cols;
                // dA += G @ B^T
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += g[i * n + c] * tb.get(j, c);
                        }
                        self.grads[a.0][i * k + j] += acc;
                    }
                }
                // dB += A^T @ G
                for j in 0..k {
                    for c in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += ta.get(i, j) * g[i * n + c];
                        }
                        self.grads[b.0][j * n + c] += acc;
                    }
                }
            }
            Op::MatmulNT(a, b) => {
                let (a, b) = (*a, *b);
                let ta = val!(a).clone();
                let tb = val!(b).clone();
                let (m, k) = ta.shape();
                let n = tb.rows;
                // C = A @ B^T, G is [m x n]; dA += G @ B ; dB += G^T @ A
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += g[i * n + c] * tb.get(c, j);
                        }
                        self.grads[a.0][i * k + j] += acc;
                    }
                }
                for c in 0..n {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += g[i * n + c] * ta.get(i, j);
                        }
                        self.grads[b.0][c * k + j] += acc;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                let cols = val!(row).cols;
                for (ga, &gi) in self.grads[a.0].iter_mut().zip(g) {
                    *ga += gi;
                }
                for (i, &gi) in g.iter().enumerate() {
                    self.grads[row.0][i % cols] += gi;
                }
            }
            Op::SumAll(a) => {
                let a = *a;
                let gi = g[0];
                for ga in self.grads[a.0].iter_mut() {
                    *ga += gi;
                }
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = val!(a).len() as f64;
                let gi = g[0] / n;
                for ga in self.grads[a.0].iter_mut() {
                    *ga += gi;
                }
            }
            Op::WeightedSum(a, w) => {
                let a = *a;
                let w = w.clone();
                let gi = g[0];
                for (ga, wi) in self.grads[a.0].iter_mut().zip(w) {
                    *ga += gi * wi;
                }
            }
            Op::LayerNorm { x, gain, bias, mu, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let mu = mu.clone();
                let rstd = rstd.clone();
                let tx = val!(x).clone();
                let gv = val!(gain).data.clone();
                let (rows, cols) = tx.shape();
                for r in 0..rows {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let xrow = tx.row(r);
                    let rs = rstd[r];
                    let m = mu[r];
                    // dgamma, dbeta
                    for c in 0..cols {
                        let xhat = (xrow[c] - m) * rs;
                        self.grads[gain.0][c] += grow[c] * xhat;
                        self.grads[bias.0][c] += grow[c];
                    }
                    // dx = rs * (gg - mean(gg) - xhat * mean(gg * xhat))
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for c in 0..cols {
                        let gg = grow[c] * gv[c];
                        let xhat = (xrow[c] - m) * rs;
                        mean_gg += gg;
                        mean_ggx += gg * xhat;
                    }
                    mean_gg /= cols as f64;
                    mean_ggx /= cols as f64;
                    for c in 0..cols {
                        let gg = grow[c] * gv[c];
                        let xhat = (xrow[c] - m) * rs;
                        self.grads[x.0][r * cols + c] += rs * (gg - mean_gg - xhat * mean_ggx);
                    }
                }
            }
            Op::CausalSoftmax { x, window } => {
                let (x, window) = (*x, *window);
                let y = self.nodes[node].value.clone();
                let (rows, cols) = y.shape();
                for i in 0..rows {
                    let lo = i.saturating_sub(window - 1);
                    let yrow = y.row(i);
                    let grow = &g[i * cols..(i + 1) * cols];
                    let mut dot = 0.0;
                    for j in lo..=i {
                        dot += grow[j] * yrow[j];
                    }
                    for j in lo..=i {
                        self.grads[x.0][i * cols + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::MaskedNllMean { logits, targets, row_mask } => {
                let logits = *logits;
                let targets = targets.clone();
                let row_mask = row_mask.clone();
                let tl = val!(logits).clone();
                let (rows, vocab) = tl.shape();
                let n_masked = row_mask.iter().filter(|&&m| m).count() as f64;
                let gi = g[0] / n_masked;
                for i in 0..rows {
                    if !row_mask[i] {
                        continue;
                    }
                    let row = tl.row(i);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&v| mathfn::exp(v - mx)).sum();
                    for c in 0..vocab {
                        let p = mathfn::exp(row[c] - mx) / denom;
                        let onehot = if c == targets[i] as usize { 1.0 } else { 0.0 };
                        self.grads[logits.0][i * vocab + c] += gi * (p - onehot);
                    }
                }
            }
            Op::BceWithLogitsMean { logits, target } => {
                let logits = *logits;
                let target = target.clone();
                let z = val!(logits).data.clone();
                let n = z.len() as f64;
                let gi = g[0] / n;
                for i in 0..z.len() {
                    let tv = if target[i] { 1.0 } else { 0.0 };
                    self.grads[logits.0][i] += gi * (mathfn::sigmoid(z[i]) - tv);
                }
            }
            Op::GatherRows { x, ids } => {
                let x = *x;
                let ids = ids.clone();
                let cols = val!(x).cols;
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        self.grads[x.0][id * cols + c] += g[r * cols + c];
                    }
                }
            }
            Op::OverwriteRows { base, patch, start } => {
                let (base, patch, start) = (*base, *patch, *start);
                let cols = val!(base).cols;
                let prows = val!(patch).rows;
                let brows = val!(base).rows;
                for r in 0..brows {
                    let inside = r >= start && r < start + prows;
                    for c in 0..cols {
                        let gi = g[r * cols + c];
                        if inside {
                            self.grads[patch.0][(r - start) * cols + c] += gi;
                        } else {
                            self.grads[base.0][r * cols + c] += gi;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let cols = self.nodes[node].value.cols;
                let mut r0 = 0;
                for p in parts {
                    let rows = val!(p).rows;
                    for r in 0..rows {
                        for c in 0..cols {
                            self.grads[p.0][r * cols + c] += g[(r0 + r) * cols + c];
                        }
                    }
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let out_cols = self.nodes[node].value.cols;
                let rows = self.nodes[node].value.rows;
                let mut c0 = 0;
                for p in parts {
                    let pcols = val!(p).cols;
                    for r in 0..rows {
                        for c in 0..pcols {
                            self.grads[p.0][r * pcols + c] += g[r * out_cols + c0 + c];
                        }
                    }
                    c0 += pcols;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let xcols = val!(x).cols;
                let rows = self.nodes[node].value.rows;
                for r in 0..rows {
                    for c in 0..len {
                        self.grads[x.0][r * xcols + start + c] += g[r * len + c];
                    }
                }
            }
            Op::Reindex { x, perm } => {
                let x = *x;
                let perm = perm.clone();
                for (i, &src) in perm.iter().enumerate() {
                    self.grads[x.0][src] += g[i];
                }
            }
            Op::Conv3x3 { x, w, b, grid } => {
                let (x, w, b, grid) = (*x, *w, *b, *grid);
                let (gr, gc) = grid;
                let tx = val!(x).clone();
                let tw = val!(w).clone();
                let c_in = tx.cols;
                let c_out = tw.cols;
                for pr in 0..gr {
                    for pc in 0..gc {
                        let p = pr * gc + pc;
                        let gout = &g[p * c_out..(p + 1) * c_out];
                        for co in 0..c_out {
                            self.grads[b.0][co] += gout[co];
                        }
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let ny = pr as isize + dy as isize - 1;
                                let nx = pc as isize + dx as isize - 1;
                                if ny < 0 || nx < 0 || ny >= gr as isize || nx >= gc as isize {
                                    continue;
                                }
                                let np = ny as usize * gc + nx as usize;
                                let k = dy * 3 + dx;
                                let xrow = tx.row(np);
                                for ci in 0..c_in {
                                    let wrow = tw.row(k * c_in + ci);
                                    let mut acc = 0.0;
                                    for co in 0..c_out {
                                        acc += gout[co] * wrow[co];
                                        self.grads[w.0][(k * c_in + ci) * c_out + co] +=
                                            xrow[ci] * gout[co];
                                    }
                                    self.grads[x.0][np * c_in + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
            Op::IndexScalar { x, idx } => {
                let (x, idx) = (*x, *idx);
                self.grads[x.0][idx] += g[0];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_forward_and_grad() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(Tensor::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b);
        let s = g.sum_all(c);
        assert_eq!(g.item(s), 19.0 + 22.0 + 43.0 + 50.0);
        g.backward(s);
        // d(sum(AB))/dA = ones @ B^T -> row sums of B rows
        assert_eq!(g.grad(a), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.grad(b), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_holds() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(3, 3, vec![0.3, 9.0, -2.0, 0.1, 0.2, 5.0, 1.0, 2.0, 3.0]));
        let y = g.causal_softmax(x, usize::MAX);
        let t = g.value(y);
        assert_eq!(t.get(0, 1), 0.0);
        assert_eq!(t.get(0, 2), 0.0);
        assert_eq!(t.get(1, 2), 0.0);
        for r in 0..3 {
            let s: f64 = t.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn windowed_softmax_hides_old_positions() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(3, 3, vec![1.0; 9]));
        let y = g.causal_softmax(x, 2);
        let t = g.value(y);
        // row 2 with window 2 sees only columns 1 and 2
        assert_eq!(t.get(2, 0), 0.0);
        assert!((t.get(2, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn overwrite_rows_routes_gradients() {
        let mut g = Graph::new();
        let base = g.leaf(Tensor::from_vec(3, 2, vec![1.0; 6]));
        let patch = g.leaf(Tensor::from_vec(1, 2, vec![5.0, 6.0]));
        let merged = g.overwrite_rows(base, patch, 1);
        assert_eq!(g.value(merged).row(1), &[5.0, 6.0]);
        let s = g.sum_all(merged);
        g.backward(s);
        assert_eq!(g.grad(base), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.grad(patch), &[1.0, 1.0]);
    }

    #[test]
    fn gather_rows_accumulates_duplicate_ids() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.gather_rows(x, vec![1, 1, 0]);
        let s = g.sum_all(y);
        g.backward(s);
        assert_eq!(g.grad(x), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn masked_nll_uniform_logits_is_log_vocab() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(4, 8));
        let loss = g.masked_nll_mean(logits, vec![3, 1, 0, 7], vec![true, true, false, true]);
        assert!((g.item(loss) - (8.0f64).ln()) < 1e-12);
    }
}
