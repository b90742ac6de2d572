//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its variables. Leaves are
//! either trainable (gradients are accumulated for them) or constant (frozen
//! weights, inputs); gradients never propagate into a constant leaf.

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Nll {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Mask applied before a row softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Entry (i, j) is kept iff `j <= i`.
    Causal,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Mat) -> Var {
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
        let value = self.value(a).dot(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulT(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), g)
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let g = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), g)
    }

    /// `x · w + b` with `b` a `1 × out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let g = self.needs(a);
        self.push(value, Op::Scale(a, factor), g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let g = self.needs(a);
        self.push(value, Op::Gelu(a), g)
    }

    /// Row-wise layer normalization with `1 × m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * inv;
            }
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let g = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        )
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Mask) -> Var {
        let value = softmax_rows(self.value(a), mask);
        let g = self.needs(a);
        self.push(value, Op::Softmax(a), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let g = self.needs(a);
        self.push(value, Op::SliceRows(a, start), g)
    }

    /// Row `i` of the result is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), indices);
        let g = self.needs(a);
        self.push(value, Op::GatherRows(a, indices.to_vec()), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let g = self.needs(a);
        self.push(value, Op::SliceCols(a, start), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let g = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let g = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), g)
    }

    /// Summed negative log-likelihood of `targets[i]` under `softmax(logits[i])`.
    /// Returns a `1 × 1` value.
    pub fn nll(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "nll: one target per row");
        let probs = softmax_rows(lv, Mask::None);
        let lsm = log_softmax_rows(lv);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -lsm[[i, t]])
            .sum();
        let g = self.needs(logits);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let g = self.needs(a);
        self.push(value, Op::Sum(a), g)
    }

    /// Back-propagates `upstream` (same shape as `root`) and returns the
    /// gradient of every node that requires one.
    pub fn backward_with(&self, root: Var, upstream: Mat) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        assert_eq!(
            upstream.dim(),
            self.value(root).dim(),
            "upstream gradient shape"
        );
        grads[root.0] = Some(upstream);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.dot(&self.value(*b).t()));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&dy));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.dot(self.value(*b)));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        accumulate(&mut grads, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy);
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, dy * *f),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut dx = dy;
                    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &x| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let deriv = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d *= deriv;
                    });
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.needs(*gain) {
                        let dg = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gain, dg);
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*x) {
                        let dxhat = &dy * self.value(*gain);
                        let n = xhat.ncols() as f64;
                        let mut dx = Mat::zeros(xhat.dim());
                        for i in 0..xhat.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            let inv = inv_std[i];
                            for j in 0..xhat.ncols() {
                                dx[[i, j]] = inv / n * (n * dr[j] - sum_d - xr[j] * sum_dx);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot = dy.row(i).dot(&y.row(i));
                        for j in 0..y.ncols() {
                            dx[[i, j]] = y[[i, j]] * (dy[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::SliceRows(a, start) => {
                    let mut full = Mat::zeros(self.value(*a).dim());
                    let end = start + dy.nrows();
                    full.slice_mut(s![*start..end, ..]).assign(&dy);
                    accumulate(&mut grads, *a, full);
                }
                Op::GatherRows(a, indices) => {
                    let mut full = Mat::zeros(self.value(*a).dim());
                    for (i, &src) in indices.iter().enumerate() {
                        let mut row = full.row_mut(src);
                        row += &dy.row(i);
                    }
                    accumulate(&mut grads, *a, full);
                }
                Op::SliceCols(a, start) => {
                    let mut full = Mat::zeros(self.value(*a).dim());
                    let end = start + dy.ncols();
                    full.slice_mut(s![.., *start..end]).assign(&dy);
                    accumulate(&mut grads, *a, full);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        if self.needs(*p) {
                            let part = dy.slice(s![offset..offset + n, ..]).to_owned();
                            accumulate(&mut grads, *p, part);
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        if self.needs(*p) {
                            let part = dy.slice(s![.., offset..offset + n]).to_owned();
                            accumulate(&mut grads, *p, part);
                        }
                        offset += n;
                    }
                }
                Op::Nll {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = dy[[0, 0]];
                    let mut dl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[[i, t]] -= 1.0;
                    }
                    accumulate(&mut grads, *logits, dl * scale);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).dim();
                    accumulate(&mut grads, *a, Mat::from_elem(shape, dy[[0, 0]]));
                }
            }
        }
        Gradients { grads }
    }

    /// Gradients of a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_with(root, Mat::from_elem((1, 1), 1.0))
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn softmax_rows(x: &Mat, mask: Mask) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let limit = match mask {
            Mask::None => row.len(),
            Mask::Causal => (i + 1).min(row.len()),
        };
        let max = row
            .iter()
            .take(limit)
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for j in 0..limit {
            let e = (row[j] - max).exp();
            out[[i, j]] = e;
            total += e;
        }
        for j in 0..limit {
            out[[i, j]] /= total;
        }
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
