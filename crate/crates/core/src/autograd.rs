//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape through [`Tape::bind`], keyed so that gradients can be routed back
//! to the owning [`ParamSet`](crate::params::ParamSet) after [`Tape::backward`].
//! Everything is two-dimensional; vectors are `1×c` rows and scalars `1×1`.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a parameter tensor: `(slot, index)` where `slot` names the
/// parameter set (encoder, rationale head, ...) and `index` the tensor in it.
pub type ParamKey = (u8, usize);

/// Lower clamp on probabilities fed to the binary log-likelihood.
pub const BCE_CLAMP: f64 = 1e-7;
/// Lower clamp on the gold-class probability in cross entropy.
pub const CE_CLAMP: f64 = 1e-9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    WeightedBce { probs: Var, labels: Vec<f64>, weights: Vec<f64> },
    NegLogAt { probs: Var, col: usize },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
    bound: HashMap<ParamKey, Var>,
    bound_order: Vec<(ParamKey, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input. Receives a gradient like any node but is not routed anywhere.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter tensor; repeated binds of the same key reuse the node.
    pub fn bind(&mut self, key: ParamKey, value: &Mat) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.bound.insert(key, v);
        self.bound_order.push((key, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds the `1×c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(b).nrows(), 1);
        let value = self.value(a) + self.value(b);
        self.push(value, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` element-wise by the `1×c` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(b).nrows(), 1);
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / cols;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            row *= inv;
            inv_std.push(inv);
        }
        self.push(value, Op::NormalizeRows { x: a, inv_std })
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&t.row(id));
        }
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows { x: a, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x: a, start })
    }

    /// `-Σ_j w_j [y_j ln p_j + (1 - y_j) ln(1 - p_j)]` over an `n×1` column of
    /// probabilities, each clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn weighted_bce(&mut self, probs: Var, labels: &[f64], weights: &[f64]) -> Var {
        let p = self.value(probs);
        assert_eq!(p.len(), labels.len());
        assert_eq!(p.len(), weights.len());
        let mut loss = 0.0;
        for ((&pj, &y), &w) in p.iter().zip(labels).zip(weights) {
            let pc = pj.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::WeightedBce {
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// `-ln max(p[0, col], CE_CLAMP)` for a `1×L` probability row.
    pub fn neg_log_at(&mut self, probs: Var, col: usize) -> Var {
        let p = self.value(probs)[[0, col]];
        self.push(
            Mat::from_elem((1, 1), -p.clamp(CE_CLAMP, 1.0).ln()),
            Op::NegLogAt { probs, col },
        )
    }

    /// Reverse pass from `out` with upstream gradient `seed`. Replaces any
    /// previously computed gradients.
    pub fn backward(&mut self, out: Var, seed: f64) {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_elem(self.nodes[out.0].value.raw_dim(), seed));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let db = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let da = &g * self.value(*b);
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *a, da);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Tanh(a) => {
                    let da = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let da = &g * &self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = &g * y;
                    for (mut row, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |d, &yv| *d -= yv * dot);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::NormalizeRows { x, inv_std } => {
                    let y = &node.value;
                    let cols = y.ncols() as f64;
                    let mut dx = g.clone();
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(r);
                        let mean_g = row.sum() / cols;
                        let mean_gy = row.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        let inv = inv_std[r];
                        row.zip_mut_with(&yrow, |d, &yv| *d = inv * (*d - mean_g - yv * mean_gy));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let mut dt = Mat::zeros(self.value(*table).raw_dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(i);
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + len, ..]).to_owned());
                        start += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + len]).to_owned());
                        start += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::WeightedBce {
                    probs,
                    labels,
                    weights,
                } => {
                    let up = g[[0, 0]];
                    let p = self.value(*probs);
                    let mut dp = Mat::zeros(p.raw_dim());
                    for (j, (d, &pj)) in dp.iter_mut().zip(p.iter()).enumerate() {
                        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pj) {
                            let y = labels[j];
                            *d = -up * weights[j] * (y / pj - (1.0 - y) / (1.0 - pj));
                        }
                    }
                    acc(&mut grads, *probs, dp);
                }
                Op::NegLogAt { probs, col } => {
                    let p = self.value(*probs);
                    let mut dp = Mat::zeros(p.raw_dim());
                    let pc = p[[0, *col]];
                    if pc > CE_CLAMP {
                        dp[[0, *col]] = -g[[0, 0]] / pc;
                    }
                    acc(&mut grads, *probs, dp);
                }
            }
        }
        self.grads = grads;
    }

    /// Gradient of the last [`backward`](Self::backward) output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Bound parameters in bind order, with their gradients (if reached).
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamKey, Option<&Mat>)> + '_ {
        self.bound_order.iter().map(move |&(k, v)| (k, self.grad(v)))
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around each entry of `x`.
    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let eps = 1e-6;
        let mut g = Mat::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn check(x: Mat, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |x: &Mat| {
            let mut t = Tape::new();
            let v = t.bind((0, 0), x);
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.bind((0, 0), &x);
        let out = build(&mut t, v);
        t.backward(out, 1.0);
        let analytic = t.grad(v).unwrap().clone();
        let numeric = numeric_grad(&x, eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    /// Reduces any matrix to a scalar through a fixed random projection.
    fn reduce(t: &mut Tape, v: Var) -> Var {
        let (r, c) = t.value(v).dim();
        let w = Mat::from_shape_fn((c, 1), |(i, _)| 0.3 + 0.17 * i as f64);
        let u = Mat::from_shape_fn((1, r), |(_, j)| 1.0 - 0.21 * j as f64);
        let w = t.constant(w);
        let u = t.constant(u);
        let col = t.matmul(v, w);
        t.matmul(u, col)
    }

    #[test]
    fn elementwise_and_matrix_ops() {
        let x = array![[0.3, -1.2, 0.7], [1.1, 0.05, -0.4]];
        check(x.clone(), |t, v| {
            let a = t.tanh(v);
            reduce(t, a)
        });
        check(x.clone(), |t, v| {
            let a = t.gelu(v);
            reduce(t, a)
        });
        check(x.clone(), |t, v| {
            let a = t.softmax_rows(v);
            reduce(t, a)
        });
        check(x.clone(), |t, v| {
            let a = t.normalize_rows(v, 1e-5);
            reduce(t, a)
        });
        check(x.clone(), |t, v| {
            let a = t.matmul_t(v, v);
            reduce(t, a)
        });
        check(x.clone(), |t, v| {
            let row = t.slice_rows(v, 1, 1);
            let a = t.mul_row(v, row);
            let b = t.add_row(a, row);
            let c = t.slice_cols(b, 1, 2);
            let d = t.concat_cols(&[c, v]);
            let e = t.concat_rows(&[d, d]);
            reduce(t, e)
        });
        check(x, |t, v| {
            let a = t.gather(v, &[1, 0, 1]);
            let b = t.sigmoid(a);
            reduce(t, b)
        });
    }

    #[test]
    fn loss_ops_match_finite_differences() {
        let p = array![[0.9], [0.1], [0.2], [0.8]];
        check(p, |t, v| t.weighted_bce(v, &[1.0, 0.0, 0.0, 1.0], &[2.0, 2.0, 2.0, 2.0]));
        let logits = array![[0.2, -0.5, 1.3]];
        check(logits, |t, v| {
            let p = t.softmax_rows(v);
            t.neg_log_at(p, 2)
        });
    }

    #[test]
    fn shared_binding_accumulates() {
        let mut t = Tape::new();
        let x = array![[2.0]];
        let a = t.bind((1, 3), &x);
        let b = t.bind((1, 3), &x);
        assert_eq!(a, b);
        let y = t.mul(a, b);
        t.backward(y, 1.0);
        assert_eq!(t.grad(a).unwrap()[[0, 0]], 4.0);
    }
}
