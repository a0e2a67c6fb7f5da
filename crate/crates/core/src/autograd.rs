//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints. Vectors are represented as `1 × n` row matrices throughout.
//!
//! The tape is single-threaded (`RefCell`); build one tape per forward pass.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Build a `1 × n` row matrix from a slice.
pub fn row(values: &[f64]) -> Mat {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

/// Handle to a node on a [`Tape`].
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Rows(Var, usize),
    ColMax(Var, Vec<usize>),
    PairDist(Var, Var),
    NormalizeRows(Var, Vec<f64>),
    RowSums(Var),
    Sum(Var),
    LogSumExp(Var),
    Gather(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Operation recorder for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, Var>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// Values of a `1 × n` node as a vector.
    pub fn to_vec(&self, v: Var) -> Vec<f64> {
        self.value(v).iter().copied().collect()
    }

    /// A constant (or differentiable input) leaf.
    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var {
        self.leaf(Mat::zeros((rows, cols)))
    }

    /// Bind a parameter tensor. Repeated binds of the same id return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&*self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) + &*self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) - &*self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = &*self.value(a) * &*self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1 × m` row over every row of `a`.
    pub fn add_row(&self, a: Var, r: Var) -> Var {
        let out = {
            let (av, rv) = (self.value(a), self.value(r));
            assert_eq!(rv.nrows(), 1, "add_row expects a single row");
            &*av + &rv.row(0)
        };
        self.push(out, Op::AddRow(a, r))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = &*self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = &*self.value(a) + c;
        self.push(out, Op::AddScalar(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// Elementwise `max(a, floor)`; no gradient flows through clamped entries.
    pub fn clamp_min(&self, a: Var, floor: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(floor));
        self.push(out, Op::ClampMin(a, floor))
    }

    /// Numerically stable softmax of every row.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = softmax_rows(&self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Softmax of every column (via two transposes).
    pub fn softmax_cols(&self, a: Var) -> Var {
        let t = self.transpose(a);
        let sm = self.softmax_rows(t);
        self.transpose(sm)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<Ref<'_, Mat>> = parts.iter().map(|p| self.value(*p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
        };
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<Ref<'_, Mat>> = parts.iter().map(|p| self.value(*p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            concatenate(Axis(0), &views).expect("concat_rows: column counts differ")
        };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Row `i` of `a` as a `1 × m` node.
    pub fn row_of(&self, a: Var, i: usize) -> Var {
        let out = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        self.push(out, Op::Rows(a, i))
    }

    /// Element-wise maximum over rows: `1 × m`.
    pub fn col_max(&self, a: Var) -> Var {
        let (out, arg) = {
            let av = self.value(a);
            assert!(av.nrows() > 0, "col_max of an empty matrix");
            let mut out = Mat::zeros((1, av.ncols()));
            let mut arg = vec![0usize; av.ncols()];
            for (c, col) in av.columns().into_iter().enumerate() {
                let mut best = 0;
                for r in 1..col.len() {
                    if col[r] > col[best] {
                        best = r;
                    }
                }
                arg[c] = best;
                out[[0, c]] = col[best];
            }
            (out, arg)
        };
        self.push(out, Op::ColMax(a, arg))
    }

    /// Pairwise Euclidean distances between rows: `[n × m]`.
    pub fn pair_dist(&self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.ncols(), bv.ncols(), "pair_dist: width mismatch");
            let mut out = Mat::zeros((av.nrows(), bv.nrows()));
            for (i, ar) in av.rows().into_iter().enumerate() {
                for (j, br) in bv.rows().into_iter().enumerate() {
                    let d2: f64 = ar.iter().zip(br.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                    out[[i, j]] = d2.sqrt();
                }
            }
            out
        };
        self.push(out, Op::PairDist(a, b))
    }

    /// Scale each row to unit L2 norm; zero rows stay zero.
    pub fn normalize_rows(&self, a: Var) -> Var {
        let (out, norms) = {
            let av = self.value(a);
            let mut out = av.to_owned();
            let mut norms = Vec::with_capacity(av.nrows());
            for mut r in out.rows_mut() {
                let n = r.dot(&r).sqrt();
                norms.push(n);
                if n > 0.0 {
                    r /= n;
                } else {
                    r.fill(0.0);
                }
            }
            (out, norms)
        };
        self.push(out, Op::NormalizeRows(a, norms))
    }

    /// Sum along each row: `[n × 1]`.
    pub fn row_sums(&self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSums(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// `log Σ exp(a)` over all entries, stabilized by the maximum.
    pub fn log_sum_exp(&self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), log_sum_exp(self.value(a).iter().copied()));
        self.push(out, Op::LogSumExp(a))
    }

    /// Pick entries `(r, c)` into a `1 × k` row.
    pub fn gather(&self, a: Var, idx: &[(usize, usize)]) -> Var {
        let out = {
            let av = self.value(a);
            let vals: Vec<f64> = idx.iter().map(|&(r, c)| av[[r, c]]).collect();
            row(&vals)
        };
        self.push(out, Op::Gather(a, idx.to_vec()))
    }

    /// Run reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let y = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    accumulate(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * val(*b));
                    accumulate(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Tanh(a) => accumulate(&mut grads, *a, &g * &y.mapv(|t| 1.0 - t * t)),
                Op::Sigmoid(a) => accumulate(&mut grads, *a, &g * &y.mapv(|s| s * (1.0 - s))),
                Op::Exp(a) => accumulate(&mut grads, *a, &g * y),
                Op::Log(a) => accumulate(&mut grads, *a, &g / val(*a)),
                Op::Abs(a) => accumulate(&mut grads, *a, &g * &val(*a).mapv(sign)),
                Op::ClampMin(a, floor) => {
                    let mask = val(*a).mapv(|x| if x > *floor { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::SoftmaxRows(a) => {
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, &gy - &(y * &dot));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        accumulate(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Rows(a, i) => {
                    let mut full = Mat::zeros(val(*a).dim());
                    full.slice_mut(s![*i..*i + 1, ..]).assign(&g);
                    accumulate(&mut grads, *a, full);
                }
                Op::ColMax(a, arg) => {
                    let mut full = Mat::zeros(val(*a).dim());
                    for (c, &r) in arg.iter().enumerate() {
                        full[[r, c]] = g[[0, c]];
                    }
                    accumulate(&mut grads, *a, full);
                }
                Op::PairDist(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut ga = Mat::zeros(av.dim());
                    let mut gb = Mat::zeros(bv.dim());
                    for i in 0..av.nrows() {
                        for j in 0..bv.nrows() {
                            let d = y[[i, j]];
                            if d <= 0.0 {
                                continue;
                            }
                            let w = g[[i, j]] / d;
                            for c in 0..av.ncols() {
                                let diff = w * (av[[i, c]] - bv[[j, c]]);
                                ga[[i, c]] += diff;
                                gb[[j, c]] -= diff;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::NormalizeRows(a, norms) => {
                    let mut ga = Mat::zeros(y.dim());
                    for (i, &n) in norms.iter().enumerate() {
                        if n <= 0.0 {
                            continue;
                        }
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let proj = yr.dot(&gr);
                        let mut out = ga.row_mut(i);
                        out.assign(&((&gr - &(&yr * proj)) / n));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSums(a) => {
                    let (r, c) = val(*a).dim();
                    let mut ga = Mat::zeros((r, c));
                    for i in 0..r {
                        ga.row_mut(i).fill(g[[i, 0]]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => accumulate(&mut grads, *a, Mat::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::LogSumExp(a) => {
                    let lse = y[[0, 0]];
                    let ga = val(*a).mapv(|x| (x - lse).exp() * g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let mut ga = Mat::zeros(val(*a).dim());
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        ga[[r, c]] += g[[0, k]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradient of every parameter bound on this tape.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = self
            .bound
            .borrow()
            .iter()
            .filter_map(|(id, v)| grads.wrt(*v).map(|g| (*id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

/// `log Σ exp(x)`; `-inf` for an empty sequence.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.to_owned();
    for mut r in out.rows_mut() {
        let max = r.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        r.mapv_inplace(|x| (x - max).exp());
        let total = r.sum();
        r /= total;
    }
    out
}
