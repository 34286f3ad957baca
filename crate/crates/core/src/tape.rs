//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns gradients for every parameter that took part.

use std::collections::HashMap;

use num_traits::Float;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate corruption of a backward rule, used as a negative control for
/// gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the tanh derivative by 1.5.
    TanhBackward,
    /// Drops the softmax Jacobian's correction term.
    SoftmaxBackward,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    ParamRows(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<T> },
    RowL2Normalize { x: Var, norms: Vec<T> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    Pick(Var, usize, usize),
    Dropout(Var, Vec<T>),
    KernelPool(KernelPoolRecord<T>),
}

#[derive(Debug, Clone)]
struct KernelPoolRecord<T> {
    input: Var,
    mus: Vec<T>,
    sigmas: Vec<T>,
    scale: T,
    eps: T,
    /// per (row, kernel) sum over columns
    row_sums: Vec<T>,
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    fault: Option<Fault>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a whole parameter; repeated binds on one tape share the node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        self.param(store, store.expect_id(name))
    }

    /// Gathers rows of a parameter (embedding lookup) with a row-sparse gradient.
    pub fn param_rows(&mut self, store: &ParamStore<T>, id: ParamId, rows: &[usize]) -> Var {
        let value = store.get(id).gather_rows(rows);
        self.push(value, Op::ParamRows(id, rows.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a @ b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1x{c} row");
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(Float::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(Float::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(Float::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let lse = log_sum_exp(x.row(r));
            for o in out.row_mut(r) {
                *o -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let n = T::lit(x.cols() as f64);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for o in out.row_mut(r) {
                *o = (*o - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows { x: a, inv_std })
    }

    /// `x / sqrt(|x|^2 + eps)` per row.
    pub fn row_l2_normalize(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = (x.row(r).iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(n);
            for o in out.row_mut(r) {
                *o /= n;
            }
        }
        self.push(out, Op::RowL2Normalize { x: a, norms })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start <= end && end <= x.cols(), "column slice out of range");
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let v = Tensor::from_vec(x.rows(), end - start, data);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).gather_rows(idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Column sums, `R x C -> 1 x C`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = vec![T::zero(); x.cols()];
        for r in 0..x.rows() {
            for (o, &v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        self.push(Tensor::row_vector(out), Op::SumRows(a))
    }

    /// Row sums, `R x C -> R x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out: Vec<T> = (0..x.rows()).map(|r| x.row(r).iter().copied().sum()).collect();
        let rows = out.len();
        self.push(Tensor::from_vec(rows, 1, out), Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0;
        let s = self.sum_rows(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = self.value(a).get(r, c);
        self.push(Tensor::scalar(v), Op::Pick(a, r, c))
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<T>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.data().len(), "dropout mask size");
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::from_vec(x.rows(), x.cols(), data);
        self.push(v, Op::Dropout(a, mask))
    }

    /// Gaussian kernel pooling of a similarity matrix `M` (`n x m`):
    /// `out_k = scale * sum_t ln(eps + sum_j exp(-(M_tj - mu_k)^2 / (2 sigma_k^2)))`.
    pub fn kernel_pool(&mut self, a: Var, mus: &[T], sigmas: &[T], scale: T, eps: T) -> Var {
        assert_eq!(mus.len(), sigmas.len());
        let m = self.value(a);
        let k = mus.len();
        let mut row_sums = vec![T::zero(); m.rows() * k];
        let mut out = vec![T::zero(); k];
        let two = T::lit(2.0);
        for t in 0..m.rows() {
            for (kk, (&mu, &sigma)) in mus.iter().zip(sigmas).enumerate() {
                let s: T = m
                    .row(t)
                    .iter()
                    .map(|&x| (-(x - mu) * (x - mu) / (two * sigma * sigma)).exp())
                    .sum();
                row_sums[t * k + kk] = s;
                out[kk] += scale * (s + eps).ln();
            }
        }
        let rec = KernelPoolRecord {
            input: a,
            mus: mus.to_vec(),
            sigmas: sigmas.to_vec(),
            scale,
            eps,
            row_sums,
        };
        self.push(Tensor::row_vector(out), Op::KernelPool(rec))
    }

    /// Backpropagates from a `1 x 1` output and returns parameter gradients.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::default();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate_dense(*id, g),
                Op::ParamRows(id, rows) => {
                    for (k, &r) in rows.iter().enumerate() {
                        out.accumulate_row(*id, r, g.row(k));
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![T::zero(); g.cols()];
                    for r in 0..g.rows() {
                        for (o, &v) in gr.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *row, Tensor::row_vector(gr));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let rv = self.value(*row);
                    let mut gr = vec![T::zero(); g.cols()];
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        for (c, gc) in gr.iter_mut().enumerate() {
                            *gc += g.get(r, c) * x.get(r, c);
                            ga.set(r, c, g.get(r, c) * rv.get(0, c));
                        }
                    }
                    acc(&mut grads, *row, Tensor::row_vector(gr));
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let k = if self.fault == Some(Fault::TanhBackward) {
                        T::lit(1.5)
                    } else {
                        T::one()
                    };
                    let ga = g.zip_map(&node.value, |gv, y| k * gv * (T::one() - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv / x);
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    let ga = g.zip_map(self.value(*a), |gv, x| two * x * gv);
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    let correct = self.fault != Some(Fault::SoftmaxBackward);
                    for r in 0..y.rows() {
                        let dot: T = if correct {
                            g.row(r).iter().zip(y.row(r)).map(|(&gv, &yv)| gv * yv).sum()
                        } else {
                            T::zero()
                        };
                        for c in 0..y.cols() {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let gsum: T = g.row(r).iter().copied().sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, g.get(r, c) - y.get(r, c).exp() * gsum);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let xhat = &node.value;
                    let n = T::lit(xhat.cols() as f64);
                    let mut ga = g.clone();
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gsum: T = g.row(r).iter().copied().sum();
                        let gx: T = g.row(r).iter().zip(xhat.row(r)).map(|(&a, &b)| a * b).sum();
                        for c in 0..xhat.cols() {
                            let v = inv / n * (n * g.get(r, c) - gsum - xhat.get(r, c) * gx);
                            ga.set(r, c, v);
                        }
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::RowL2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for (r, &norm) in norms.iter().enumerate() {
                        let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / norm);
                        }
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.shape(p).0;
                        acc(&mut grads, p, g.slice_rows(offset, offset + n));
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut gp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(&mut grads, p, gp);
                        offset += cols;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &v) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::SumRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r).copy_from_slice(g.row(0));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let v = g.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|o| *o = v);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(rows, cols, g.item()));
                }
                Op::Pick(a, r, c) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    ga.set(*r, *c, g.item());
                    acc(&mut grads, *a, ga);
                }
                Op::Dropout(a, mask) => {
                    let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::KernelPool(rec) => {
                    let m = self.value(rec.input);
                    let k = rec.mus.len();
                    let two = T::lit(2.0);
                    let mut ga = Tensor::zeros(m.rows(), m.cols());
                    for t in 0..m.rows() {
                        for j in 0..m.cols() {
                            let x = m.get(t, j);
                            let mut total = T::zero();
                            for kk in 0..k {
                                let (mu, sigma) = (rec.mus[kk], rec.sigmas[kk]);
                                let kern = (-(x - mu) * (x - mu) / (two * sigma * sigma)).exp();
                                let d_kern = -kern * (x - mu) / (sigma * sigma);
                                total += g.get(0, kk) * rec.scale * d_kern / (rec.row_sums[t * k + kk] + rec.eps);
                            }
                            ga.set(t, j, total);
                        }
                    }
                    acc(&mut grads, rec.input, ga);
                }
            }
        }
        out
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let max = x.row(r).iter().copied().fold(T::neg_infinity(), T::max);
        let row = out.row_mut(r);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Tensor<f64> {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check_unary(build: impl Fn(&mut Tape<f64>, Var) -> Var, x: Tensor<f64>) {
        let mut store = ParamStore::new();
        let id = store.insert("x", x.clone());
        let mut tape = Tape::new();
        let xv = tape.param(&store, id);
        let y = build(&mut tape, xv);
        let weights = Tensor::from_vec(
            tape.shape(y).0,
            tape.shape(y).1,
            (0..tape.value(y).data().len()).map(|i| 0.3 + 0.7 * i as f64).collect(),
        );
        let w = tape.constant(weights.clone());
        let prod = tape.mul(y, w);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let numeric = numeric_grad(
            |xx| {
                let mut s = ParamStore::new();
                let id = s.insert("x", xx.clone());
                let mut t = Tape::new();
                let xv = t.param(&s, id);
                let y = build(&mut t, xv);
                t.value(y)
                    .data()
                    .iter()
                    .zip(weights.data())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &x,
        );
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let a = grads.entry(id, r, c);
                let n = numeric.get(r, c);
                assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "({r},{c}): analytic {a} numeric {n}");
            }
        }
    }

    fn sample() -> Tensor<f64> {
        Tensor::from_vec(3, 4, vec![0.3, -1.2, 0.5, 2.0, 0.1, 0.7, -0.4, 0.9, -0.6, 0.2, 1.1, -0.3])
    }

    #[test]
    fn elementwise_ops() {
        check_unary(|t, x| t.tanh(x), sample());
        check_unary(|t, x| t.relu(x), sample());
        check_unary(|t, x| t.exp(x), sample());
        check_unary(|t, x| t.square(x), sample());
        check_unary(
            |t, x| {
                let e = t.exp(x);
                t.ln(e)
            },
            sample(),
        );
    }

    #[test]
    fn row_ops() {
        check_unary(|t, x| t.softmax_rows(x), sample());
        check_unary(|t, x| t.log_softmax_rows(x), sample());
        check_unary(|t, x| t.layer_norm_rows(x, 1e-5), sample());
        check_unary(|t, x| t.row_l2_normalize(x, 1e-9), sample());
        check_unary(|t, x| t.sum_rows(x), sample());
        check_unary(|t, x| t.sum_cols(x), sample());
        check_unary(|t, x| t.mean_rows(x), sample());
    }

    #[test]
    fn structural_ops() {
        check_unary(|t, x| t.slice_rows(x, 1, 3), sample());
        check_unary(|t, x| t.slice_cols(x, 1, 3), sample());
        check_unary(|t, x| t.gather_rows(x, &[2, 0, 2]), sample());
        check_unary(|t, x| t.transpose(x), sample());
        check_unary(
            |t, x| {
                let a = t.slice_rows(x, 0, 1);
                let b = t.slice_rows(x, 2, 3);
                let r = t.concat_rows(&[b, a, b]);
                let c = t.slice_cols(r, 0, 2);
                t.concat_cols(&[c, r])
            },
            sample(),
        );
        check_unary(|t, x| t.pick(x, 1, 2), sample());
    }

    #[test]
    fn binary_ops() {
        check_unary(
            |t, x| {
                let xt = t.transpose(x);
                t.matmul(x, xt)
            },
            sample(),
        );
        check_unary(|t, x| t.matmul_bt(x, x), sample());
        check_unary(
            |t, x| {
                let row = t.slice_rows(x, 0, 1);
                let a = t.add_row(x, row);
                let b = t.mul_row(a, row);
                let c = t.mul(b, x);
                t.sub(c, x)
            },
            sample(),
        );
    }

    #[test]
    fn kernel_pool_gradient() {
        let m = Tensor::from_vec(2, 3, vec![0.95, 0.1, -0.3, 0.5, 0.72, -0.85]);
        check_unary(
            |t, x| t.kernel_pool(x, &[1.0, 0.7, 0.1, -0.5], &[0.1, 0.1, 0.3, 0.2], 0.01, 1e-10),
            m,
        );
    }

    #[test]
    fn faults_break_gradients() {
        let mut store = ParamStore::new();
        let id = store.insert("x", sample());
        let run = |tape: &mut Tape<f64>| {
            let x = tape.param(&store, id);
            let y = tape.tanh(x);
            let s = tape.sum_all(y);
            tape.backward(s)
        };
        let good = run(&mut Tape::new());
        let bad = run(&mut Tape::with_fault(Fault::TanhBackward));
        assert!((bad.entry(id, 0, 0) - 1.5 * good.entry(id, 0, 0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&sample());
        for r in 0..s.rows() {
            let total: f64 = s.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
