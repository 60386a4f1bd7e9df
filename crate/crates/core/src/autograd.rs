//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Graph`] is a Wengert tape: every operation evaluates eagerly, appends a
//! node holding its value, and records enough information to propagate
//! gradients back to its inputs. Leaves are either trainable parameters
//! (`requires_grad`) or constants; frozen model weights enter as constants,
//! so gradients still flow *through* them to upstream trainable inputs.

use std::sync::Arc;

use crate::tensor::{softmax_in_place, Mat, Real};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Arc<Mat<T>>),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Max(Var, Var),
    Min(Var, Var),
    ClampMax(Var, T),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var, T),
    L2NormalizeRows(Var, T),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    SumCols(Var),
    SumAll(Var),
    BceWithLogits(Var, Arc<Mat<T>>),
}

struct Node<T> {
    value: Arc<Mat<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Mat<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Arc<Mat<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Arc<Mat<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_mat(&mut self, value: Mat<T>) -> Var {
        self.constant(Arc::new(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Div(a, b), rg)
    }

    /// Adds a `1×n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.shape(), (1, am.cols()), "add_row shape");
        let r = rm.row(0);
        let v = Mat::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) + r[j]);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.shape(), (1, am.cols()), "mul_row shape");
        let r = rm.row(0);
        let v = Mat::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) * r[j]);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::MulRow(a, row), rg)
    }

    /// Adds a constant matrix (for example an additive attention mask).
    pub fn add_const(&mut self, a: Var, c: &Mat<T>) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x + y);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<Mat<T>>) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(&[a]);
        self.push(v, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// Multiplies `a` by the value of the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).scale(sv);
        let rg = self.rg(&[a, s]);
        self.push(v, Op::ScaleBy(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::cst(0.5);
        let inv_sqrt2 = T::cst(std::f64::consts::FRAC_1_SQRT_2);
        let v = self
            .value(a)
            .map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::abs);
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), T::max);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Max(a, b), rg)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), T::min);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Min(a, b), rg)
    }

    /// `min(a, c)` elementwise; gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x.min(c));
        let rg = self.rg(&[a]);
        self.push(v, Op::ClampMax(a, c), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..x.rows() {
            let (mean, inv_std) = row_stats(x.row(r), eps);
            v.row_mut(r)
                .iter_mut()
                .for_each(|e| *e = (*e - mean) * inv_std);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LayerNorm(a, eps), rg)
    }

    /// `x / max(‖x‖₂, eps)` per row.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|&e| e * e).sum::<T>().sqrt().max(eps);
            v.row_mut(r).iter_mut().for_each(|e| *e /= n);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::L2NormalizeRows(a, eps), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_rows(&mats).expect("concat_rows widths");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_cols(&mats).expect("concat_cols heights");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let v = Mat::from_vec(idx.len(), cols, data).unwrap();
        let rg = self.rg(&[a]);
        self.push(v, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanRows(a), rg)
    }

    /// Row sums as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_fn(x.rows(), 1, |r, _| x.row(r).iter().copied().sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumCols(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::filled(1, 1, self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_usize(n.max(1)).unwrap())
    }

    /// Elementwise binary cross-entropy of `sigmoid(a)` against constant targets.
    pub fn bce_with_logits(&mut self, a: Var, targets: Arc<Mat<T>>) -> Var {
        let v = self.value(a).zip_map(&targets, |x, t| {
            x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln()
        });
        let rg = self.rg(&[a]);
        self.push(v, Op::BceWithLogits(a, targets), rg)
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Mat<T>>], v: Var, f: impl FnOnce() -> Mat<T>) {
        if self.nodes[v.0].requires_grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn propagate(&self, idx: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[idx];
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                self.acc_with(grads, a, || g.matmul_nt(self.value(b)));
                self.acc_with(grads, b, || self.value(a).matmul_tn(g));
            }
            &Op::MatMulNt(a, b) => {
                self.acc_with(grads, a, || g.matmul(self.value(b)));
                self.acc_with(grads, b, || g.matmul_tn(self.value(a)));
            }
            &Op::Add(a, b) => {
                self.acc_with(grads, a, || g.clone());
                self.acc_with(grads, b, || g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc_with(grads, a, || g.clone());
                self.acc_with(grads, b, || g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                self.acc_with(grads, a, || g.zip_map(self.value(b), |x, y| x * y));
                self.acc_with(grads, b, || g.zip_map(self.value(a), |x, y| x * y));
            }
            &Op::Div(a, b) => {
                let bv = self.value(b);
                self.acc_with(grads, a, || g.zip_map(bv, |x, y| x / y));
                self.acc_with(grads, b, || {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let t = g.zip_map(y, |gg, yy| gg * yy);
                    t.zip_map(bv, |t, bb| -t / bb)
                });
            }
            &Op::AddRow(a, row) => {
                self.acc_with(grads, a, || g.clone());
                self.acc_with(grads, row, || col_sums(g));
            }
            &Op::MulRow(a, row) => {
                let rv = self.value(row);
                self.acc_with(grads, a, || {
                    let r = rv.row(0);
                    Mat::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * r[j])
                });
                self.acc_with(grads, row, || col_sums(&g.zip_map(self.value(a), |x, y| x * y)));
            }
            &Op::AddConst(a) | &Op::AddScalar(a) => {
                self.acc_with(grads, a, || g.clone());
            }
            Op::MulConst(a, c) => {
                self.acc_with(grads, *a, || g.zip_map(c, |x, y| x * y));
            }
            &Op::Scale(a, s) => {
                self.acc_with(grads, a, || g.scale(s));
            }
            &Op::ScaleBy(a, s) => {
                let sv = self.scalar(s);
                self.acc_with(grads, a, || g.scale(sv));
                self.acc_with(grads, s, || {
                    let dot = g
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&x, &y)| x * y)
                        .sum::<T>();
                    Mat::filled(1, 1, dot)
                });
            }
            &Op::Gelu(a) => {
                let x = self.value(a);
                let half = T::cst(0.5);
                let inv_sqrt2 = T::cst(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::cst(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                self.acc_with(grads, a, || {
                    g.zip_map(x, |gg, xx| {
                        let cdf = half * (T::one() + (xx * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * xx * xx).exp();
                        gg * (cdf + xx * pdf)
                    })
                });
            }
            &Op::Relu(a) => {
                let x = self.value(a);
                self.acc_with(grads, a, || {
                    g.zip_map(x, |gg, xx| if xx > T::zero() { gg } else { T::zero() })
                });
            }
            &Op::Sigmoid(a) => {
                self.acc_with(grads, a, || g.zip_map(y, |gg, s| gg * s * (T::one() - s)));
            }
            &Op::Exp(a) => {
                self.acc_with(grads, a, || g.zip_map(y, |gg, e| gg * e));
            }
            &Op::Log(a) => {
                self.acc_with(grads, a, || g.zip_map(self.value(a), |gg, x| gg / x));
            }
            &Op::Abs(a) => {
                self.acc_with(grads, a, || {
                    g.zip_map(self.value(a), |gg, x| {
                        if x > T::zero() {
                            gg
                        } else if x < T::zero() {
                            -gg
                        } else {
                            T::zero()
                        }
                    })
                });
            }
            &Op::Max(a, b) | &Op::Min(a, b) => {
                let is_max = matches!(node.op, Op::Max(..));
                let (av, bv) = (self.value(a), self.value(b));
                let pick_a = |x: T, y: T| if is_max { x >= y } else { x <= y };
                self.acc_with(grads, a, || {
                    Mat::from_fn(g.rows(), g.cols(), |i, j| {
                        if pick_a(av.get(i, j), bv.get(i, j)) {
                            g.get(i, j)
                        } else {
                            T::zero()
                        }
                    })
                });
                self.acc_with(grads, b, || {
                    Mat::from_fn(g.rows(), g.cols(), |i, j| {
                        if pick_a(av.get(i, j), bv.get(i, j)) {
                            T::zero()
                        } else {
                            g.get(i, j)
                        }
                    })
                });
            }
            &Op::ClampMax(a, c) => {
                self.acc_with(grads, a, || {
                    g.zip_map(self.value(a), |gg, x| if x < c { gg } else { T::zero() })
                });
            }
            &Op::SoftmaxRows(a) => {
                self.acc_with(grads, a, || {
                    let mut out = g.clone();
                    for r in 0..g.rows() {
                        let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                        for (o, &s) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o = s * (*o - dot);
                        }
                    }
                    out
                });
            }
            &Op::LogSoftmaxRows(a) => {
                self.acc_with(grads, a, || {
                    let mut out = g.clone();
                    for r in 0..g.rows() {
                        let gsum: T = g.row(r).iter().copied().sum();
                        for (o, &ls) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= ls.exp() * gsum;
                        }
                    }
                    out
                });
            }
            &Op::LayerNorm(a, eps) => {
                let x = self.value(a);
                self.acc_with(grads, a, || {
                    let n = T::from_usize(x.cols()).unwrap();
                    let mut out = Mat::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let (_, inv_std) = row_stats(x.row(r), eps);
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let g_mean = gr.iter().copied().sum::<T>() / n;
                        let gy_mean = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((o, &gg), &yy) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = inv_std * (gg - g_mean - yy * gy_mean);
                        }
                    }
                    out
                });
            }
            &Op::L2NormalizeRows(a, eps) => {
                let x = self.value(a);
                self.acc_with(grads, a, || {
                    let mut out = Mat::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|&e| e * e).sum::<T>().sqrt();
                        let gr = g.row(r);
                        if norm > eps {
                            let yr = y.row(r);
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((o, &gg), &yy) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                                *o = (gg - yy * dot) / norm;
                            }
                        } else {
                            for (o, &gg) in out.row_mut(r).iter_mut().zip(gr) {
                                *o = gg / eps;
                            }
                        }
                    }
                    out
                });
            }
            &Op::Transpose(a) => {
                self.acc_with(grads, a, || g.transpose());
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    self.acc_with(grads, p, || g.slice_rows(start, rows));
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    self.acc_with(grads, p, || g.slice_cols(start, cols));
                    start += cols;
                }
            }
            &Op::SliceRows(a, start) => {
                self.acc_with(grads, a, || {
                    let (rows, cols) = self.shape(a);
                    let mut out = Mat::zeros(rows, cols);
                    out.data_mut()[start * cols..(start + g.rows()) * cols]
                        .copy_from_slice(g.data());
                    out
                });
            }
            &Op::SliceCols(a, start) => {
                self.acc_with(grads, a, || {
                    let (rows, cols) = self.shape(a);
                    let mut out = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        out.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    out
                });
            }
            Op::GatherRows(a, idx) => {
                self.acc_with(grads, *a, || {
                    let (rows, cols) = self.shape(*a);
                    let mut out = Mat::zeros(rows, cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &gg) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += gg;
                        }
                    }
                    out
                });
            }
            &Op::MeanRows(a) => {
                self.acc_with(grads, a, || {
                    let (rows, cols) = self.shape(a);
                    let inv = T::one() / T::from_usize(rows.max(1)).unwrap();
                    Mat::from_fn(rows, cols, |_, j| g.get(0, j) * inv)
                });
            }
            &Op::SumCols(a) => {
                self.acc_with(grads, a, || {
                    let (rows, cols) = self.shape(a);
                    Mat::from_fn(rows, cols, |i, _| g.get(i, 0))
                });
            }
            &Op::SumAll(a) => {
                self.acc_with(grads, a, || {
                    let (rows, cols) = self.shape(a);
                    Mat::filled(rows, cols, g.get(0, 0))
                });
            }
            Op::BceWithLogits(a, t) => {
                self.acc_with(grads, *a, || {
                    let x = self.value(*a);
                    Mat::from_fn(x.rows(), x.cols(), |i, j| {
                        g.get(i, j) * (sigmoid(x.get(i, j)) - t.get(i, j))
                    })
                });
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn col_sums<T: Real>(g: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Softmax of a plain slice; exposed for callers outside the tape.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    softmax_in_place(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` w.r.t. every entry of each input.
    fn check(inputs: Vec<Mat<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.param(Arc::new(m.clone()))).collect();
        let out = build(&mut g, &vars);
        let loss = g.sum_all(out);
        let grads = g.backward(loss);

        let eval = |ins: &[Mat<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|m| g.param(Arc::new(m.clone()))).collect();
            let out = build(&mut g, &vars);
            g.value(out).sum()
        };
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or(Mat::zeros(input.rows(), input.cols()));
            for e in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data()[e];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "input {k} entry {e}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn binary_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let c = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 1, 4);
        check(vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
        check(vec![a.clone(), c.clone()], |g, v| g.matmul_nt(v[0], v[1]));
        check(vec![a.clone(), c.clone()], |g, v| {
            let s = g.sub(v[0], v[1]);
            let m = g.mul(s, v[0]);
            g.add(m, v[1])
        });
        let pos = c.map(|x| x.abs() + 0.5);
        check(vec![a.clone(), pos], |g, v| g.div(v[0], v[1]));
        check(vec![a.clone(), w.clone()], |g, v| {
            let x = g.add_row(v[0], v[1]);
            g.mul_row(x, v[1])
        });
        check(vec![a.clone(), c.clone()], |g, v| {
            let mx = g.max(v[0], v[1]);
            let mn = g.min(v[0], v[1]);
            g.mul(mx, mn)
        });
        let s = Mat::filled(1, 1, 0.7);
        check(vec![a.clone(), s], |g, v| g.scale_by(v[0], v[1]));
    }

    #[test]
    fn unary_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 5);
        let weights = rand_mat(&mut rng, 3, 5);
        // weight the outputs so row-normalizing ops get a non-trivial upstream gradient
        let wrap = move |f: fn(&mut Graph<f64>, Var) -> Var| {
            let w = Arc::new(weights.clone());
            move |g: &mut Graph<f64>, v: &[Var]| {
                let y = f(g, v[0]);
                g.mul_const(y, Arc::clone(&w))
            }
        };
        check(vec![a.clone()], wrap(|g, x| g.gelu(x)));
        check(vec![a.clone()], wrap(|g, x| g.sigmoid(x)));
        check(vec![a.clone()], wrap(|g, x| g.exp(x)));
        check(vec![a.map(|x| x.abs() + 0.1)], wrap(|g, x| g.log(x)));
        check(vec![a.clone()], wrap(|g, x| g.abs(x)));
        check(vec![a.clone()], wrap(|g, x| g.relu(x)));
        check(vec![a.clone()], wrap(|g, x| g.softmax_rows(x)));
        check(vec![a.clone()], wrap(|g, x| g.log_softmax_rows(x)));
        check(vec![a.clone()], wrap(|g, x| g.layer_norm(x, 1e-6)));
        check(vec![a.clone()], wrap(|g, x| g.l2_normalize_rows(x, 1e-8)));
        check(vec![a.clone()], wrap(|g, x| g.clamp_max(x, 0.3)));
        check(vec![a.clone()], wrap(|g, x| {
            let t = g.transpose(x);
            g.transpose(t)
        }));
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 2, 3);
        let w = Arc::new(rand_mat(&mut rng, 6, 3));
        check(vec![a.clone(), b.clone()], move |g, v| {
            let c = g.concat_rows(&[v[0], v[1]]);
            g.mul_const(c, Arc::clone(&w))
        });
        check(vec![a.clone()], |g, v| {
            let l = g.slice_cols(v[0], 0, 2);
            let r = g.slice_cols(v[0], 1, 2);
            let c = g.concat_cols(&[l, r]);
            let s = g.slice_rows(c, 1, 2);
            g.mul(s, s)
        });
        check(vec![a.clone()], |g, v| {
            let r = g.gather_rows(v[0], &[3, 0, 3]);
            g.mul(r, r)
        });
        check(vec![a.clone()], |g, v| {
            let m = g.mean_rows(v[0]);
            g.mul(m, m)
        });
        check(vec![a.clone()], |g, v| {
            let s = g.sum_cols(v[0]);
            g.mul(s, s)
        });
        let t = Arc::new(Mat::from_fn(4, 3, |i, j| ((i + j) % 2) as f64));
        check(vec![a.clone()], move |g, v| g.bce_with_logits(v[0], Arc::clone(&t)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant_mat(Mat::filled(2, 2, 1.0));
        let p = g.param(Arc::new(Mat::filled(2, 2, 2.0)));
        let y = g.mul(c, p);
        let l = g.sum_all(y);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Arc::new(Mat::from_vec(1, 2, vec![80.0, -80.0]).unwrap()));
        let t = Arc::new(Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        let l = g.bce_with_logits(x, t);
        assert!(g.value(l).data().iter().all(|v| v.is_finite() && *v < 1e-6));
    }
}
