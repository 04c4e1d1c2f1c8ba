//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! Every forward pass records its operations on a [`Graph`]; calling
//! [`Graph::backward`] walks the tape once in reverse and accumulates the
//! gradient of a scalar output into a [`GradBuffer`] shaped like the
//! parameter store.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    Dropout(Var, Matrix<T>),
    Rows(Var, usize),
    Cols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Windows {
        x: Var,
        stride: usize,
    },
    PadRows(Var),
    Sum(Var),
    Transpose(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub const LN_EPS: f64 = 1e-5;

pub struct Graph<'s, T> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            dropout_rng: None,
        }
    }

    /// Training-mode graph: dropout masks are drawn from `rng`.
    pub fn training(store: &'s ParamStore<T>, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(store);
        g.dropout_rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m[(0, 0)]
    }

    /// Outputs of every row-softmax recorded so far.
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::RowSoftmax(_) => Some(&n.value),
            _ => None,
        })
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul {:?} x {:?}", va.shape(), vb.shape());
        let out = va.matmul(vb);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_t {:?} x {:?}ᵀ", va.shape(), vb.shape());
        let out = va.matmul_t(vb);
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "add", |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "sub", |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "mul", |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    fn binary(&self, a: Var, b: Var, op: &str, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{op} shape mismatch");
        va.zip_map(vb, f)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), (1, va.cols()), "add_row width mismatch");
        let out = Matrix::from_fn(va.rows(), va.cols(), |r, c| va[(r, c)] + vr[(0, c)]);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::ScaleBy(a, s))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    /// `1 − a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() - x);
        self.push(out, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// `ln(1 + eˣ)`, the smooth rectifier used in every feed-forward layer.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a))
    }

    /// Softmax over each row independently.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = row_softmax(self.value(a));
        self.push(out, Op::RowSoftmax(a))
    }

    /// Per-row normalization with learnable `1 × c` gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        assert_eq!(self.value(gain).shape(), (1, cols), "layer_norm gain width");
        assert_eq!(self.value(offset).shape(), (1, cols), "layer_norm offset width");
        let n = T::of_usize(cols);
        let eps = T::of(LN_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
            rstd.push(s);
        }
        let (vg, vo) = (self.value(gain), self.value(offset));
        let out = Matrix::from_fn(rows, cols, |r, c| xhat[(r, c)] * vg[(0, c)] + vo[(0, c)]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
        )
    }

    /// Inverted dropout; identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        if p <= 0.0 {
            return a;
        }
        let (rows, cols) = self.nodes[a.0].value.shape();
        let keep = T::of(1.0 / (1.0 - p));
        let mask = Matrix::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < p { T::zero() } else { keep });
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(out, Op::Dropout(a, mask))
    }

    /// Rows `start..start + len`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "row slice out of range");
        let out = Matrix::from_fn(len, va.cols(), |r, c| va[(start + r, c)]);
        self.push(out, Op::Rows(a, start))
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "column slice out of range");
        let out = Matrix::from_fn(va.rows(), len, |r, c| va[(r, start + c)]);
        self.push(out, Op::Cols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.as_slice());
            rows += v.rows();
        }
        let out = Matrix::from_vec(rows, cols, data).expect("concat_rows shape");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean over rows, giving `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = T::of_usize(va.rows());
        let out = Matrix::from_fn(1, va.cols(), |_, c| (0..va.rows()).map(|r| va[(r, c)]).sum::<T>() / n);
        self.push(out, Op::MeanRows(a))
    }

    /// Flattens every valid window `[t·stride, t·stride + kernel)` into one row.
    pub fn windows(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let vx = self.value(x);
        let (len, width) = vx.shape();
        assert!(kernel >= 1 && stride >= 1 && len >= kernel, "invalid window");
        let out_len = (len - kernel) / stride + 1;
        let out = Matrix::from_fn(out_len, kernel * width, |t, j| vx[(t * stride + j / width, j % width)]);
        self.push(out, Op::Windows { x, stride })
    }

    /// Appends zero rows up to `total` rows.
    pub fn pad_rows(&mut self, a: Var, total: usize) -> Var {
        let va = self.value(a);
        assert!(total >= va.rows(), "pad_rows would truncate");
        if total == va.rows() {
            return a;
        }
        let mut data = va.as_slice().to_vec();
        data.resize(total * va.cols(), T::zero());
        let out = Matrix::from_vec(total, va.cols(), data).expect("pad shape");
        self.push(out, Op::PadRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().copied().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Accumulates `scale · ∂output/∂θ` into `grads` for every parameter reached.
    pub fn backward(&self, output: Var, scale: T, grads: &mut GradBuffer<T>) {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut adj: Vec<Option<Matrix<T>>> = Vec::with_capacity(output.0 + 1);
        adj.resize_with(output.0 + 1, || None);
        adj[output.0] = Some(Matrix::scalar(scale));

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|x| -x));
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = Matrix::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g[(r, c)]).sum::<T>());
                    acc(&mut adj, *row, gr);
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let gs = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*a).as_slice())
                        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    acc(&mut adj, *s, Matrix::scalar(gs));
                    acc(&mut adj, *a, g.map(|x| x * k));
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(&mut adj, *a, g.map(|x| x * k));
                }
                Op::OneMinus(a) => acc(&mut adj, *a, g.map(|x| -x)),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (T::one() - y * y));
                    acc(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (T::one() - y));
                    acc(&mut adj, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| x * sigmoid(z));
                    acc(&mut adj, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| {
                        if z > T::zero() {
                            x
                        } else if z < T::zero() {
                            -x
                        } else {
                            T::zero()
                        }
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot = g.row(r).iter().zip(y.row(r)).fold(T::zero(), |s, (&x, &p)| s + x * p);
                        for c in 0..y.cols() {
                            ga[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    offset,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = xhat.shape();
                    let vg = self.value(*gain);
                    let n = T::of_usize(cols);
                    let mut g_gain = Matrix::zeros(1, cols);
                    let mut g_off = Matrix::zeros(1, cols);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let gv = g[(r, c)];
                            g_gain[(0, c)] += gv * xhat[(r, c)];
                            g_off[(0, c)] += gv;
                            let d = gv * vg[(0, c)];
                            mean_d += d;
                            mean_dx += d * xhat[(r, c)];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            let d = g[(r, c)] * vg[(0, c)];
                            gx[(r, c)] = rstd[r] * (d - mean_d - xhat[(r, c)] * mean_dx);
                        }
                    }
                    acc(&mut adj, *gain, g_gain);
                    acc(&mut adj, *offset, g_off);
                    acc(&mut adj, *x, gx);
                }
                Op::Dropout(a, mask) => acc(&mut adj, *a, g.zip_map(mask, |x, m| x * m)),
                Op::Rows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Cols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let gp = Matrix::from_vec(rows, cols, g.as_slice()[off * cols..(off + rows) * cols].to_vec())
                            .expect("concat_rows split");
                        off += rows;
                        acc(&mut adj, p, gp);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let gp = Matrix::from_fn(rows, cols, |r, c| g[(r, off + c)]);
                        off += cols;
                        acc(&mut adj, p, gp);
                    }
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let n = T::of_usize(rows);
                    acc(&mut adj, *a, Matrix::from_fn(rows, cols, |_, c| g[(0, c)] / n));
                }
                Op::Windows { x, stride } => {
                    let (len, width) = self.shape(*x);
                    let mut gx = Matrix::zeros(len, width);
                    for t in 0..g.rows() {
                        for j in 0..g.cols() {
                            gx[(t * stride + j / width, j % width)] += g[(t, j)];
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::PadRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let ga = Matrix::from_vec(rows, cols, g.as_slice()[..rows * cols].to_vec()).expect("pad split");
                    acc(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut adj, *a, Matrix::filled(rows, cols, g[(0, 0)]));
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
            }
        }
    }
}

fn acc<T: Scalar>(adj: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn row_softmax<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
