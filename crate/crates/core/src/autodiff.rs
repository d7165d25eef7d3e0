//! Minimal reverse-mode differentiation over 2-D arrays.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes. Parameters
//! are borrowed, never copied. [`Tape::backward`] seeds any set of nodes
//! with upstream gradients and returns one gradient per parameter tensor.
//! The op set is exactly what the embedder and encoder need; ops such as
//! layer normalization and masked softmax are fused so their backward
//! passes stay exact and cheap.

use std::fmt::{Debug, Display};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the model: `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Array2<T>),
    Gather {
        table: Var,
        rows: Vec<Option<usize>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    Gelu(Var),
    MaskedSoftmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
}

struct Node<T> {
    value: Option<Array2<T>>,
    op: Op<T>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p [Array2<T>],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

/// Row-wise layer normalization; returns `(y, xhat, inv_std)`.
pub fn layer_norm<T: Scalar>(
    x: ArrayView2<T>,
    gain: ArrayView2<T>,
    bias: ArrayView2<T>,
    eps: T,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let n = T::c(x.ncols() as f64);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / n;
        *inv = T::one() / (var + eps).sqrt();
        let i = *inv;
        row.mapv_inplace(|v| v * i);
    }
    let y = &xhat * &gain.row(0) + bias.row(0);
    (y, xhat, inv_std)
}

/// Row-wise softmax over the admissible columns; other entries are 0.
pub fn masked_softmax<T: Scalar>(x: ArrayView2<T>, admissible: &[bool]) -> Array2<T> {
    let mut y = Array2::zeros(x.raw_dim());
    for (xr, mut yr) in x.rows().into_iter().zip(y.rows_mut()) {
        let max = xr
            .iter()
            .zip(admissible)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for ((yv, &xv), &a) in yr.iter_mut().zip(xr.iter()).zip(admissible) {
            if a {
                *yv = (xv - max).exp();
                sum += *yv;
            }
        }
        yr.mapv_inplace(|v| v / sum);
    }
    y
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [Array2<T>]) -> Self {
        Tape {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Option<Array2<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a.view(),
            (None, Op::Param(i)) => self.params[*i].view(),
            (None, _) => unreachable!("every non-parameter node stores its value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(Some(value), Op::Constant)
    }

    /// Leaf for parameter tensor `index`; repeated calls share one node.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let v = self.push(None, Op::Param(index));
        self.param_vars[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b));
        self.push(Some(y), Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        self.push(Some(y), Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = &self.value(a) + &self.value(b);
        self.push(Some(y), Op::Add(a, b))
    }

    /// `x + b` with `b` a single row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let y = &self.value(x) + &self.value(b).row(0);
        self.push(Some(y), Op::AddRow(x, b))
    }

    /// `x · w + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = &self.value(x) * k;
        self.push(Some(y), Op::Scale(x, k))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Array2<T>) -> Var {
        let y = &self.value(x) * &mask;
        self.push(Some(y), Op::MulConst(x, mask))
    }

    /// Rows of `table`; `None` yields a zero row.
    pub fn gather(&mut self, table: Var, rows: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut y = Array2::zeros((rows.len(), t.ncols()));
        for (mut out, r) in y.rows_mut().into_iter().zip(&rows) {
            if let Some(r) = r {
                out.assign(&t.row(*r));
            }
        }
        self.push(Some(y), Op::Gather { table, rows })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let (y, xhat, inv_std) = layer_norm(self.value(x), self.value(gain), self.value(bias), eps);
        self.push(
            Some(y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(gelu);
        self.push(Some(y), Op::Gelu(x))
    }

    pub fn masked_softmax(&mut self, x: Var, admissible: &[bool]) -> Var {
        let y = masked_softmax(self.value(x), admissible);
        self.push(Some(y), Op::MaskedSoftmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(Some(y), Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Some(y), Op::ConcatCols(parts))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let y = self.value(x).select(Axis(0), &rows);
        self.push(Some(y), Op::SelectRows(x, rows))
    }

    /// Propagates the seeded upstream gradients back through the tape and
    /// returns the gradient of every parameter tensor (`None` when a
    /// parameter did not take part).
    pub fn backward(&self, seeds: Vec<(Var, Array2<T>)>) -> Vec<Option<Array2<T>>> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Array2<T>>> = (0..self.params.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(p) => accumulate(&mut param_grads[*p], g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(&self.value(*b));
                    let db = g.t().dot(&self.value(*a));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow(x, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[b.0], db);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Scale(x, k) => accumulate(&mut grads[x.0], g * *k),
                Op::MulConst(x, mask) => accumulate(&mut grads[x.0], g * mask),
                Op::Gather { table, rows } => {
                    let shape = self.value(*table).raw_dim();
                    let mut dt = Array2::zeros(shape);
                    for (gr, r) in g.rows().into_iter().zip(rows) {
                        if let Some(r) = r {
                            let mut row = dt.row_mut(*r);
                            row += &gr;
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain);
                    let dgain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &gain_v.row(0);
                    let n = T::c(xhat.ncols() as f64);
                    let mut dx = Array2::zeros(g.raw_dim());
                    for (((mut out, dh), xh), &inv) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .zip(inv_std)
                    {
                        let sum_d = dh.sum();
                        let sum_dx = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &h| {
                            *o = inv / n * (n * d - sum_d - h * sum_dx);
                        });
                    }
                    accumulate(&mut grads[gain.0], dgain);
                    accumulate(&mut grads[bias.0], dbias);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= &g;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MaskedSoftmax(x) => {
                    let y = self.value(Var(i));
                    let mut dx = Array2::zeros(g.raw_dim());
                    for ((mut out, yr), gr) in dx.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        Zip::from(&mut out).and(&yr).and(&gr).for_each(|o, &yv, &gv| {
                            *o = yv * (gv - dot);
                        });
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SliceCols(x, start) => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads[p.0], g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SelectRows(x, rows) => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    for (gr, &r) in g.rows().into_iter().zip(rows) {
                        let mut row = dx.row_mut(r);
                        row += &gr;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
        }
        param_grads
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array2<T>>, g: Array2<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}
