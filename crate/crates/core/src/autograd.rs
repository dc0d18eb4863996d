//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value in a [`Graph`] is a 2-D array. Sequences of variable length are
//! handled by the model layers as packed row blocks, so no op here needs a
//! notion of padding. The engine is generic over `f32` (training) and `f64`
//! (gradient checks).

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{s, Array2, Axis, LinalgScalar, ScalarOperand, Zip};

/// Scalar types the engine can run on.
pub trait Float:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Float for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Converts an `f32` matrix into the engine's scalar type.
pub fn cast_array<S: Float, T: Float>(a: &Array2<S>) -> Array2<T> {
    a.mapv(|v| T::of(v.f64()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    /// Learning-rate group; the optimizer applies a per-group scale.
    pub group: String,
    pub value: Array2<T>,
}

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: &str, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group: group.to_string(),
            value,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    value: cast_array(&p.value),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
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
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Rc<[Option<usize>]>),
    Transpose(Var),
    SumAll(Var),
    RowGather(Var, Rc<[usize]>),
    RowScatter(Var, Rc<[usize]>),
}

enum Value<'p, T> {
    Owned(Array2<T>),
    Borrowed(&'p Array2<T>),
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op,
    needs_grad: bool,
}

/// A tape of operations. Parameters are borrowed from a [`ParamSet`], never copied.
pub struct Graph<'p, T: Float> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<'p, T>>,
    param_vars: Vec<Option<Var>>,
}

fn sum_rows<T: Float>(a: &Array2<T>) -> Array2<T> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(4096),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Borrowed(a) => a,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    /// Leaf node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(self.params.value(id)),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients (used for input-sensitivity checks).
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Copy of `a` with gradient flow cut.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `[1 × d]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row width mismatch");
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `[1 × d]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row width mismatch");
        let v = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * T::of(c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + T::of(c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let v = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    /// Per-row normalization to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let (mean, inv) = row_stats(row.view(), eps);
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let ng = self.ng(a);
        self.push(v, Op::LayerNorm(a, eps), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows, "concat_cols row mismatch");
            v.slice_mut(s![.., off..off + pv.ncols()]).assign(pv);
            off += pv.ncols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), cols, "concat_rows col mismatch");
            v.slice_mut(s![off..off + pv.nrows(), ..]).assign(pv);
            off += pv.nrows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    /// Builds a matrix from rows of `a`; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Var {
        let av = self.value(a);
        let mut v = Array2::zeros((index.len(), av.ncols()));
        for (r, i) in index.iter().enumerate() {
            if let Some(i) = *i {
                v.row_mut(r).assign(&av.row(i));
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::Gather(a, index.into()), ng)
    }

    /// `gather_rows` with every index present.
    pub fn select_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let idx: Vec<Option<usize>> = index.iter().map(|&i| Some(i)).collect();
        self.gather_rows(a, &idx)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `out[i][j] = a[i][map[i * width + j]]`.
    pub fn row_gather(&mut self, a: Var, width: usize, map: Rc<[usize]>) -> Var {
        let av = self.value(a);
        let rows = av.nrows();
        assert_eq!(map.len(), rows * width);
        let mut v = Array2::zeros((rows, width));
        for i in 0..rows {
            for j in 0..width {
                v[[i, j]] = av[[i, map[i * width + j]]];
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::RowGather(a, map), ng)
    }

    /// `out[i][map[i * cols(a) + j]] += a[i][j]`; the adjoint of [`Graph::row_gather`].
    pub fn row_scatter(&mut self, a: Var, width: usize, map: Rc<[usize]>) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.dim();
        assert_eq!(map.len(), rows * cols);
        let mut v = Array2::zeros((rows, width));
        for i in 0..rows {
            for j in 0..cols {
                v[[i, map[i * cols + j]]] += av[[i, j]];
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::RowScatter(a, map), ng)
    }

    /// Reverse sweep from a `[1 × 1]` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar node");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = vec![None; self.params.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                params[pid] = grads[v.0].clone();
            }
        }
        Gradients { nodes: grads, params }
    }

    fn acc(&self, grads: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*r) {
                    self.acc(grads, *r, sum_rows(g));
                }
            }
            Op::MulRow(a, r) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*r));
                }
                if self.ng(*r) {
                    self.acc(grads, *r, sum_rows(&(g * self.value(*a))));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * T::of(*c)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= T::one() - y * y);
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (T::one() - y));
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= T::zero() {
                        *d = T::zero()
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => self.acc(grads, *a, g * out),
            Op::Abs(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    *d *= if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Square(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= x + x);
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot: T = drow.iter().zip(yrow.iter()).map(|(&g, &y)| g * y).sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = y * (*d - dot));
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let gs: T = drow.sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &y| *d = *d - y.exp() * gs);
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let mut d = g.clone();
                let n = T::of(x.ncols() as f64);
                for ((mut drow, xrow), yrow) in
                    d.rows_mut().into_iter().zip(x.rows()).zip(out.rows())
                {
                    let (_, inv) = row_stats(xrow, *eps);
                    let mean_g = drow.sum() / n;
                    let mean_gy: T =
                        drow.iter().zip(yrow.iter()).map(|(&g, &y)| g * y).sum::<T>() / n;
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &y| *d = inv * (*d - mean_g - y * mean_gy));
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![.., off..off + c]).to_owned());
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![off..off + r, ..]).to_owned());
                    }
                    off += r;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::Gather(a, index) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (r, i) in index.iter().enumerate() {
                    if let Some(i) = *i {
                        let mut dst = d.row_mut(i);
                        dst += &g.row(r);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::SumAll(a) => {
                let gv = g[[0, 0]];
                self.acc(grads, *a, Array2::from_elem(self.shape(*a), gv));
            }
            Op::RowGather(a, map) => {
                let (rows, width) = g.dim();
                let mut d = Array2::zeros(self.shape(*a));
                for r in 0..rows {
                    for j in 0..width {
                        d[[r, map[r * width + j]]] += g[[r, j]];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::RowScatter(a, map) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Array2::zeros((rows, cols));
                for r in 0..rows {
                    for j in 0..cols {
                        d[[r, j]] = g[[r, map[r * cols + j]]];
                    }
                }
                self.acc(grads, *a, d);
            }
        }
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn row_stats<T: Float>(row: ndarray::ArrayView1<T>, eps: f64) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.sum() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::of(eps)).sqrt())
}

/// Numerically stable softmax of a slice.
pub fn softmax_in_place<T: Float>(xs: &mut [T]) {
    let m = xs.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Array2<T>>>,
    params: Vec<Option<Array2<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a parameter, `None` when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Array2<T>> {
        self.params[id.0].as_ref()
    }

    /// Gradient of any node, e.g. an [`Graph::input`] leaf.
    pub fn of(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn into_param_grads(self) -> Vec<Option<Array2<T>>> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x0: Array2<f64>) {
        let params = ParamSet::<f64>::new();
        let mut g = Graph::new(&params);
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.of(x).cloned().unwrap_or_else(|| Array2::zeros(x0.dim()));
        let eps = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut g = Graph::new(&params);
                let x = g.input(xp);
                let y = build(&mut g, x);
                g.scalar_value(y)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic[[r, c]];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "entry ({r},{c}): analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn x0() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        fd_check(|g, x| { let t = g.tanh(x); g.sum_all(t) }, x0());
        fd_check(|g, x| { let t = g.sigmoid(x); let t = g.square(t); g.sum_all(t) }, x0());
        fd_check(|g, x| { let t = g.exp(x); let t = g.abs(t); g.mean_all(t) }, x0());
        fd_check(|g, x| { let t = g.relu(x); let t = g.mul(t, x); g.sum_all(t) }, x0());
    }

    #[test]
    fn row_ops_match_finite_differences() {
        let w = array![[0.5, -0.2, 0.1], [0.3, 0.9, -0.7], [1.0, 0.0, 0.4]];
        fd_check(
            move |g, x| {
                let s = g.softmax_rows(x);
                let c = g.constant(w.clone());
                let y = g.matmul(s, c);
                let y = g.square(y);
                g.sum_all(y)
            },
            x0(),
        );
        fd_check(
            |g, x| {
                let s = g.log_softmax_rows(x);
                let s = g.slice_cols(s, 1, 1);
                g.sum_all(s)
            },
            x0(),
        );
        fd_check(
            |g, x| {
                let n = g.layer_norm(x, 1e-5);
                let w = g.constant(array![[1.0, 2.0, -3.0]]);
                let y = g.mul_row(n, w);
                let y = g.tanh(y);
                g.sum_all(y)
            },
            x0(),
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        fd_check(
            |g, x| {
                let t = g.transpose(x);
                let p = g.matmul(x, t);
                let q = g.matmul_t(x, x);
                let d = g.sub(p, q);
                let r = g.add(p, d);
                let r = g.square(r);
                g.sum_all(r)
            },
            x0(),
        );
        fd_check(
            |g, x| {
                let a = g.slice_rows(x, 1, 1);
                let b = g.gather_rows(x, &[Some(1), None, Some(0), Some(1)]);
                let c = g.concat_rows(&[a, b]);
                let d = g.concat_cols(&[c, c]);
                let d = g.tanh(d);
                let r = g.slice_rows(x, 0, 1);
                let e = g.add_row(x, r);
                let e = g.square(e);
                let s1 = g.sum_all(d);
                let s2 = g.sum_all(e);
                let t = g.add(s1, s2);
                g.scale(t, 0.5)
            },
            x0(),
        );
    }

    #[test]
    fn row_gather_and_scatter_are_adjoint() {
        let map: Rc<[usize]> = vec![0, 0, 2, 1, 2, 2].into();
        fd_check(
            move |g, x| {
                let y = g.row_gather(x, 3, map.clone());
                let y = g.square(y);
                let z = g.row_scatter(y, 3, map.clone());
                let z = g.tanh(z);
                g.sum_all(z)
            },
            x0(),
        );
    }

    #[test]
    fn params_are_shared_and_receive_gradients() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", "main", array![[2.0]]);
        let unused = ps.add("u", "main", array![[1.0]]);
        let mut g = Graph::new(&ps);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.param(w).unwrap()[[0, 0]], 4.0);
        assert!(grads.param(unused).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", "main", array![[3.0]]);
        let mut g = Graph::new(&ps);
        let a = g.param(w);
        let d = g.detach(a);
        let y = g.mul(a, d);
        let grads = g.backward(y);
        assert_eq!(grads.param(w).unwrap()[[0, 0]], 3.0);
    }
}
