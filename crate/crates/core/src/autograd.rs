//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1×1`. A [`Graph`] borrows a
//! [`ParamStore`] so parameter leaves are read in place, and
//! [`Graph::backward`] returns gradients keyed by [`ParamId`]. Only nodes
//! that transitively depend on a trainable parameter record gradients, which
//! keeps frozen-backbone finetuning cheap.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Gradients indexed by parameter id; `None` for parameters that received none.
#[derive(Debug, Clone)]
pub struct Gradients(Vec<Option<Mat>>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(vec![None; store.len()])
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds `scale * other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.scaled_add(scale, src),
                    None => *dst = Some(src * scale),
                }
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Unfold { x: Var, window: usize, stride: usize },
    MeanRows(Var),
    Sum(Var),
    SumSq(Var),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// A single forward pass recorded for differentiation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    trainable: Option<&'p [bool]>,
    record: bool,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    /// A graph where every parameter is differentiable.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            trainable: None,
            record: true,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// Only parameters with `trainable[id] == true` receive gradients.
    pub fn with_trainable(params: &'p ParamStore, trainable: &'p [bool]) -> Self {
        Graph {
            trainable: Some(trainable),
            ..Graph::new(params)
        }
    }

    /// Forward-only evaluation; `backward` yields no gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            record: false,
            ..Graph::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let trainable = self.trainable.is_none_or(|t| t[id.0]);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.record && trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` by a `1×m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow(a, row), &[a, row])
    }

    /// Multiplies every column of `a` by an `n×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let out = self.value(a) * self.value(col);
        self.push(out, Op::MulCol(a, col), &[a, col])
    }

    /// Multiplies `a` by a `1×1` variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let out = self.value(a) * k;
        self.push(out, Op::MulScalar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| gelu(x).0);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a).view());
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        let mut out = Mat::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (mut o, row) in out.rows_mut().into_iter().zip(x.rows()) {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            Zip::from(&mut o).and(&row).for_each(|o, &v| *o = (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| v / nrm);
            norms.push(nrm);
        }
        self.push(out, Op::NormalizeRows { x: a, norms }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    /// Gathers sliding windows of `window` rows with the given stride; each
    /// output row is the row-major flattening of one window.
    pub fn unfold(&mut self, a: Var, window: usize, stride: usize) -> Var {
        let x = self.value(a);
        let (n, c) = x.dim();
        assert!(window >= 1 && stride >= 1 && n >= window, "unfold: bad window");
        let count = (n - window) / stride + 1;
        let mut out = Mat::zeros((count, window * c));
        for w in 0..count {
            for j in 0..window {
                out.slice_mut(s![w, j * c..(j + 1) * c])
                    .assign(&x.row(w * stride + j));
            }
        }
        self.push(out, Op::Unfold { x: a, window, stride }, &[a])
    }

    /// Column means as a `1×m` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = x.mean_axis(Axis(0)).expect("mean_rows of empty").insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).iter().map(|x| x * x).sum());
        self.push(out, Op::SumSq(a), &[a])
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut out = Gradients::zeros_like(self.params);
        if !self.nodes[loss.0].needs_grad {
            return out;
        }
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let ng = |v: &Var| self.nodes[v.0].needs_grad;
            let mut acc = |v: Var, d: Mat| match &mut grads[v.0] {
                Some(e) => *e += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.0[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    if ng(a) {
                        acc(*a, g.dot(&self.value(*b).t()));
                    }
                    if ng(b) {
                        acc(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if ng(a) {
                        acc(*a, g.dot(self.value(*b)));
                    }
                    if ng(b) {
                        acc(*b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if ng(a) && ng(b) {
                        acc(*a, g.clone());
                        acc(*b, g);
                    } else if ng(a) {
                        acc(*a, g);
                    } else if ng(b) {
                        acc(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if ng(b) {
                        acc(*b, -&g);
                    }
                    if ng(a) {
                        acc(*a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if ng(a) {
                        acc(*a, &g * self.value(*b));
                    }
                    if ng(b) {
                        acc(*b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, r) => {
                    if ng(r) {
                        acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if ng(a) {
                        acc(*a, g);
                    }
                }
                Op::MulRow(a, r) => {
                    if ng(r) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(*r, d);
                    }
                    if ng(a) {
                        acc(*a, &g * self.value(*r));
                    }
                }
                Op::MulCol(a, c) => {
                    if ng(c) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(*c, d);
                    }
                    if ng(a) {
                        acc(*a, &g * self.value(*c));
                    }
                }
                Op::MulScalar(a, s) => {
                    if ng(s) {
                        let d = (&g * self.value(*a)).sum();
                        acc(*s, Mat::from_elem((1, 1), d));
                    }
                    if ng(a) {
                        let k = self.scalar(*s);
                        acc(*a, g * k);
                    }
                }
                Op::Scale(a, k) => acc(*a, g * *k),
                Op::Silu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        let sg = sigmoid(x);
                        *d *= sg * (1.0 + x * (1.0 - sg));
                    });
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    acc(*a, d);
                }
                Op::Gelu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu(x).1);
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = y * (*d - dot));
                    }
                    acc(*a, d);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.as_ref().unwrap();
                    let m = y.ncols() as f64;
                    let mut d = g;
                    for ((mut drow, yrow), is) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std)
                    {
                        let mean_d = drow.sum() / m;
                        let mean_dy: f64 =
                            drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / m;
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &y| *d = is * (*d - mean_d - y * mean_dy));
                    }
                    acc(*x, d);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    for ((mut drow, yrow), nrm) in d.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &y| *d = (*d - y * dot) / nrm);
                    }
                    acc(*x, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        if ng(p) {
                            acc(*p, g.slice(s![off..off + n, ..]).to_owned());
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        if ng(p) {
                            acc(*p, g.slice(s![.., off..off + n]).to_owned());
                        }
                        off += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::Unfold { x, window, stride } => {
                    let (n, c) = self.shape(*x);
                    let mut d = Mat::zeros((n, c));
                    for w in 0..g.nrows() {
                        for j in 0..*window {
                            let mut row = d.row_mut(w * stride + j);
                            row += &g.slice(s![w, j * c..(j + 1) * c]);
                        }
                    }
                    acc(*x, d);
                }
                Op::MeanRows(a) => {
                    let (n, m) = self.shape(*a);
                    let row = &g / n as f64;
                    acc(*a, row.broadcast((n, m)).unwrap().to_owned());
                }
                Op::Sum(a) => {
                    let k = g[[0, 0]];
                    acc(*a, Mat::from_elem(self.shape(*a), k));
                }
                Op::SumSq(a) => {
                    let k = 2.0 * g[[0, 0]];
                    acc(*a, self.value(*a) * k);
                }
            }
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh-approximated GELU and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
}

pub fn softmax_rows(x: ArrayView2<'_, f64>) -> Mat {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}
