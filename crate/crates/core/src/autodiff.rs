//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to its variables. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! returns gradients for every trainable leaf registered on the tape.
//!
//! Matrix primitives work on 2-D tensors `[rows, cols]`; elementwise
//! primitives accept any shape as long as both operands agree.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Errors raised while recording or differentiating a computation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at node {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} is not recorded on this tape")]
    NotOnTape(usize),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Matrix `[rows, cols]` from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Row vector `[1, n]`.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AutodiffError::InvalidTensor("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }

    /// First element; meaningful for scalars.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn transposed(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let n = other.cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-½·ln(2π)`, the log-density of a standard normal at its mean.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Log-density of `N(mean, std²)` at `x`.
pub fn gaussian_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -HALF_LN_2PI - std.ln() - 0.5 * z * z
}

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Insertion order is the canonical flattening order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalars across the given parameters.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.values[id.0].numel()).sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_scalars() {
            return Err(AutodiffError::InvalidTensor(format!(
                "flat vector has {} values, store holds {}",
                flat.len(),
                self.total_scalars()
            )));
        }
        let mut offset = 0;
        for t in &mut self.values {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Softplus(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastScalar(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SoftmaxRows(usize),
    Reshape(usize),
    GaussianLogPdf(usize, usize, usize),
    TriMatVec(usize, usize),
    LogAbsDetTriangular(usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Record of a single forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    bound: BTreeMap<ParamId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient for a parameter bound on the tape. Unreached parameters hold zeros.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    /// Gradient for an arbitrary leaf or parameter variable.
    pub fn wrt(&self, var: Var) -> Result<&Tensor> {
        if var.tape != self.tape {
            return Err(AutodiffError::NotOnTape(var.index));
        }
        self.leaves
            .get(var.index)
            .and_then(Option::as_ref)
            .ok_or(AutodiffError::NotOnTape(var.index))
    }

    /// Flatten gradients in `store` order; parameters absent from the tape give zeros.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.total_scalars());
        for (id, _, value) in store.iter() {
            match self.params.get(&id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, value.numel())),
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if a.shape.len() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: vec![0, 0],
        });
    }
    Ok(())
}

fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Position of lower-triangular entry `(k, j)`, `j <= k`, in packed row-major order.
pub fn packed_index(k: usize, j: usize) -> usize {
    k * (k + 1) / 2 + j
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::NotOnTape(v.index));
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        let index = self.nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name, index });
        }
        self.nodes.push(Node { op, value });
        Ok(Var { index, tape: self.id })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.index].value.item()
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, "constant")
    }

    /// Trainable input bound to `store[id]`. Binding the same id twice returns the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&index) = self.bound.get(&id) {
            return Ok(Var { index, tape: self.id });
        }
        let v = self.push(Op::Param, store.get(id).clone(), "param")?;
        self.bound.insert(id, v.index);
        Ok(v)
    }

    /// Parameters bound so far, in id order.
    pub fn bound_params(&self) -> Vec<ParamId> {
        self.bound.keys().copied().collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("add", x, y)?;
        let out = x.zip(y, |p, q| p + q);
        self.push(Op::Add(ia, ib), out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("sub", x, y)?;
        let out = x.zip(y, |p, q| p - q);
        self.push(Op::Sub(ia, ib), out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("mul", x, y)?;
        let out = x.zip(y, |p, q| p * q);
        self.push(Op::Mul(ia, ib), out, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("div", x, y)?;
        let out = x.zip(y, |p, q| p / q);
        self.push(Op::Div(ia, ib), out, "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * c);
        self.push(Op::Scale(ia, c), out, "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v + c);
        self.push(Op::AddScalar(ia), out, "add_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        require_matrix("matmul", x)?;
        require_matrix("matmul", y)?;
        if x.cols() != y.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: x.shape.clone(),
                rhs: y.shape.clone(),
            });
        }
        let out = x.matmul(y);
        self.push(Op::MatMul(ia, ib), out, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        require_matrix("transpose", &self.nodes[ia].value)?;
        let out = self.nodes[ia].value.transposed();
        self.push(Op::Transpose(ia), out, "transpose")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f64::exp);
        self.push(Op::Exp(ia), out, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f64::ln);
        self.push(Op::Log(ia), out, "log")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f64::tanh);
        self.push(Op::Tanh(ia), out, "tanh")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(softplus);
        self.push(Op::Softplus(ia), out, "softplus")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(sigmoid);
        self.push(Op::Sigmoid(ia), out, "sigmoid")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f64::sqrt);
        self.push(Op::Sqrt(ia), out, "sqrt")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * v);
        self.push(Op::Square(ia), out, "square")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data.iter().sum();
        self.push(Op::Sum(ia), Tensor::scalar(s), "sum")
    }

    /// `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        require_matrix("sum_rows", x)?;
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        self.push(Op::SumRows(ia), Tensor::row(out), "sum_rows")
    }

    /// `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        require_matrix("sum_cols", x)?;
        let m = x.rows();
        let out: Vec<f64> = (0..m).map(|i| x.row_slice(i).iter().sum()).collect();
        self.push(Op::SumCols(ia), Tensor::matrix(m, 1, out)?, "sum_cols")
    }

    /// `[1, n] -> [rows, n]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.shape.len() != 2 || x.rows() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: x.shape.clone(),
                rhs: vec![1, x.cols()],
            });
        }
        let n = x.cols();
        let data = x.data.repeat(rows);
        self.push(Op::BroadcastRows(ia), Tensor::matrix(rows, n, data)?, "broadcast_rows")
    }

    /// `[m, 1] -> [m, cols]`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.shape.len() != 2 || x.cols() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_cols",
                lhs: x.shape.clone(),
                rhs: vec![x.rows(), 1],
            });
        }
        let m = x.rows();
        let data: Vec<f64> = x.data.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
        self.push(Op::BroadcastCols(ia), Tensor::matrix(m, cols, data)?, "broadcast_cols")
    }

    /// Single-element tensor broadcast to `shape`.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.numel() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_scalar",
                lhs: x.shape.clone(),
                rhs: Vec::new(),
            });
        }
        let out = Tensor::filled(shape, x.data[0]);
        self.push(Op::BroadcastScalar(ia), out, "broadcast_scalar")
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        require_matrix("slice_rows", x)?;
        if start > end || end > x.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_rows",
                lhs: x.shape.clone(),
                rhs: vec![start, end],
            });
        }
        let n = x.cols();
        let data = x.data[start * n..end * n].to_vec();
        self.push(
            Op::SliceRows(ia, start),
            Tensor::matrix(end - start, n, data)?,
            "slice_rows",
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        require_matrix("slice_cols", x)?;
        if start > end || end > x.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                lhs: x.shape.clone(),
                rhs: vec![start, end],
            });
        }
        let m = x.rows();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        self.push(
            Op::SliceCols(ia, start),
            Tensor::matrix(m, end - start, data)?,
            "slice_cols",
        )
    }

    /// Select rows by index (repeats allowed). Gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        require_matrix("gather_rows", x)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                lhs: x.shape.clone(),
                rhs: vec![bad],
            });
        }
        let n = x.cols();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(x.row_slice(i));
        }
        let out = Tensor::matrix(indices.len(), n, data)?;
        self.push(Op::GatherRows(ia, indices.to_vec()), out, "gather_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = idx
            .first()
            .ok_or_else(|| AutodiffError::InvalidTensor("concat of nothing".into()))?;
        let m = self.nodes[*first].value.rows();
        let mut total = 0;
        for &i in &idx {
            let t = &self.nodes[i].value;
            require_matrix("concat_cols", t)?;
            if t.rows() != m {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[*first].value.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row_slice(r));
            }
        }
        self.push(Op::ConcatCols(idx), Tensor::matrix(m, total, data)?, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = idx
            .first()
            .ok_or_else(|| AutodiffError::InvalidTensor("concat of nothing".into()))?;
        let n = self.nodes[*first].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let t = &self.nodes[i].value;
            require_matrix("concat_rows", t)?;
            if t.cols() != n {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[*first].value.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        self.push(Op::ConcatRows(idx), Tensor::matrix(rows, n, data)?, "concat_rows")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        require_matrix("softmax_rows", x)?;
        let (m, n) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = x.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        self.push(Op::SoftmaxRows(ia), Tensor::matrix(m, n, data)?, "softmax_rows")
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        let out = Tensor::new(shape.to_vec(), x.data.clone()).map_err(|_| AutodiffError::ShapeMismatch {
            op: "reshape",
            lhs: x.shape.clone(),
            rhs: shape.to_vec(),
        })?;
        self.push(Op::Reshape(ia), out, "reshape")
    }

    /// Elementwise log-density of `N(mean, std²)` at `x`; all three share a shape.
    pub fn gaussian_log_pdf(&mut self, x: Var, mean: Var, std: Var) -> Result<Var> {
        let (ix, im, is) = (self.check(x)?, self.check(mean)?, self.check(std)?);
        let (xv, mv, sv) = (&self.nodes[ix].value, &self.nodes[im].value, &self.nodes[is].value);
        same_shape("gaussian_log_pdf", xv, mv)?;
        same_shape("gaussian_log_pdf", xv, sv)?;
        let data = xv
            .data
            .iter()
            .zip(&mv.data)
            .zip(&sv.data)
            .map(|((&x, &m), &s)| gaussian_log_pdf(x, m, s))
            .collect();
        let out = Tensor::new(xv.shape.clone(), data)?;
        self.push(Op::GaussianLogPdf(ix, im, is), out, "gaussian_log_pdf")
    }

    /// Row-wise lower-triangular product: `y[r] = L[r] · u[r]`, where `L[r]` is
    /// packed row-major in `lower[r]` (`d(d+1)/2` entries).
    pub fn tri_matvec(&mut self, lower: Var, u: Var) -> Result<Var> {
        let (il, iu) = (self.check(lower)?, self.check(u)?);
        let (lv, uv) = (&self.nodes[il].value, &self.nodes[iu].value);
        require_matrix("tri_matvec", lv)?;
        require_matrix("tri_matvec", uv)?;
        let (r, d) = (uv.rows(), uv.cols());
        if lv.rows() != r || lv.cols() != packed_len(d) {
            return Err(AutodiffError::ShapeMismatch {
                op: "tri_matvec",
                lhs: lv.shape.clone(),
                rhs: uv.shape.clone(),
            });
        }
        let mut data = vec![0.0; r * d];
        for row in 0..r {
            let l = lv.row_slice(row);
            let x = uv.row_slice(row);
            for k in 0..d {
                data[row * d + k] = (0..=k).map(|j| l[packed_index(k, j)] * x[j]).sum();
            }
        }
        self.push(Op::TriMatVec(il, iu), Tensor::matrix(r, d, data)?, "tri_matvec")
    }

    /// `ln|det A|` of a square triangular matrix (only the diagonal is read).
    pub fn log_abs_det_triangular(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        require_matrix("log_abs_det_triangular", x)?;
        if x.rows() != x.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "log_abs_det_triangular",
                lhs: x.shape.clone(),
                rhs: vec![x.rows(), x.rows()],
            });
        }
        let v = (0..x.rows()).map(|i| x.at(i, i).abs().ln()).sum();
        self.push(Op::LogAbsDetTriangular(ia), Tensor::scalar(v), "log_abs_det_triangular")
    }

    /// `x·W + b` with `b` a `[1, n]` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.value(xw).rows();
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        let out_value = &self.nodes[out].value;
        if !out_value.is_scalar() {
            return Err(AutodiffError::NotScalar(out_value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        grads[out] = Some(Tensor::filled(&out_value.shape, 1.0));
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let val = |j: usize| &self.nodes[j].value;
            let acc = |j: usize, t: Tensor, grads: &mut Vec<Option<Tensor>>| match &mut grads[j] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf | Op::Param => {
                    leaves[i] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(val(*b), |p, q| p * q);
                    let gb = g.zip(val(*a), |p, q| p * q);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    let ga = g.zip(bv, |p, q| p / q);
                    let gb = Tensor {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&val(*a).data)
                            .zip(&bv.data)
                            .map(|((&gg, &x), &y)| -gg * x / (y * y))
                            .collect(),
                    };
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Scale(a, c) => acc(*a, g.map(|v| v * c), &mut grads),
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&val(*b).transposed());
                    let gb = val(*a).transposed().matmul(&g);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.transposed(), &mut grads),
                Op::Exp(a) => acc(*a, g.zip(&node.value, |p, y| p * y), &mut grads),
                Op::Log(a) => acc(*a, g.zip(val(*a), |p, x| p / x), &mut grads),
                Op::Tanh(a) => acc(*a, g.zip(&node.value, |p, y| p * (1.0 - y * y)), &mut grads),
                Op::Softplus(a) => acc(*a, g.zip(val(*a), |p, x| p * sigmoid(x)), &mut grads),
                Op::Sigmoid(a) => acc(*a, g.zip(&node.value, |p, y| p * y * (1.0 - y)), &mut grads),
                Op::Sqrt(a) => acc(*a, g.zip(&node.value, |p, y| p / (2.0 * y)), &mut grads),
                Op::Square(a) => acc(*a, g.zip(val(*a), |p, x| 2.0 * p * x), &mut grads),
                Op::Sum(a) => {
                    let gv = g.data[0];
                    acc(*a, Tensor::filled(&val(*a).shape, gv), &mut grads);
                }
                Op::SumRows(a) => {
                    let m = val(*a).rows();
                    let data = g.data.repeat(m);
                    acc(*a, Tensor::new(val(*a).shape.clone(), data)?, &mut grads);
                }
                Op::SumCols(a) => {
                    let n = val(*a).cols();
                    let data = g.data.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                    acc(*a, Tensor::new(val(*a).shape.clone(), data)?, &mut grads);
                }
                Op::BroadcastRows(a) => {
                    let n = g.cols();
                    let mut out = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    acc(*a, Tensor::new(val(*a).shape.clone(), out)?, &mut grads);
                }
                Op::BroadcastCols(a) => {
                    let out = (0..g.rows()).map(|r| g.row_slice(r).iter().sum()).collect();
                    acc(*a, Tensor::new(val(*a).shape.clone(), out)?, &mut grads);
                }
                Op::BroadcastScalar(a) => {
                    let s = g.data.iter().sum();
                    acc(*a, Tensor::new(val(*a).shape.clone(), vec![s])?, &mut grads);
                }
                Op::SliceRows(a, start) => {
                    let src = val(*a);
                    let mut t = Tensor::zeros(&src.shape);
                    let n = src.cols();
                    t.data[start * n..start * n + g.data.len()].copy_from_slice(&g.data);
                    acc(*a, t, &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let src = val(*a);
                    let mut t = Tensor::zeros(&src.shape);
                    let (n, w) = (src.cols(), g.cols());
                    for r in 0..g.rows() {
                        t.data[r * n + start..r * n + start + w].copy_from_slice(g.row_slice(r));
                    }
                    acc(*a, t, &mut grads);
                }
                Op::GatherRows(a, indices) => {
                    let src = val(*a);
                    let mut t = Tensor::zeros(&src.shape);
                    let n = src.cols();
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, v) in t.data[i * n..(i + 1) * n].iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    acc(*a, t, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let mut data = Vec::with_capacity(m * w);
                        for r in 0..m {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(p, Tensor::matrix(m, w, data)?, &mut grads);
                    }
                }
                Op::ConcatRows(parts) => {
                    let n = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let h = val(p).rows();
                        let data = g.data[offset * n..(offset + h) * n].to_vec();
                        offset += h;
                        acc(p, Tensor::matrix(h, n, data)?, &mut grads);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut data = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        data.extend(yr.iter().zip(gr).map(|(yy, gg)| yy * (gg - dot)));
                    }
                    acc(*a, Tensor::matrix(m, n, data)?, &mut grads);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape.clone();
                    acc(*a, Tensor::new(shape, g.data)?, &mut grads);
                }
                Op::GaussianLogPdf(x, m, s) => {
                    let (xv, mv, sv) = (val(*x), val(*m), val(*s));
                    let n = g.data.len();
                    let (mut gx, mut gm, mut gs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                    for k in 0..n {
                        let sd = sv.data[k];
                        let z = (xv.data[k] - mv.data[k]) / sd;
                        gx[k] = -g.data[k] * z / sd;
                        gm[k] = g.data[k] * z / sd;
                        gs[k] = g.data[k] * (z * z - 1.0) / sd;
                    }
                    acc(*x, Tensor::new(xv.shape.clone(), gx)?, &mut grads);
                    acc(*m, Tensor::new(mv.shape.clone(), gm)?, &mut grads);
                    acc(*s, Tensor::new(sv.shape.clone(), gs)?, &mut grads);
                }
                Op::TriMatVec(l, u) => {
                    let (lv, uv) = (val(*l), val(*u));
                    let (r, d) = (uv.rows(), uv.cols());
                    let p = lv.cols();
                    let mut gl = vec![0.0; r * p];
                    let mut gu = vec![0.0; r * d];
                    for row in 0..r {
                        let lr = lv.row_slice(row);
                        let ur = uv.row_slice(row);
                        let gr = g.row_slice(row);
                        for (k, &gk) in gr.iter().enumerate().take(d) {
                            for j in 0..=k {
                                let idx = packed_index(k, j);
                                gl[row * p + idx] += gk * ur[j];
                                gu[row * d + j] += gk * lr[idx];
                            }
                        }
                    }
                    acc(*l, Tensor::matrix(r, p, gl)?, &mut grads);
                    acc(*u, Tensor::matrix(r, d, gu)?, &mut grads);
                }
                Op::LogAbsDetTriangular(a) => {
                    let av = val(*a);
                    let n = av.rows();
                    let mut t = Tensor::zeros(&av.shape);
                    for k in 0..n {
                        t.data[k * n + k] = g.data[0] / av.at(k, k);
                    }
                    acc(*a, t, &mut grads);
                }
            }
        }

        let mut params = BTreeMap::new();
        for (&id, &index) in &self.bound {
            let g = leaves[index]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&self.nodes[index].value.shape));
            params.insert(id, g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf | Op::Param) && leaves[i].is_none() {
                leaves[i] = Some(Tensor::zeros(&node.value.shape));
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
            params,
        })
    }
}

/// Largest relative error `|g − g_fd| / (|g_fd| + 1e-8)` between a supplied
/// gradient and central differences of `value_at` around `point`.
pub fn gradient_check<F>(value_at: F, gradient: &[f64], point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if gradient.len() != point.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "gradient_check",
            lhs: vec![gradient.len()],
            rhs: vec![point.len()],
        });
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..point.len() {
        x[k] = point[k] + step;
        let up = value_at(&x)?;
        x[k] = point[k] - step;
        let down = value_at(&x)?;
        x[k] = point[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: "gradient_check",
                index: k,
            });
        }
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((gradient[k] - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(worst)
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape and a `[n]`-shaped trainable leaf holding the
/// evaluation point and must return a scalar variable.
pub fn finite_difference_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &[f64], with_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![x.len()], x.to_vec())?);
        let mut tape = Tape::new();
        let xv = tape.param(&store, id)?;
        let y = f(&mut tape, xv)?;
        let value = tape.scalar(y);
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: "finite_difference_check",
                index: y.index,
            });
        }
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(y)?;
        Ok((value, grads.param(id).map(|g| g.data().to_vec()).unwrap_or_default()))
    };
    let (_, gradient) = eval(point, true)?;
    gradient_check(|x| eval(x, false).map(|(v, _)| v), &gradient, point, step)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: f64) -> (f64, f64) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x));
        let mut tape = Tape::new();
        let v = tape.param(&store, id).unwrap();
        let y = f(&mut tape, v).unwrap();
        let g = tape.backward(y).unwrap();
        (tape.scalar(y), g.param(id).unwrap().item())
    }

    #[test]
    fn square_value_and_derivative() {
        let (y, g) = scalar_grad(|t, x| t.mul(x, x), 3.0);
        assert_eq!(y, 9.0);
        assert_eq!(g, 6.0);
    }

    #[test]
    fn log_exp_roundtrip() {
        let (y, g) = scalar_grad(
            |t, x| {
                let e = t.exp(x)?;
                t.log(e)
            },
            1.7,
        );
        assert!((y - 1.7).abs() < 1e-15);
        assert!((g - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let i = tape
            .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let p = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let _x = tape.param(&store, id).unwrap();
        let c = tape.constant(Tensor::scalar(5.0)).unwrap();
        let y = tape.square(c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(id).unwrap().item(), 0.0);
    }

    #[test]
    fn log_abs_det_gradient_is_inverse_diagonal() {
        let mut store = ParamStore::new();
        let id = store.add("a", Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 5.0]]).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(&store, id).unwrap();
        let y = tape.log_abs_det_triangular(a).unwrap();
        assert!((tape.scalar(y) - 10f64.ln()).abs() < 1e-14);
        let g = tape.backward(y).unwrap();
        let expected = [0.5, 0.0, 0.0, 0.2];
        for (a, b) in g.param(id).unwrap().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        // finite-difference oracle over the four entries
        let err = finite_difference_check(
            |t, x| {
                let m = t.reshape(x, &[2, 2])?;
                t.log_abs_det_triangular(m)
            },
            &[2.0, 0.0, 0.0, 5.0],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(a), Err(AutodiffError::NotScalar(_))));
        let mut other = Tape::new();
        let b = other.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(tape.backward(b), Err(AutodiffError::NotOnTape(_))));
    }

    #[test]
    fn non_finite_reports_node() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0)).unwrap();
        let err = tape.log(z).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { op: "log", index: 1 });
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
        let b = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(
            tape.add(a, b),
            Err(AutodiffError::ShapeMismatch { op: "add", .. })
        ));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn sum_of_squares_passes_check() {
        let point: Vec<f64> = (0..10).map(|i| 0.3 * i as f64 - 1.1).collect();
        let err = finite_difference_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let point = [0.5, -1.0, 2.0];
        let wrong: Vec<f64> = point.iter().map(|x| 3.0 * x).collect();
        let err = gradient_check(|x| Ok(x.iter().map(|v| v * v).sum()), &wrong, &point, 1e-5).unwrap();
        assert!(err > 1e-2);
    }
}
