//! Dense tensors and a reverse-mode tape.
//!
//! Every forward operation appends a record to a [`Tape`]; [`Tape::backward`]
//! walks the records in reverse and returns the accumulated gradients. Values
//! are row-major `f64`. Operations that talk about "rows" treat the last axis
//! as the column axis and flatten everything before it.

mod grad_check;
mod kernels;

use std::sync::Arc;

use crate::error::{contract, Error, Result};

pub use grad_check::{grad_check, grad_check_many, grad_check_report, GradCheck};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return contract("ragged rows");
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return contract(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which vocabulary entries survive a masked log-softmax.
#[derive(Debug, Clone)]
pub enum RowMask {
    /// One mask shared by every row.
    Shared(Arc<[bool]>),
    /// One mask per row.
    PerRow(Vec<Arc<[bool]>>),
}

impl RowMask {
    fn row(&self, i: usize) -> &[bool] {
        match self {
            RowMask::Shared(m) => m,
            RowMask::PerRow(ms) => &ms[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBt,
    Add,
    AddBias,
    Mul,
    Scale,
    Tanh,
    Gelu,
    Log,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gather,
    SliceCols,
    ConcatCols,
    MeanRows,
    Sum,
    PickNll,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    PickNll {
        logp: Var,
        targets: Vec<usize>,
        scale: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulBt(..) => OpKind::MatMulBt,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Log(..) => OpKind::Log,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather(..) => OpKind::Gather,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::PickNll { .. } => OpKind::PickNll,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gather(a, _)
            | Op::SliceCols(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(parts) => parts.clone(),
            Op::PickNll { logp, .. } => vec![*logp],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Linear record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Input handles of the record that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|i| self.nodes[i.0].tracked);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.nodes.push(Node {
            value: t.into(),
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.nodes.push(Node {
            value: t.into(),
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<&Tensor> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::Shape {
                op,
                left: t.shape.clone(),
                right: vec![],
            });
        }
        Ok(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.matrix("matmul", a)?, self.matrix("matmul", b)?);
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        if tb.shape[0] != k {
            return Err(Error::Shape {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let out = kernels::matmul(&ta.data, &tb.data, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.matrix("matmul_bt", a)?, self.matrix("matmul_bt", b)?);
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        if tb.shape[1] != k {
            return Err(Error::Shape {
                op: "matmul_bt",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let out = kernels::matmul_bt(&ta.data, &tb.data, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(Error::Shape {
                op: "add_bias",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x.tanh()).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| gelu_parts(x).0).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Gelu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::NonFinite("log"));
        }
        let data = ta.data.iter().map(|x| x.ln()).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Log(a)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        check_finite("softmax_rows", ta)?;
        let data = kernels::softmax_rows(&ta.data, ta.cols(), false);
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Softmax(a)))
    }

    /// Softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        check_finite("causal_softmax_rows", ta)?;
        let data = kernels::softmax_rows(&ta.data, ta.cols(), true);
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Softmax(a)))
    }

    /// Row-wise log-softmax. Masked-out columns are set to `-inf` before
    /// normalization, so they carry zero probability and receive exactly zero
    /// gradient.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<&RowMask>) -> Result<Var> {
        let ta = self.value(a);
        check_finite("log_softmax_rows", ta)?;
        let (rows, cols) = (ta.rows(), ta.cols());
        if let Some(m) = mask {
            if let RowMask::PerRow(ms) = m {
                if ms.len() != rows {
                    return Err(Error::Shape {
                        op: "log_softmax_rows mask",
                        left: ta.shape.clone(),
                        right: vec![ms.len()],
                    });
                }
            }
            for i in 0..rows {
                let r = m.row(i);
                if r.len() != cols {
                    return Err(Error::Shape {
                        op: "log_softmax_rows mask",
                        left: ta.shape.clone(),
                        right: vec![r.len()],
                    });
                }
                if !r.iter().any(|&k| k) {
                    return contract("mask row keeps no entries");
                }
            }
        }
        let mut data = vec![0.0; ta.len()];
        for i in 0..rows {
            let x = ta.row(i);
            let keep = mask.map(|m| m.row(i));
            let allowed = |j: usize| keep.map_or(true, |k| k[j]);
            let max = (0..cols)
                .filter(|&j| allowed(j))
                .map(|j| x[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..cols)
                    .filter(|&j| allowed(j))
                    .map(|j| (x[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..cols {
                data[i * cols + j] = if allowed(j) {
                    x[j] - lse
                } else {
                    f64::NEG_INFINITY
                };
            }
        }
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::LogSoftmax(a)))
    }

    /// Per-row layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if c < 2 {
            return Err(Error::DegenerateAxis(c));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != c || tb.len() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                left: tx.shape.clone(),
                right: tg.shape.clone(),
            });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for i in 0..rows {
            let r = tx.row(i);
            let mean = r.iter().sum::<f64>() / c as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                let h = (r[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let shape = tx.shape.clone();
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of a `[V × d]` table. Backward scatters additively.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.matrix("gather_rows", table)?;
        let (v, d) = (tt.shape[0], tt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocab { id, size: v });
            }
            data.extend_from_slice(tt.row(id));
        }
        Ok(self.push(
            Tensor::matrix(ids.len(), d, data)?,
            Op::Gather(table, ids.to_vec()),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.matrix("slice_cols", a)?;
        let (m, n) = (ta.shape[0], ta.shape[1]);
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                left: ta.shape.clone(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return contract("concat_cols of nothing");
        }
        let m = self.matrix("concat_cols", parts[0])?.shape[0];
        let mut total = 0;
        for &p in parts {
            let t = self.matrix("concat_cols", p)?;
            if t.shape[0] != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: t.shape.clone(),
                });
            }
            total += t.shape[1];
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(
            Tensor::matrix(m, total, data)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Mean over rows: `[n × d] -> [1 × d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.matrix("mean_rows", a)?;
        let (m, n) = (ta.shape[0], ta.shape[1]);
        if m == 0 {
            return contract("mean over zero rows");
        }
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (acc, x) in data.iter_mut().zip(ta.row(i)) {
                *acc += x;
            }
        }
        data.iter_mut().for_each(|x| *x /= m as f64);
        Ok(self.push(Tensor::matrix(1, n, data)?, Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `-scale · Σ_i logp[i, targets[i]]`.
    pub fn pick_nll(&mut self, logp: Var, targets: &[usize], scale: f64) -> Result<Var> {
        let t = self.matrix("pick_nll", logp)?;
        let (m, n) = (t.shape[0], t.shape[1]);
        if targets.len() != m {
            return Err(Error::Shape {
                op: "pick_nll",
                left: t.shape.clone(),
                right: vec![targets.len()],
            });
        }
        let mut s = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= n {
                return Err(Error::OutOfVocab { id: y, size: n });
            }
            let lp = t.data[i * n + y];
            if !lp.is_finite() {
                return contract(format!("target {y} at row {i} is masked out"));
            }
            s -= lp;
        }
        Ok(self.push(
            Tensor::scalar(s * scale),
            Op::PickNll {
                logp,
                targets: targets.to_vec(),
                scale,
            },
        ))
    }

    /// Sums a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter().copied();
        let Some(mut acc) = it.next() else {
            return contract("add_all of nothing");
        };
        for t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar. The tape is left untouched so the pass can
    /// be repeated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return contract(format!("backward from non-scalar of shape {:?}", lt.shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                acc(*a, &mut |ga| kernels::acc_matmul_bt(ga, g, &tb.data, m, n, k));
                acc(*b, &mut |gb| kernels::acc_matmul_at(gb, &ta.data, g, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                acc(*a, &mut |ga| kernels::acc_matmul(ga, g, &tb.data, m, n, k));
                acc(*b, &mut |gb| kernels::acc_matmul_at(gb, g, &ta.data, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddBias(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let c = self.value(*b).len();
                acc(*b, &mut |gb| {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(&tb.data) {
                        *x += y * w;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(&ta.data) {
                        *x += y * w;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Tanh(a) => {
                acc(*a, &mut |ga| {
                    for ((x, y), t) in ga.iter_mut().zip(g).zip(&out.data) {
                        *x += y * (1.0 - t * t);
                    }
                });
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(g).zip(&ta.data) {
                        *x += y * gelu_parts(v).1;
                    }
                });
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&ta.data) {
                        *x += y / v;
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                acc(*a, &mut |ga| {
                    for ((gr, yr), pr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                        let dot: f64 = yr.iter().zip(pr).map(|(y, p)| y * p).sum();
                        for j in 0..c {
                            gr[j] += pr[j] * (yr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                acc(*a, &mut |ga| {
                    for ((gr, yr), lr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                        let total: f64 = yr
                            .iter()
                            .zip(lr)
                            .filter(|(_, l)| l.is_finite())
                            .map(|(y, _)| y)
                            .sum();
                        for j in 0..c {
                            if lr[j].is_finite() {
                                gr[j] += yr[j] - lr[j].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let c = tg.len();
                acc(*x, &mut |gx| {
                    for (i, s) in inv_std.iter().enumerate() {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * tg.data[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * tg.data[j];
                            gx[i * c + j] += s * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (row_g, row_h) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for row_g in g.chunks(c) {
                        gb.iter_mut().zip(row_g).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Gather(table, ids) => {
                let d = out.cols();
                acc(*table, &mut |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * d..(i + 1) * d];
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let n = self.value(*a).cols();
                let len = out.cols();
                acc(*a, &mut |ga| {
                    for (i, row) in g.chunks(len).enumerate() {
                        ga[i * n + start..i * n + start + len]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for (i, row) in gp.chunks_mut(w).enumerate() {
                            row.iter_mut()
                                .zip(&g[i * total + offset..i * total + offset + w])
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (m, n) = (ta.shape[0], ta.shape[1]);
                acc(*a, &mut |ga| {
                    for row in ga.chunks_mut(n) {
                        for j in 0..n {
                            row[j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::PickNll {
                logp,
                targets,
                scale,
            } => {
                let n = self.value(*logp).cols();
                acc(*logp, &mut |gl| {
                    for (i, &y) in targets.iter().enumerate() {
                        gl[i * n + y] -= scale * g[0];
                    }
                });
            }
        }
    }
}

/// `a · b` on plain tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb)?;
    Ok(tape.value(c).clone())
}

/// Row-wise softmax on a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    check_finite("softmax_rows", x)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data: kernels::softmax_rows(&x.data, x.cols(), false),
    })
}

/// Layer normalization on a plain tensor.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vx, vg, vb) = (
        tape.constant(x.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
    );
    let y = tape.layer_norm(vx, vg, vb)?;
    Ok(tape.value(y).clone())
}

/// Row gather on a plain tensor.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vt = tape.constant(table.clone());
    let y = tape.gather_rows(vt, ids)?;
    Ok(tape.value(y).clone())
}
