//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. Calling [`Tape::backward`] on a scalar result walks the
//! tape in reverse and accumulates gradients into every node that requires
//! one. A tape is single use: after `backward` it is dead and refuses both
//! new operations and a second backward pass.
//!
//! Broadcasting is limited to the second operand of [`Tape::add`] and
//! [`Tape::mul`], and only in two forms: a single-element tensor, or a
//! tensor whose shape equals the trailing dimensions of the first operand
//! (e.g. a bias `[n]` against activations `[m, n]`).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value written into masked-out attention scores. Finite so that forward
/// outputs stay finite, and large enough that `exp` underflows to exactly 0.
pub const CAUSAL_MASK_VALUE: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero or missing dimension")]
    BadShape(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{rank} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        rank: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    DeadTape,
    #[error("{0}: empty operand list")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = TensorError;

    fn try_from(r: RawTensor) -> Result<Self> {
        Tensor::new(r.shape, r.data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for tensors that live outside a tape (parameters
    /// updated by an optimizer). Values already recorded on a tape are
    /// never handed out mutably.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                rank: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Second operand repeats every `n` elements of the first.
    Trailing,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(Var),
    Softmax(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CausalMask(Var),
    Pick {
        x: Var,
        flat: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Records operations in topological order for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records a leaf holding `value`; gradients are kept for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if the node required one
    /// and was reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::DeadTape)
        } else {
            Ok(())
        }
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let nb = self.value(b).numel();
        let trailing = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if nb == 1 || trailing {
            Ok(Broadcast::Trailing)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let bc = self.broadcast("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.numel();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data[i % nb])
            .collect();
        let value = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(value, Op::Add(a, b, bc), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let bc = self.broadcast("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.numel();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * tb.data[i % nb])
            .collect();
        let value = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(value, Op::Mul(a, b, bc), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v * c).collect())?;
        Ok(self.push(value, Op::Scale(x, c), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v.max(0.0)).collect())?;
        Ok(self.push(value, Op::Relu(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let s = self.value(x).data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Embedding lookup: rows `ids` of a `[vocab, d]` table, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.live()?;
        let t = self.value(table);
        let (rows, cols) = t.dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(TensorError::Empty("gather_rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Normalizes the last dimension to zero mean and unit (biased) variance,
    /// then applies `gain * xhat + bias`. Epsilon is [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.live()?;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        for (op, t) in [("layer_norm gain", tg), ("layer_norm bias", tb)] {
            if t.shape != [d] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: tx.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
        }
        let rows = tx.numel() / d;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = tx.row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * tg.data[j] + tb.data[j]);
            }
        }
        let value = Tensor::new(tx.shape.clone(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Max-shifted log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let value = Tensor::new(t.shape.clone(), log_softmax_rows(&t.data, t.last_dim()))?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// Max-shifted softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let value = Tensor::new(t.shape.clone(), softmax_rows(&t.data, t.last_dim()))?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        let (r, c) = t.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        let (r, c) = t.dims2("slice_cols")?;
        if width == 0 || start + width > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + width,
                size: c,
            });
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&t.data[i * c + start..i * c + start + width]);
        }
        let value = Tensor::new(vec![r, width], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.live()?;
        let first = parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (rows, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(*first).to_vec(),
                    rhs: t.shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Replaces entries above the diagonal of a square matrix with
    /// [`CAUSAL_MASK_VALUE`]. Those entries receive no gradient.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        let (r, c) = t.dims2("causal_mask")?;
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "causal_mask",
                lhs: t.shape.clone(),
                rhs: vec![c, r],
            });
        }
        let mut out = t.data.clone();
        for i in 0..r {
            for v in &mut out[i * c + i + 1..(i + 1) * c] {
                *v = CAUSAL_MASK_VALUE;
            }
        }
        let value = Tensor::new(t.shape.clone(), out)?;
        Ok(self.push(value, Op::CausalMask(x), &[x]))
    }

    /// Picks `x[row, col]` for each `(row, col)` of a matrix, giving a vector.
    pub fn pick(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        self.live()?;
        let t = self.value(x);
        let (r, c) = t.dims2("pick")?;
        if coords.is_empty() {
            return Err(TensorError::Empty("pick"));
        }
        let mut flat = Vec::with_capacity(coords.len());
        for &(i, j) in coords {
            if i >= r {
                return Err(TensorError::Index {
                    op: "pick",
                    index: i,
                    size: r,
                });
            }
            if j >= c {
                return Err(TensorError::Index {
                    op: "pick",
                    index: j,
                    size: c,
                });
            }
            flat.push(i * c + j);
        }
        let value = Tensor::vector(flat.iter().map(|&k| t.data[k]).collect())?;
        Ok(self.push(value, Op::Pick { x, flat }, &[x]))
    }

    /// Back-propagates from a scalar `loss`, accumulating gradients into every
    /// node that requires one. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.live()?;
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            node.grad = Some(Tensor {
                shape: node.value.shape.clone(),
                data: g,
            });
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            let row = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += av * gv;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b, bc) => {
                acc(*a, g.to_vec());
                let nb = self.value(*b).numel();
                let db = match bc {
                    Broadcast::Same => g.to_vec(),
                    Broadcast::Trailing => reduce_repeats(g, nb),
                };
                acc(*b, db);
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.numel();
                if self.requires_grad(*a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * tb.data[i % nb])
                        .collect();
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    let prod: Vec<f64> = g.iter().zip(&ta.data).map(|(gv, av)| gv * av).collect();
                    let db = match bc {
                        Broadcast::Same => prod,
                        Broadcast::Trailing => reduce_repeats(&prod, nb),
                    };
                    acc(*b, db);
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Relu(x) => {
                let tx = self.value(*x);
                let dx = g
                    .iter()
                    .zip(&tx.data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let cols = tt.shape[1];
                let mut dt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, gv) in dt[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                    {
                        *d += gv;
                    }
                }
                acc(*table, dt);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let d = tg.numel();
                let rows = g.len() / d;
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * tg.data[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * tg.data[j];
                        dx[r * d + j] = scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::LogSoftmax(x) => {
                let out = &node.value;
                let d = out.last_dim();
                let mut dx = vec![0.0; g.len()];
                for r in 0..g.len() / d {
                    let gs: f64 = g[r * d..(r + 1) * d].iter().sum();
                    for j in r * d..(r + 1) * d {
                        dx[j] = g[j] - out.data[j].exp() * gs;
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax(x) => {
                let out = &node.value;
                let d = out.last_dim();
                let mut dx = vec![0.0; g.len()];
                for r in 0..g.len() / d {
                    let span = r * d..(r + 1) * d;
                    let dot: f64 = g[span.clone()]
                        .iter()
                        .zip(&out.data[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in span {
                        dx[j] = out.data[j] * (g[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Transpose(x) => {
                // node value is [c, r]; gradient wrt x is the transpose back.
                let (c, r) = (node.value.shape[0], node.value.shape[1]);
                let mut dx = vec![0.0; g.len()];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (r, c) = (tx.shape[0], tx.shape[1]);
                let w = node.value.shape[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape[1];
                let rows = node.value.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, dp);
                    offset += w;
                }
            }
            Op::CausalMask(x) => {
                let c = node.value.shape[1];
                let mut dx = g.to_vec();
                for i in 0..c {
                    for v in &mut dx[i * c + i + 1..(i + 1) * c] {
                        *v = 0.0;
                    }
                }
                acc(*x, dx);
            }
            Op::Pick { x, flat } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&k, gv) in flat.iter().zip(g) {
                    dx[k] += gv;
                }
                acc(*x, dx);
            }
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn reduce_repeats(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Row-wise log-softmax of a flat buffer with rows of width `d`.
pub fn log_softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - max - lse));
    }
    out
}

/// Row-wise softmax of a flat buffer with rows of width `d`.
pub fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let z: f64 = out[start..].iter().sum();
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    out
}
