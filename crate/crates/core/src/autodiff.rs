//! Reverse-mode differentiation tape.
//!
//! Every op appends a node holding its forward value and the parent
//! references needed for the backward sweep. Nodes are only ever appended, so
//! parents always precede children and a single reverse pass visits each node
//! once. Parameters enter the tape by reference; their gradients are
//! collected per [`ParamId`] after [`Tape::backward`].

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Index of a trainable tensor in a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    /// Independent mask per element and timestep.
    #[default]
    #[serde(alias = "element")]
    Elementwise,
    /// One feature mask shared by every timestep of the sequence.
    Variational,
}

impl std::str::FromStr for DropoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "element" | "elementwise" => Ok(Self::Elementwise),
            "variational" => Ok(Self::Variational),
            other => Err(invalid(format!("unknown dropout mode `{other}`"))),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Block {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        epsilon: f64,
        pad_id: usize,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only computation record.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Free input whose gradient is tracked (used by gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Parameter leaf borrowed from a store; repeated calls with the same id
    /// return the same node.
    pub fn param(&mut self, id: ParamId, t: &'p Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(t), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Cow::Owned(Tensor::new(vec![m, n], out)?),
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `a · bᵀ` with `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul_nt")?;
        let (n, k2) = bv.dims2("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Cow::Owned(Tensor::new(vec![m, n], out)?),
            Op::MatMulNT(a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(t), Op::Add(a, b), rg))
    }

    /// Broadcast `bias[n]` over every row of `x[…×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || xv.cols() != bv.numel() {
            return Err(shape_err("add_row", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(b.len().max(1)) {
            for (v, &c) in row.iter_mut().zip(b) {
                *v = *v + c;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Cow::Owned(t), Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(t), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(Cow::Owned(t), Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(Cow::Owned(t), Op::Relu(x), rg)
    }

    /// Softmax along `axis`. Entries equal to `-inf` are treated as masked
    /// and receive zero weight; a slice with every entry masked is an error.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(invalid(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..len {
                    let v = src[idx(a)];
                    if v.is_nan() {
                        return Err(Error::NonFinite("softmax input".into()));
                    }
                    if v > max {
                        max = v;
                    }
                }
                if max == T::neg_infinity() {
                    return Err(invalid("softmax over a fully masked slice"));
                }
                let mut total = 0.0f64;
                for a in 0..len {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e.as_f64();
                }
                let inv = T::from_f64_lossy(1.0 / total);
                for a in 0..len {
                    out[idx(a)] = out[idx(a)] * inv;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            Cow::Owned(t),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalize each last-axis vector to zero mean and unit variance, then
    /// apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if xv.rank() == 0 || d == 0 {
            return Err(invalid("layer_norm over an empty feature dimension"));
        }
        if eps <= 0.0 {
            return Err(invalid("layer_norm eps must be positive"));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.as_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = T::from_f64_lossy(istd);
            for j in 0..d {
                let h = T::from_f64_lossy((row[j].as_f64() - mean) * istd);
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Cow::Owned(t),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout on `x: [T×d]`. Identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: DropoutMode, rng: &mut Rng) -> Result<Var> {
        let rows = self.value(x).rows();
        self.dropout_segments(x, &[rows], rate, mode, rng)
    }

    /// Dropout over packed sequences: row segments of lengths `lens`. In
    /// variational mode each segment draws one feature mask shared by all of
    /// its rows.
    pub fn dropout_segments(
        &mut self,
        x: Var,
        lens: &[usize],
        rate: f64,
        mode: DropoutMode,
        rng: &mut Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        if lens.iter().sum::<usize>() != xv.rows() {
            return Err(shape_err("dropout", xv.shape(), lens));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mut draw = || {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        };
        let d = xv.cols();
        let mask = match mode {
            DropoutMode::Elementwise => Tensor::from_fn(xv.shape(), |_| draw()),
            DropoutMode::Variational => {
                let mut data = Vec::with_capacity(xv.numel());
                for &len in lens {
                    let feat: Vec<T> = (0..d).map(|_| draw()).collect();
                    for _ in 0..len {
                        data.extend_from_slice(&feat);
                    }
                }
                Tensor::new(xv.shape().to_vec(), data)?
            }
        };
        self.mul_const(x, mask)
    }

    /// Multiply by a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(shape_err("mul_const", xv.shape(), c.shape()));
        }
        let data = xv.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(t), Op::MulConst(x, c), rg))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = tv.dims2("gather")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(invalid(format!("row id {id} out of range for table of {v} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(t),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Sub-block `x[rows, cols]` of a 2-D tensor.
    pub fn block(
        &mut self,
        x: Var,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("block")?;
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(invalid(format!(
                "block {rows:?}x{cols:?} outside [{r}, {c}]"
            )));
        }
        let w = cols.len();
        let mut out = Vec::with_capacity(rows.len() * w);
        for i in rows.clone() {
            out.extend_from_slice(&xv.row(i)[cols.clone()]);
        }
        let t = Tensor::new(vec![rows.len(), w], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            Cow::Owned(t),
            Op::Block {
                x,
                row0: rows.start,
                col0: cols.start,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let rows = self.value(*first).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(t), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let cols = self.value(*first).dims2("concat_rows")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", self.shape(*first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(t), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.as_f64())
            .sum::<f64>();
        let rg = self.rg(x);
        self.push(Cow::Owned(Tensor::scalar(T::from_f64_lossy(s))), Op::Sum(x), rg)
    }

    /// Mean label-smoothed cross-entropy over rows whose target is not
    /// `pad_id`. The smoothed target is `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        epsilon: f64,
        pad_id: usize,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = lv.dims2("cross_entropy")?;
        if v == 0 {
            return Err(invalid("cross_entropy over an empty vocabulary"));
        }
        if targets.len() != n {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(invalid(format!("label smoothing {epsilon} outside [0, 1]")));
        }
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(invalid("cross_entropy with every position padded"));
        }
        let mut probs = vec![T::zero(); n * v];
        let mut loss = 0.0f64;
        let off = epsilon / v as f64;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt == pad_id {
                continue;
            }
            if tgt >= v {
                return Err(invalid(format!("target {tgt} outside vocabulary of {v}")));
            }
            let row = lv.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            let mut row_loss = 0.0;
            for k in 0..v {
                let logp = row[k].as_f64() - lse;
                probs[i * v + k] = T::from_f64_lossy(logp.exp());
                let q = if k == tgt { 1.0 - epsilon + off } else { off };
                row_loss -= q * logp;
            }
            loss += row_loss;
        }
        let loss = loss / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy loss".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(T::from_f64_lossy(loss))),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                epsilon,
                pad_id,
                probs,
                count,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let slot = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        f(slot.data_mut());
    }

    /// Run the backward sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            // Leaves keep their gradient; everything else is released.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_node(&op, idx, &g)?;
            self.nodes[idx].op = op;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.grads[idx] = Some(g);
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, op: &Op<T>, idx: usize, g: &Tensor<T>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g.data(), self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(*a, Tensor::new(vec![m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(self.value(*a).data(), g.data(), &mut db, m, k, n);
                    self.accumulate(*b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul_nt")?;
                let n = self.value(*b).rows();
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(g.data(), self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(*a, Tensor::new(vec![m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(g.data(), self.value(*a).data(), &mut db, m, n, k);
                    self.accumulate(*b, Tensor::new(vec![n, k], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(*x, g.clone());
                let n = g.cols();
                self.accumulate_with(*bias, |db| {
                    if n > 0 {
                        for row in g.data().chunks_exact(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let t = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(&x, &y)| x * y)
                            .collect(),
                    )?;
                    self.accumulate(*a, t);
                }
                if self.rg(*b) {
                    let t = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(&x, &y)| x * y)
                            .collect(),
                    )?;
                    self.accumulate(*b, t);
                }
            }
            Op::MulConst(x, c) => {
                let t = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect(),
                )?;
                self.accumulate(*x, t);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(*x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let y = &self.nodes[idx].value;
                let t = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                        .collect(),
                )?;
                self.accumulate(*x, t);
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = self.nodes[idx].value.data();
                let gd = g.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len)
                            .map(|a| gd[at(a)].as_f64() * y[at(a)].as_f64())
                            .sum();
                        let dot = T::from_f64_lossy(dot);
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                let t = Tensor::new(g.shape().to_vec(), dx)?;
                self.accumulate(x, t);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let rows = g.rows();
                let gd = g.data();
                if self.rg(*gain) {
                    self.accumulate_with(*gain, |dg| {
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] = dg[j] + gd[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if self.rg(*bias) {
                    self.accumulate_with(*bias, |db| {
                        for r in 0..rows {
                            for j in 0..d {
                                db[j] = db[j] + gd[r * d + j];
                            }
                        }
                    });
                }
                if self.rg(*x) {
                    let gain_v = self.value(*gain).data();
                    let mut dx = vec![T::zero(); rows * d];
                    let df = d as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0f64;
                        let mut sum_dh_h = 0.0f64;
                        for j in 0..d {
                            let dh = (gd[r * d + j] * gain_v[j]).as_f64();
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + j].as_f64();
                        }
                        let istd = inv_std[r].as_f64();
                        for j in 0..d {
                            let dh = (gd[r * d + j] * gain_v[j]).as_f64();
                            let v = istd / df
                                * (df * dh - sum_dh - xhat[r * d + j].as_f64() * sum_dh_h);
                            dx[r * d + j] = T::from_f64_lossy(v);
                        }
                    }
                    let t = Tensor::new(g.shape().to_vec(), dx)?;
                    self.accumulate(*x, t);
                }
            }
            Op::Gather { table, ids } => {
                let d = g.cols();
                self.accumulate_with(*table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g.data()[r * d..(r + 1) * d];
                        for (a, &b) in dt[id * d..(id + 1) * d].iter_mut().zip(src) {
                            *a = *a + b;
                        }
                    }
                });
            }
            &Op::Block { x, row0, col0 } => {
                let w = g.cols();
                let cols = self.value(x).cols();
                self.accumulate_with(x, |dx| {
                    for r in 0..g.rows() {
                        let dst = &mut dx[(row0 + r) * cols + col0..(row0 + r) * cols + col0 + w];
                        for (a, &b) in dst.iter_mut().zip(g.row(r)) {
                            *a = *a + b;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2("concat_cols")?;
                    if self.rg(p) {
                        let mut piece = Vec::with_capacity(r * c);
                        for i in 0..r {
                            piece.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(p, Tensor::new(vec![r, c], piece)?);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        let piece = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        self.accumulate(p, Tensor::new(vec![r, cols], piece)?);
                    }
                    offset += r;
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                let shape = self.shape(*x).to_vec();
                self.accumulate(*x, Tensor::full(&shape, s));
            }
            Op::CrossEntropy {
                logits,
                targets,
                epsilon,
                pad_id,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g.item().as_f64() / *count as f64;
                let off = epsilon / v as f64;
                let mut dl = vec![T::zero(); probs.len()];
                for (i, &tgt) in targets.iter().enumerate() {
                    if tgt == *pad_id {
                        continue;
                    }
                    for k in 0..v {
                        let q = if k == tgt { 1.0 - epsilon + off } else { off };
                        dl[i * v + k] = T::from_f64_lossy((probs[i * v + k].as_f64() - q) * scale);
                    }
                }
                let t = Tensor::new(self.shape(*logits).to_vec(), dl)?;
                self.accumulate(*logits, t);
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`]. Leaves that the loss does
    /// not reach report `None`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter touched by this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, self.grad(v)))
    }
}
