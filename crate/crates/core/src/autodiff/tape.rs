use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{AutodiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Operation kinds understood by [`Tape::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[n,k] x [k,m] -> [n,m]`
    MatMul,
    /// Same-shape sum, or `[n,d] + [d]` row-wise bias.
    Add,
    /// Elementwise product of same-shape inputs.
    Mul,
    /// Row-wise softmax. With `causal`, entry `(i, j)` is forced to zero for `j > i`.
    SoftmaxRows {
        causal: bool,
    },
    LogSoftmaxRows,
    Log,
    Exp,
    Relu,
    /// Inputs `[x, gain, bias]`; normalizes each row of `x`.
    LayerNormRows {
        eps: f64,
    },
    /// Input `[table]`; gathers rows by id.
    EmbeddingLookup {
        ids: Vec<usize>,
    },
    Concat {
        axis: Axis,
    },
    Slice {
        axis: Axis,
        start: usize,
        end: usize,
    },
    Transpose,
    Scale(f64),
    Sum,
    Mean,
    /// Inputs `[x, mask]`; `x * mask * scale`. The mask never receives gradient.
    DropoutMaskApply {
        scale: f64,
    },
    /// Picks elements by flat index into a rank-1 output.
    Gather {
        indices: Vec<usize>,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::SoftmaxRows { .. } => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Relu => "relu",
            OpKind::LayerNormRows { .. } => "layer_norm_rows",
            OpKind::EmbeddingLookup { .. } => "embedding_lookup",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Scale(_) => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::DropoutMaskApply { .. } => "dropout_mask_apply",
            OpKind::Gather { .. } => "gather",
        }
    }
}

struct Record {
    op: OpKind,
    inputs: Vec<usize>,
    saved: Vec<f64>,
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    record: Option<Record>,
    grad: Option<Vec<f64>>,
}

/// Linear recording of operations for reverse-mode differentiation.
///
/// Leaves may borrow their tensors (model parameters) for the lifetime of
/// the tape. A node is recorded with a backward rule only when one of its
/// inputs requires a gradient; everything else is a constant.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), consumed: false }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.record.is_some()).count()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, requires_grad: bool, record: Option<Record>) -> Var {
        self.nodes.push(Node { value, requires_grad, record, grad: None });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// Registers an owned tensor; its `requires_grad` flag decides whether it is a trainable leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(Cow::Owned(tensor), rg, None)
    }

    /// Registers a borrowed tensor without copying it.
    pub fn leaf_ref(&mut self, tensor: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(tensor), requires_grad, None)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Cow::Owned(tensor), false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient of the last backward root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.nodes[v.index].grad.as_deref()
    }

    /// Copy of a leaf tensor with its gradient slot populated.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.index];
        let mut t = node.value.clone().into_owned().with_requires_grad(node.requires_grad);
        t.set_grad(node.grad.clone());
        t
    }

    pub fn check(&self, v: Var) -> Result<(), AutodiffError> {
        if v.tape != self.id {
            return Err(AutodiffError::TapeMismatch { expected: self.id, found: v.tape });
        }
        if v.index >= self.nodes.len() {
            return Err(AutodiffError::Invalid(format!("dangling variable {}", v.index)));
        }
        Ok(())
    }

    pub fn forward_op(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        for &v in inputs {
            self.check(v)?;
        }
        let arity_ok = match op {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::DropoutMaskApply { .. } => inputs.len() == 2,
            OpKind::LayerNormRows { .. } => inputs.len() == 3,
            OpKind::Concat { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(AutodiffError::ShapeMismatch {
                op: op.name(),
                detail: format!("wrong number of inputs: {}", inputs.len()),
            });
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &*self.nodes[v.index].value).collect();
        let (out, saved) = kernels::forward(&op, &vals).map_err(|e| match e {
            AutodiffError::NonFinite { .. } => AutodiffError::NonFinite { op: op.name() },
            other => other,
        })?;
        let mut requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        if let OpKind::DropoutMaskApply { .. } = op {
            if self.nodes[inputs[1].index].requires_grad {
                return Err(AutodiffError::Invalid("dropout mask must not require grad".into()));
            }
            requires_grad = self.nodes[inputs[0].index].requires_grad;
        }
        let record = requires_grad.then(|| Record { op, inputs: inputs.iter().map(|v| v.index).collect(), saved });
        Ok(self.push(Cow::Owned(out), requires_grad, record))
    }

    /// Reverse pass from a scalar root. Populates the gradient of every
    /// trainable leaf reachable from `root`; a tape can be consumed once.
    pub fn backward(&mut self, root: Var) -> Result<(), AutodiffError> {
        self.check(root)?;
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let shape = self.nodes[root.index].value.shape().to_vec();
        if shape != [1] {
            return Err(AutodiffError::NonScalarRoot { shape });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.index + 1];
        if self.nodes[root.index].requires_grad {
            grads[root.index] = Some(vec![1.0]);
        }
        for i in (0..=root.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(rec) = &node.record else {
                if node.requires_grad {
                    self.nodes[i].grad = Some(g);
                }
                continue;
            };
            let inputs: Vec<&Tensor> = rec.inputs.iter().map(|&j| &*self.nodes[j].value).collect();
            let wants: Vec<bool> = rec.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let contribs = kernels::backward(&rec.op, &inputs, &node.value, &rec.saved, &g, &wants);
            for (k, contrib) in contribs.into_iter().enumerate() {
                let Some(c) = contrib else { continue };
                let j = rec.inputs[k];
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        if self.nodes.iter().any(|n| n.grad.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
            return Err(AutodiffError::NonFinite { op: "backward" });
        }
        Ok(())
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Mul, &[a, b])
    }
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::SoftmaxRows { causal }, &[a])
    }
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::LogSoftmaxRows, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Log, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Exp, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Relu, &[a])
    }
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::LayerNormRows { eps: 1e-5 }, &[x, gain, bias])
    }
    pub fn embedding_lookup(&mut self, table: Var, ids: Vec<usize>) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::EmbeddingLookup { ids }, &[table])
    }
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, end: usize) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Slice { axis, start, end }, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Transpose, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Scale(c), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Mean, &[a])
    }
    pub fn dropout(&mut self, x: Var, mask: Var, scale: f64) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::DropoutMaskApply { scale }, &[x, mask])
    }
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Gather { indices }, &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let k = self.constant(Tensor::scalar(c)?);
        self.add(a, k)
    }
}

mod kernels {
    use super::{Axis, OpKind};
    use crate::autodiff::{AutodiffError, Tensor};

    fn mismatch(op: &OpKind, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch { op: op.name(), detail }
    }

    fn rank2(op: &OpKind, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            [c] if !matches!(op, OpKind::MatMul | OpKind::Transpose) => Ok((1, *c)),
            s => Err(mismatch(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn make(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor, AutodiffError> {
        Tensor::new(shape, values)
    }

    pub(super) fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        out
    }

    pub(super) fn forward(op: &OpKind, x: &[&Tensor]) -> Result<(Tensor, Vec<f64>), AutodiffError> {
        let none = Vec::new();
        match op {
            OpKind::MatMul => {
                let (n, k) = rank2(op, x[0])?;
                let (k2, m) = rank2(op, x[1])?;
                if k != k2 {
                    return Err(mismatch(op, format!("[{n}x{k}] x [{k2}x{m}]")));
                }
                Ok((make(vec![n, m], matmul_into(x[0].values(), x[1].values(), n, k, m))?, none))
            }
            OpKind::Add => {
                let (a, b) = (x[0], x[1]);
                if a.shape() == b.shape() {
                    let v = a.values().iter().zip(b.values()).map(|(p, q)| p + q).collect();
                    Ok((make(a.shape().to_vec(), v)?, none))
                } else if let ([_, d], [d2]) = (a.shape(), b.shape()) {
                    if d != d2 {
                        return Err(mismatch(op, format!("row bias {:?} vs {:?}", b.shape(), a.shape())));
                    }
                    let d = *d;
                    let v = a.values().iter().enumerate().map(|(i, p)| p + b.values()[i % d]).collect();
                    Ok((make(a.shape().to_vec(), v)?, none))
                } else {
                    Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
                }
            }
            OpKind::Mul | OpKind::DropoutMaskApply { .. } => {
                let (a, b) = (x[0], x[1]);
                if a.shape() != b.shape() {
                    return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let s = if let OpKind::DropoutMaskApply { scale } = op { *scale } else { 1.0 };
                let v =
                    a.values().iter().zip(b.values()).map(|(p, q)| if s == 1.0 { p * q } else { p * q * s }).collect();
                Ok((make(a.shape().to_vec(), v)?, none))
            }
            OpKind::SoftmaxRows { causal } => {
                let (r, c) = rank2(op, x[0])?;
                if *causal && c < r {
                    return Err(mismatch(op, format!("causal softmax needs cols >= rows, got [{r}x{c}]")));
                }
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let row = x[0].row(i);
                    let lim = if *causal { i + 1 } else { c };
                    let mx = row[..lim].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for j in 0..lim {
                        let e = (row[j] - mx).exp();
                        out[i * c + j] = e;
                        s += e;
                    }
                    for j in 0..lim {
                        out[i * c + j] /= s;
                    }
                }
                Ok((make(x[0].shape().to_vec(), out)?, none))
            }
            OpKind::LogSoftmaxRows => {
                let (r, c) = rank2(op, x[0])?;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let row = x[0].row(i);
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
                    for j in 0..c {
                        out[i * c + j] = row[j] - lse;
                    }
                }
                Ok((make(x[0].shape().to_vec(), out)?, none))
            }
            OpKind::Log => {
                if x[0].values().iter().any(|&v| v <= 0.0) {
                    return Err(AutodiffError::NonFinite { op: "log" });
                }
                Ok((make(x[0].shape().to_vec(), x[0].values().iter().map(|v| v.ln()).collect())?, none))
            }
            OpKind::Exp => Ok((make(x[0].shape().to_vec(), x[0].values().iter().map(|v| v.exp()).collect())?, none)),
            OpKind::Relu => Ok((
                make(x[0].shape().to_vec(), x[0].values().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())?,
                none,
            )),
            OpKind::LayerNormRows { eps } => {
                let (r, c) = rank2(op, x[0])?;
                if x[1].shape() != [c] || x[2].shape() != [c] {
                    return Err(mismatch(
                        op,
                        format!("gain {:?} / bias {:?} for rows of width {c}", x[1].shape(), x[2].shape()),
                    ));
                }
                let (g, b) = (x[1].values(), x[2].values());
                let mut out = vec![0.0; r * c];
                // saved: normalized rows, then one reciprocal std per row
                let mut saved = vec![0.0; r * c + r];
                for i in 0..r {
                    let row = x[0].row(i);
                    let mu = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    saved[r * c + i] = rstd;
                    for j in 0..c {
                        let xh = (row[j] - mu) * rstd;
                        saved[i * c + j] = xh;
                        out[i * c + j] = xh * g[j] + b[j];
                    }
                }
                Ok((make(x[0].shape().to_vec(), out)?, saved))
            }
            OpKind::EmbeddingLookup { ids } => {
                let (v, d) = rank2(op, x[0])?;
                if ids.is_empty() {
                    return Err(mismatch(op, "empty id list".into()));
                }
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(mismatch(op, format!("id {id} out of range for table with {v} rows")));
                    }
                    out.extend_from_slice(x[0].row(id));
                }
                Ok((make(vec![ids.len(), d], out)?, none))
            }
            OpKind::Concat { axis } => {
                let dims: Vec<(usize, usize)> = x.iter().map(|t| rank2(op, t)).collect::<Result<_, _>>()?;
                match axis {
                    Axis::Rows => {
                        let c = dims[0].1;
                        if dims.iter().any(|d| d.1 != c) {
                            return Err(mismatch(op, format!("column counts differ: {dims:?}")));
                        }
                        let r = dims.iter().map(|d| d.0).sum();
                        let v = x.iter().flat_map(|t| t.values().iter().copied()).collect();
                        Ok((make(vec![r, c], v)?, none))
                    }
                    Axis::Cols => {
                        let r = dims[0].0;
                        if dims.iter().any(|d| d.0 != r) {
                            return Err(mismatch(op, format!("row counts differ: {dims:?}")));
                        }
                        let c: usize = dims.iter().map(|d| d.1).sum();
                        let mut v = Vec::with_capacity(r * c);
                        for i in 0..r {
                            for t in x {
                                v.extend_from_slice(t.row(i));
                            }
                        }
                        Ok((make(vec![r, c], v)?, none))
                    }
                }
            }
            OpKind::Slice { axis, start, end } => {
                let (r, c) = rank2(op, x[0])?;
                let lim = if *axis == Axis::Rows { r } else { c };
                if start >= end || *end > lim {
                    return Err(mismatch(op, format!("range {start}..{end} on {axis:?} of [{r}x{c}]")));
                }
                match axis {
                    Axis::Rows => Ok((make(vec![end - start, c], x[0].values()[start * c..end * c].to_vec())?, none)),
                    Axis::Cols => {
                        let mut v = Vec::with_capacity(r * (end - start));
                        for i in 0..r {
                            v.extend_from_slice(&x[0].row(i)[*start..*end]);
                        }
                        Ok((make(vec![r, end - start], v)?, none))
                    }
                }
            }
            OpKind::Transpose => {
                let (r, c) = rank2(op, x[0])?;
                let a = x[0].values();
                let mut v = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        v[j * r + i] = a[i * c + j];
                    }
                }
                Ok((make(vec![c, r], v)?, none))
            }
            OpKind::Scale(k) => Ok((make(x[0].shape().to_vec(), x[0].values().iter().map(|v| v * k).collect())?, none)),
            OpKind::Sum => Ok((make(vec![1], vec![x[0].values().iter().fold(0.0, |a, b| a + b)])?, none)),
            OpKind::Mean => {
                let s = x[0].values().iter().fold(0.0, |a, b| a + b);
                Ok((make(vec![1], vec![s / x[0].len() as f64])?, none))
            }
            OpKind::Gather { indices } => {
                if indices.is_empty() {
                    return Err(mismatch(op, "empty index list".into()));
                }
                let n = x[0].len();
                let mut v = Vec::with_capacity(indices.len());
                for &i in indices {
                    if i >= n {
                        return Err(mismatch(op, format!("index {i} out of range for {n} elements")));
                    }
                    v.push(x[0].values()[i]);
                }
                Ok((make(vec![indices.len()], v)?, none))
            }
        }
    }

    /// Vector-Jacobian products for each input (None where no gradient is wanted).
    pub(super) fn backward(
        op: &OpKind,
        x: &[&Tensor],
        out: &Tensor,
        saved: &[f64],
        g: &[f64],
        wants: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let w = |k: usize| wants.get(k).copied().unwrap_or(false);
        match op {
            OpKind::MatMul => {
                let (n, k) = x[0].dims2();
                let (_, m) = x[1].dims2();
                let (a, b) = (x[0].values(), x[1].values());
                let da = w(0).then(|| {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &b[p * m..(p + 1) * m];
                            da[i * k + p] = grow.iter().zip(brow).fold(0.0, |s, (gv, bv)| s + gv * bv);
                        }
                    }
                    da
                });
                let db = w(1).then(|| {
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = a[i * k + p];
                            let drow = &mut db[p * m..(p + 1) * m];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                    db
                });
                vec![da, db]
            }
            OpKind::Add => {
                let da = w(0).then(|| g.to_vec());
                let db = w(1).then(|| {
                    if x[0].shape() == x[1].shape() {
                        g.to_vec()
                    } else {
                        let d = x[1].len();
                        let mut db = vec![0.0; d];
                        for (i, gv) in g.iter().enumerate() {
                            db[i % d] += gv;
                        }
                        db
                    }
                });
                vec![da, db]
            }
            OpKind::Mul => {
                let da = w(0).then(|| g.iter().zip(x[1].values()).map(|(a, b)| a * b).collect());
                let db = w(1).then(|| g.iter().zip(x[0].values()).map(|(a, b)| a * b).collect());
                vec![da, db]
            }
            OpKind::DropoutMaskApply { scale } => {
                let da = w(0).then(|| g.iter().zip(x[1].values()).map(|(a, m)| a * m * scale).collect());
                vec![da, None]
            }
            OpKind::SoftmaxRows { .. } => {
                let (r, c) = out.dims2();
                let y = out.values();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                    for j in 0..c {
                        dx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                vec![Some(dx)]
            }
            OpKind::LogSoftmaxRows => {
                let (r, c) = out.dims2();
                let y = out.values();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] - y[i * c + j].exp() * gs;
                    }
                }
                vec![Some(dx)]
            }
            OpKind::Log => vec![Some(g.iter().zip(x[0].values()).map(|(a, v)| a / v).collect())],
            OpKind::Exp => vec![Some(g.iter().zip(out.values()).map(|(a, y)| a * y).collect())],
            OpKind::Relu => {
                vec![Some(g.iter().zip(x[0].values()).map(|(a, &v)| if v > 0.0 { *a } else { 0.0 }).collect())]
            }
            OpKind::LayerNormRows { .. } => {
                let (r, c) = x[0].dims2();
                let gain = x[1].values();
                let (xhat, rstd) = saved.split_at(r * c);
                let mut dx = w(0).then(|| vec![0.0; r * c]);
                let mut dg = w(1).then(|| vec![0.0; c]);
                let mut db = w(2).then(|| vec![0.0; c]);
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    let xi = &xhat[i * c..(i + 1) * c];
                    if let Some(dg) = dg.as_mut() {
                        for j in 0..c {
                            dg[j] += gi[j] * xi[j];
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for j in 0..c {
                            db[j] += gi[j];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        for j in 0..c {
                            dxhat[j] = gi[j] * gain[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dxhat[j] - m1 - xi[j] * m2);
                        }
                    }
                }
                vec![dx, dg, db]
            }
            OpKind::EmbeddingLookup { ids } => {
                let (v, d) = x[0].dims2();
                let mut dt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                vec![Some(dt)]
            }
            OpKind::Concat { axis } => {
                let (r, c) = out.dims2();
                let mut res = Vec::with_capacity(x.len());
                match axis {
                    Axis::Rows => {
                        let mut off = 0;
                        for (k, t) in x.iter().enumerate() {
                            let n = t.len();
                            res.push(w(k).then(|| g[off..off + n].to_vec()));
                            off += n;
                        }
                    }
                    Axis::Cols => {
                        let mut col = 0;
                        for (k, t) in x.iter().enumerate() {
                            let (_, tc) = t.dims2();
                            res.push(w(k).then(|| {
                                let mut v = Vec::with_capacity(r * tc);
                                for i in 0..r {
                                    v.extend_from_slice(&g[i * c + col..i * c + col + tc]);
                                }
                                v
                            }));
                            col += tc;
                        }
                    }
                }
                res
            }
            OpKind::Slice { axis, start, end } => {
                let (r, c) = x[0].dims2();
                let mut dx = vec![0.0; r * c];
                match axis {
                    Axis::Rows => dx[start * c..end * c].copy_from_slice(g),
                    Axis::Cols => {
                        let wdt = end - start;
                        for i in 0..r {
                            dx[i * c + start..i * c + end].copy_from_slice(&g[i * wdt..(i + 1) * wdt]);
                        }
                    }
                }
                vec![Some(dx)]
            }
            OpKind::Transpose => {
                let (r, c) = x[0].dims2();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(dx)]
            }
            OpKind::Scale(k) => vec![Some(g.iter().map(|v| v * k).collect())],
            OpKind::Sum => vec![Some(vec![g[0]; x[0].len()])],
            OpKind::Mean => vec![Some(vec![g[0] / x[0].len() as f64; x[0].len()])],
            OpKind::Gather { indices } => {
                let mut dx = vec![0.0; x[0].len()];
                for (k, &i) in indices.iter().enumerate() {
                    dx[i] += g[k];
                }
                vec![Some(dx)]
            }
        }
    }
}
