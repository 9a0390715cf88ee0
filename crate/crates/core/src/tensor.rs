//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! The primitive catalog is intentionally small: it is the closure of the
//! operations the model equations need (matrix products, elementwise
//! arithmetic, `tanh`/`cos`/`exp`/`log`/`square`, softplus, softmax over a
//! logit vector, means over equally shaped tensors, dot products, and
//! concatenation/row-stacking). Everything is `f64`.
//!
//! A [`Tape`] records applications while `recording` is enabled; calling
//! [`Tape::backward`] on a scalar root replays the record in reverse and
//! accumulates into [`ParamSet`] gradients. A tape is consumable exactly
//! once. Tensors produced on one tape act as constants on any other tape,
//! which is what truncated backpropagation through time relies on when
//! carrying node states across segment boundaries.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported operand shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },
    #[error("{op}: domain error on input value {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("tensor values length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward root was not produced on this tape under recording")]
    ForeignRoot,
    #[error("computation record already consumed by a previous backward")]
    RecordConsumed,
    #[error("parameter `{0}` already defined")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Primitive operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Dot,
    Tanh,
    Cos,
    Exp,
    Log,
    Square,
    Softplus,
    Softmax,
    Mean,
    Concat,
    StackRows,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale => "scale",
            Op::Dot => "dot",
            Op::Tanh => "tanh",
            Op::Cos => "cos",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Softplus => "softplus",
            Op::Softmax => "softmax",
            Op::Mean => "mean",
            Op::Concat => "concat",
            Op::StackRows => "stack_rows",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NodeRef {
    tape: u64,
    index: usize,
}

/// A dense row-major tensor. Cloning is cheap (values are shared).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values: Arc::new(values),
            node: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    /// Entries drawn i.i.d. from U(-bound, bound).
    pub fn uniform<R: rand::Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor {
            shape,
            values: Arc::new(values),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    /// Same values, no tape attachment: gradients stop here.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum NodeKind {
    Constant,
    Param(usize),
    Apply { op: Op, inputs: Vec<usize> },
}

struct Node {
    kind: NodeKind,
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Computation record: forward applications in topological order.
pub struct Tape {
    tag: u64,
    recording: bool,
    consumed: bool,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, usize>,
}

impl Tape {
    /// A fresh recording tape.
    pub fn new() -> Self {
        Tape {
            tag: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            recording: true,
            consumed: false,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// Forward-only: applications compute values but record nothing.
    pub fn forward_only() -> Self {
        Tape {
            tag: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            recording: false,
            consumed: false,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Read a parameter onto the tape. Repeated reads of the same parameter
    /// share one leaf node, so gradient contributions accumulate naturally.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Tensor {
        let value = set.value(id);
        if !self.recording {
            return value.detached();
        }
        let index = match self.param_nodes.get(&id.0) {
            Some(&ix) => ix,
            None => {
                let ix = self.nodes.len();
                self.nodes.push(Node {
                    kind: NodeKind::Param(id.0),
                    shape: value.shape.clone(),
                    values: Arc::clone(&value.values),
                });
                self.param_nodes.insert(id.0, ix);
                ix
            }
        };
        Tensor {
            shape: value.shape.clone(),
            values: Arc::clone(&value.values),
            node: Some(NodeRef {
                tape: self.tag,
                index,
            }),
        }
    }

    fn intern(&mut self, t: &Tensor) -> usize {
        if let Some(r) = t.node {
            if r.tape == self.tag {
                return r.index;
            }
        }
        let ix = self.nodes.len();
        self.nodes.push(Node {
            kind: NodeKind::Constant,
            shape: t.shape.clone(),
            values: Arc::clone(&t.values),
        });
        ix
    }

    /// Apply a primitive. When recording, the application is pushed onto the
    /// computation record; inputs from other tapes are treated as constants.
    pub fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let (shape, values) = forward(op, inputs)?;
        let values = Arc::new(values);
        let node = if self.recording {
            let ids: Vec<usize> = inputs.iter().map(|t| self.intern(t)).collect();
            let index = self.nodes.len();
            self.nodes.push(Node {
                kind: NodeKind::Apply { op, inputs: ids },
                shape: shape.clone(),
                values: Arc::clone(&values),
            });
            Some(NodeRef {
                tape: self.tag,
                index,
            })
        } else {
            None
        };
        Ok(Tensor {
            shape,
            values,
            node,
        })
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Mul, &[a, b])
    }
    /// Scale all entries of `a` by the scalar tensor `s` (gradient flows to both).
    pub fn scale(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.apply(Op::Scale, &[a, s])
    }
    /// Scale by a plain constant.
    pub fn scale_const(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let s = Tensor::scalar(c);
        self.apply(Op::Scale, &[a, &s])
    }
    pub fn dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Dot, &[a, b])
    }
    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn cos(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Cos, &[a])
    }
    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Log, &[a])
    }
    pub fn square(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Square, &[a])
    }
    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Softplus, &[a])
    }
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn mean(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.apply(Op::Mean, inputs)
    }
    pub fn concat(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.apply(Op::Concat, inputs)
    }
    pub fn stack_rows(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.apply(Op::StackRows, inputs)
    }

    /// Reverse pass from a scalar root. Accumulates `d root / d p` into the
    /// gradients of every parameter reached, consuming the record.
    pub fn backward(&mut self, root: &Tensor, params: &mut ParamSet) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::RecordConsumed);
        }
        let root_ref = match root.node {
            Some(r) if r.tape == self.tag => r,
            _ => return Err(TensorError::ForeignRoot),
        };
        if !root.is_scalar() {
            return Err(TensorError::NonScalarRoot {
                shape: root.shape.clone(),
            });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; n];
        adjoints[root_ref.index] = Some(vec![1.0]);

        for ix in (0..=root_ref.index).rev() {
            let grad = match adjoints[ix].take() {
                Some(g) => g,
                None => continue,
            };
            let (op, inputs) = match &self.nodes[ix].kind {
                NodeKind::Apply { op, inputs } => (*op, inputs.clone()),
                NodeKind::Param(pix) => {
                    params.accumulate(*pix, &grad);
                    adjoints[ix] = Some(grad);
                    continue;
                }
                NodeKind::Constant => {
                    adjoints[ix] = Some(grad);
                    continue;
                }
            };
            self.vjp(op, &inputs, ix, &grad, &mut adjoints);
            adjoints[ix] = Some(grad);
        }

        Ok(Gradients {
            tape: self.tag,
            adjoints,
        })
    }

    fn vjp(
        &self,
        op: Op,
        inputs: &[usize],
        out_ix: usize,
        grad: &[f64],
        adjoints: &mut [Option<Vec<f64>>],
    ) {
        let val = |ix: usize| -> &[f64] { &self.nodes[ix].values };
        let shape = |ix: usize| -> &[usize] { &self.nodes[ix].shape };
        let mut bump = |ix: usize, contrib: Vec<f64>| {
            match &mut adjoints[ix] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            };
        };

        match op {
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (shape(a), shape(b));
                let (va, vb) = (val(a), val(b));
                match (sa.len(), sb.len()) {
                    (2, 2) => {
                        let (m, k, nn) = (sa[0], sa[1], sb[1]);
                        let mut da = vec![0.0; m * k];
                        let mut db = vec![0.0; k * nn];
                        for i in 0..m {
                            for j in 0..k {
                                let mut s = 0.0;
                                for c in 0..nn {
                                    s += grad[i * nn + c] * vb[j * nn + c];
                                }
                                da[i * k + j] = s;
                            }
                        }
                        for j in 0..k {
                            for c in 0..nn {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += va[i * k + j] * grad[i * nn + c];
                                }
                                db[j * nn + c] = s;
                            }
                        }
                        bump(a, da);
                        bump(b, db);
                    }
                    (2, 1) => {
                        let (m, k) = (sa[0], sa[1]);
                        let mut da = vec![0.0; m * k];
                        let mut db = vec![0.0; k];
                        for i in 0..m {
                            for j in 0..k {
                                da[i * k + j] = grad[i] * vb[j];
                            }
                        }
                        for j in 0..k {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += va[i * k + j] * grad[i];
                            }
                            db[j] = s;
                        }
                        bump(a, da);
                        bump(b, db);
                    }
                    (1, 2) => {
                        let (k, nn) = (sb[0], sb[1]);
                        let mut da = vec![0.0; k];
                        let mut db = vec![0.0; k * nn];
                        for j in 0..k {
                            let mut s = 0.0;
                            for c in 0..nn {
                                s += vb[j * nn + c] * grad[c];
                            }
                            da[j] = s;
                        }
                        for j in 0..k {
                            for c in 0..nn {
                                db[j * nn + c] = va[j] * grad[c];
                            }
                        }
                        bump(a, da);
                        bump(b, db);
                    }
                    _ => unreachable!("matmul shapes checked in forward"),
                }
            }
            Op::Add => {
                bump(inputs[0], grad.to_vec());
                bump(inputs[1], grad.to_vec());
            }
            Op::Sub => {
                bump(inputs[0], grad.to_vec());
                bump(inputs[1], grad.iter().map(|g| -g).collect());
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                bump(a, val(b).iter().zip(grad).map(|(x, g)| x * g).collect());
                bump(b, val(a).iter().zip(grad).map(|(x, g)| x * g).collect());
            }
            Op::Scale => {
                let (a, s) = (inputs[0], inputs[1]);
                let sv = val(s)[0];
                bump(a, grad.iter().map(|g| sv * g).collect());
                let ds: f64 = val(a).iter().zip(grad).map(|(x, g)| x * g).sum();
                bump(s, vec![ds]);
            }
            Op::Dot => {
                let (a, b) = (inputs[0], inputs[1]);
                let g = grad[0];
                bump(a, val(b).iter().map(|x| g * x).collect());
                bump(b, val(a).iter().map(|x| g * x).collect());
            }
            Op::Tanh => {
                let y = val(out_ix);
                bump(
                    inputs[0],
                    y.iter().zip(grad).map(|(y, g)| (1.0 - y * y) * g).collect(),
                );
            }
            Op::Cos => {
                let x = val(inputs[0]);
                bump(
                    inputs[0],
                    x.iter().zip(grad).map(|(x, g)| -x.sin() * g).collect(),
                );
            }
            Op::Exp => {
                let y = val(out_ix);
                bump(inputs[0], y.iter().zip(grad).map(|(y, g)| y * g).collect());
            }
            Op::Log => {
                let x = val(inputs[0]);
                bump(inputs[0], x.iter().zip(grad).map(|(x, g)| g / x).collect());
            }
            Op::Square => {
                let x = val(inputs[0]);
                bump(
                    inputs[0],
                    x.iter().zip(grad).map(|(x, g)| 2.0 * x * g).collect(),
                );
            }
            Op::Softplus => {
                let x = val(inputs[0]);
                bump(
                    inputs[0],
                    x.iter().zip(grad).map(|(x, g)| sigmoid(*x) * g).collect(),
                );
            }
            Op::Softmax => {
                let y = val(out_ix);
                let inner: f64 = y.iter().zip(grad).map(|(y, g)| y * g).sum();
                bump(
                    inputs[0],
                    y.iter().zip(grad).map(|(y, g)| y * (g - inner)).collect(),
                );
            }
            Op::Mean => {
                let n = inputs.len() as f64;
                for &ix in inputs {
                    bump(ix, grad.iter().map(|g| g / n).collect());
                }
            }
            Op::Concat | Op::StackRows => {
                let mut offset = 0;
                for &ix in inputs {
                    let len = self.nodes[ix].values.len();
                    bump(ix, grad[offset..offset + len].to_vec());
                    offset += len;
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Adjoints of a completed backward pass, queryable by tensor handle.
pub struct Gradients {
    tape: u64,
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `t`, if `t` was part of the record.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let r = t.node?;
        if r.tape != self.tape {
            return None;
        }
        self.adjoints[r.index].as_deref()
    }
}

fn forward(op: Op, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    let arity_err = || TensorError::BadShape {
        op: op.name(),
        shape: vec![inputs.len()],
    };
    match op {
        Op::MatMul => {
            if inputs.len() != 2 {
                return Err(arity_err());
            }
            let (a, b) = (inputs[0], inputs[1]);
            let mismatch = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            };
            match (a.shape.len(), b.shape.len()) {
                (2, 2) => {
                    let (m, k) = (a.shape[0], a.shape[1]);
                    let (k2, n) = (b.shape[0], b.shape[1]);
                    if k != k2 {
                        return Err(mismatch());
                    }
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..k {
                            let aij = a.values[i * k + j];
                            if aij == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                out[i * n + c] += aij * b.values[j * n + c];
                            }
                        }
                    }
                    Ok((vec![m, n], out))
                }
                (2, 1) => {
                    let (m, k) = (a.shape[0], a.shape[1]);
                    if k != b.shape[0] {
                        return Err(mismatch());
                    }
                    let mut out = vec![0.0; m];
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..k {
                            s += a.values[i * k + j] * b.values[j];
                        }
                        out[i] = s;
                    }
                    Ok((vec![m], out))
                }
                (1, 2) => {
                    let k = a.shape[0];
                    let (k2, n) = (b.shape[0], b.shape[1]);
                    if k != k2 {
                        return Err(mismatch());
                    }
                    let mut out = vec![0.0; n];
                    for j in 0..k {
                        let xj = a.values[j];
                        if xj == 0.0 {
                            continue;
                        }
                        for c in 0..n {
                            out[c] += xj * b.values[j * n + c];
                        }
                    }
                    Ok((vec![n], out))
                }
                _ => Err(mismatch()),
            }
        }
        Op::Add | Op::Sub | Op::Mul => {
            if inputs.len() != 2 {
                return Err(arity_err());
            }
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape != b.shape {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let out = a
                .values
                .iter()
                .zip(b.values.iter())
                .map(|(x, y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            Ok((a.shape.clone(), out))
        }
        Op::Scale => {
            if inputs.len() != 2 {
                return Err(arity_err());
            }
            let (a, s) = (inputs[0], inputs[1]);
            if !s.is_scalar() {
                return Err(TensorError::ShapeMismatch {
                    op: "scale",
                    lhs: a.shape.clone(),
                    rhs: s.shape.clone(),
                });
            }
            let c = s.values[0];
            Ok((a.shape.clone(), a.values.iter().map(|x| c * x).collect()))
        }
        Op::Dot => {
            if inputs.len() != 2 {
                return Err(arity_err());
            }
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape.len() != 1 || a.shape != b.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "dot",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let s = a
                .values
                .iter()
                .zip(b.values.iter())
                .map(|(x, y)| x * y)
                .sum();
            Ok((vec![1], vec![s]))
        }
        Op::Tanh | Op::Cos | Op::Exp | Op::Square | Op::Softplus => {
            if inputs.len() != 1 {
                return Err(arity_err());
            }
            let a = inputs[0];
            let out = a
                .values
                .iter()
                .map(|&x| match op {
                    Op::Tanh => x.tanh(),
                    Op::Cos => x.cos(),
                    Op::Exp => x.exp(),
                    Op::Square => x * x,
                    _ => stable_softplus(x),
                })
                .collect();
            Ok((a.shape.clone(), out))
        }
        Op::Log => {
            if inputs.len() != 1 {
                return Err(arity_err());
            }
            let a = inputs[0];
            if let Some(&bad) = a.values.iter().find(|v| **v <= 0.0) {
                return Err(TensorError::Domain {
                    op: "log",
                    value: bad,
                });
            }
            Ok((a.shape.clone(), a.values.iter().map(|x| x.ln()).collect()))
        }
        Op::Softmax => {
            if inputs.len() != 1 {
                return Err(arity_err());
            }
            let a = inputs[0];
            if a.shape.len() != 1 || a.values.is_empty() {
                return Err(TensorError::BadShape {
                    op: "softmax",
                    shape: a.shape.clone(),
                });
            }
            let max = a.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = a.values.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            Ok((a.shape.clone(), exps.into_iter().map(|e| e / sum).collect()))
        }
        Op::Mean => {
            if inputs.is_empty() {
                return Err(arity_err());
            }
            let shape = inputs[0].shape.clone();
            for t in inputs {
                if t.shape != shape {
                    return Err(TensorError::ShapeMismatch {
                        op: "mean",
                        lhs: shape,
                        rhs: t.shape.clone(),
                    });
                }
            }
            let n = inputs.len() as f64;
            let mut out = vec![0.0; inputs[0].values.len()];
            for t in inputs {
                for (o, x) in out.iter_mut().zip(t.values.iter()) {
                    *o += x;
                }
            }
            for o in out.iter_mut() {
                *o /= n;
            }
            Ok((inputs[0].shape.clone(), out))
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(arity_err());
            }
            let mut out = Vec::new();
            for t in inputs {
                if t.shape.len() != 1 {
                    return Err(TensorError::BadShape {
                        op: "concat",
                        shape: t.shape.clone(),
                    });
                }
                out.extend_from_slice(&t.values);
            }
            Ok((vec![out.len()], out))
        }
        Op::StackRows => {
            if inputs.is_empty() {
                return Err(arity_err());
            }
            let d = inputs[0].shape.clone();
            if d.len() != 1 {
                return Err(TensorError::BadShape {
                    op: "stack_rows",
                    shape: d,
                });
            }
            let width = d[0];
            let mut out = Vec::with_capacity(inputs.len() * width);
            for t in inputs {
                if t.shape.len() != 1 || t.shape[0] != width {
                    return Err(TensorError::ShapeMismatch {
                        op: "stack_rows",
                        lhs: vec![width],
                        rhs: t.shape.clone(),
                    });
                }
                out.extend_from_slice(&t.values);
            }
            Ok((vec![inputs.len(), width], out))
        }
    }
}

/// Opaque handle to a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named trainable value and its gradient accumulator.
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn value(&self) -> &Tensor {
        &self.value
    }
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }
}

/// Ordered collection of named parameters. Definition order is stable so
/// that seeded initialization, optimizer state, and checkpoints line up.
#[derive(Default)]
pub struct ParamSet {
    items: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn define(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        let grad = vec![0.0; value.len()];
        let ix = self.items.len();
        self.items.push(Parameter {
            name: name.to_string(),
            value: value.detached(),
            grad,
        });
        self.by_name.insert(name.to_string(), ix);
        Ok(ParamId(ix))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&ix| ParamId(ix))
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.items[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.items[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.items[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.items.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    fn accumulate(&mut self, ix: usize, grad: &[f64]) {
        for (g, c) in self.items[ix].grad.iter_mut().zip(grad) {
            *g += c;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.items.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Replace a parameter's value (shape must match).
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.items[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value.detached();
        Ok(())
    }

    /// In-place update of a parameter's entries.
    pub fn update_value<F>(&mut self, id: ParamId, f: F)
    where
        F: FnOnce(&mut [f64]),
    {
        let p = &mut self.items[id.0];
        f(Arc::<Vec<f64>>::make_mut(&mut p.value.values).as_mut_slice());
        p.value.node = None;
    }

    /// Add `delta` to a single entry; used by finite differences.
    pub fn nudge(&mut self, id: ParamId, entry: usize, delta: f64) {
        self.update_value(id, |vals| vals[entry] += delta);
    }

    /// Deep copy (values and gradients).
    pub fn snapshot(&self) -> ParamSet {
        ParamSet {
            items: self
                .items
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Tensor {
                        shape: p.value.shape.clone(),
                        values: Arc::new(p.value.values().to_vec()),
                        node: None,
                    },
                    grad: p.grad.clone(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Compare analytic gradients of `loss_fn` against central finite differences.
///
/// Returns the max over parameter entries of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
///
/// `loss_fn` must be deterministic: it is re-evaluated many times at
/// perturbed parameter values, so any sampling inside must fix its own seed.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &mut ParamSet,
    epsilon: f64,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Tensor>,
{
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    // A loss that never touched the tape is constant in the parameters; its
    // analytic gradient is identically zero.
    if loss.node.map_or(false, |r| r.tape == tape.tag) {
        tape.backward(&loss, params)?;
    } else if !loss.is_scalar() {
        return Err(TensorError::NonScalarRoot {
            shape: loss.shape.clone(),
        });
    }
    let analytic: Vec<Vec<f64>> = params.ids().map(|id| params.grad(id).to_vec()).collect();

    let mut max_rel = 0.0f64;
    for (pix, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        for entry in 0..params.value(id).len() {
            params.nudge(id, entry, epsilon);
            let mut fwd = Tape::forward_only();
            let plus = loss_fn(&mut fwd, params)?.item();
            params.nudge(id, entry, -2.0 * epsilon);
            let mut fwd = Tape::forward_only();
            let minus = loss_fn(&mut fwd, params)?.item();
            params.nudge(id, entry, epsilon);

            let central = (plus - minus) / (2.0 * epsilon);
            let a = analytic[pix][entry];
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut tape = Tape::forward_only();
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::matrix(3, 3, vec![2., -1., 0.5, 3., 4., -2., 0., 1., 7.]).unwrap();
        let out = tape.matmul(&eye, &a).unwrap();
        assert_eq!(out.values(), a.values());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::forward_only();
        for c in [-3.0, 0.0, 11.5] {
            let x = Tensor::vector(vec![c, c, c]);
            let y = tape.softmax(&x).unwrap();
            for v in y.values() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut tape = Tape::forward_only();
        let y = tape.softplus(&Tensor::scalar(0.0)).unwrap();
        assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn backward_of_square_gives_two_x() {
        let mut params = ParamSet::new();
        let x = params.define("x", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&params, x);
        let y = tape.square(&xv).unwrap();
        tape.backward(&y, &mut params).unwrap();
        assert_eq!(params.grad(x), &[6.0]);
    }

    #[test]
    fn backward_of_tanh_at_zero_gives_one() {
        let mut params = ParamSet::new();
        let x = params.define("x", Tensor::scalar(0.0)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&params, x);
        let y = tape.tanh(&xv).unwrap();
        tape.backward(&y, &mut params).unwrap();
        assert_eq!(params.grad(x), &[1.0]);
    }

    #[test]
    fn backward_of_softplus_dot_matches_sigmoid_rule() {
        // root = softplus(w . x) at w = 0, x = 2 => dw = x * sigmoid(0) = 1
        let mut params = ParamSet::new();
        let w = params.define("w", Tensor::vector(vec![0.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&params, w);
        let x = Tensor::vector(vec![2.0]);
        let d = tape.dot(&wv, &x).unwrap();
        let y = tape.softplus(&d).unwrap();
        tape.backward(&y, &mut params).unwrap();
        assert!((params.grad(w)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_the_primitive() {
        let mut tape = Tape::forward_only();
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::vector(vec![0.0; 2]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::forward_only();
        let err = tape.log(&Tensor::scalar(0.0)).unwrap_err();
        assert!(matches!(err, TensorError::Domain { op: "log", .. }));
    }

    #[test]
    fn backward_requires_scalar_root_and_single_use() {
        let mut params = ParamSet::new();
        let w = params
            .define("w", Tensor::vector(vec![1.0, 2.0]))
            .unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&params, w);
        let y = tape.square(&wv).unwrap();
        assert!(matches!(
            tape.backward(&y, &mut params),
            Err(TensorError::NonScalarRoot { .. })
        ));
        let s = tape.dot(&wv, &wv).unwrap();
        tape.backward(&s, &mut params).unwrap();
        assert!(matches!(
            tape.backward(&s, &mut params),
            Err(TensorError::RecordConsumed)
        ));
    }

    #[test]
    fn foreign_tensors_act_as_constants() {
        let mut params = ParamSet::new();
        let w = params.define("w", Tensor::scalar(2.0)).unwrap();
        let mut old = Tape::new();
        let wv = old.param(&params, w);
        let carried = old.square(&wv).unwrap(); // 4, recorded on `old`

        let mut fresh = Tape::new();
        let wv2 = fresh.param(&params, w);
        let prod = fresh.mul(&carried, &wv2).unwrap();
        fresh.backward(&prod, &mut params).unwrap();
        // only the direct use contributes: d(4*w)/dw = 4
        assert_eq!(params.grad(w), &[4.0]);
    }

    #[test]
    fn recording_and_forward_only_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 5;
        let w = Tensor::matrix(d, d, rand_vec(&mut rng, d * d)).unwrap();
        let x = Tensor::vector(rand_vec(&mut rng, d));
        let run = |tape: &mut Tape| -> Vec<f64> {
            let h = tape.matmul(&w, &x).unwrap();
            let t = tape.tanh(&h).unwrap();
            let s = tape.softmax(&t).unwrap();
            let p = tape.softplus(&s).unwrap();
            p.values().to_vec()
        };
        let a = run(&mut Tape::new());
        let b = run(&mut Tape::forward_only());
        assert_eq!(a, b);
    }

    #[test]
    fn quadratic_loss_passes_fd_check_tightly() {
        let mut params = ParamSet::new();
        let w = params
            .define("w", Tensor::vector(vec![0.3, -1.2, 0.7, 2.0]))
            .unwrap();
        let max_rel = finite_difference_check(
            |tape, set| {
                let wv = tape.param(set, w);
                let sq = tape.dot(&wv, &wv)?;
                tape.scale_const(&sq, 0.5)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-8, "max_rel = {max_rel:e}");
    }

    #[test]
    fn constant_loss_passes_fd_check() {
        let mut params = ParamSet::new();
        let w = params.define("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let max_rel = finite_difference_check(
            |tape, set| {
                let _ = tape.param(set, w);
                Ok(Tensor::scalar(3.5))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-12);
        assert!(params.grad(w).iter().all(|g| *g == 0.0));
    }

    /// Every primitive's vector-Jacobian product against central differences
    /// at random interior points, 100 seeds each.
    #[test]
    fn primitive_vjps_match_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            check_unary(Op::Tanh, &mut rng);
            check_unary(Op::Cos, &mut rng);
            check_unary(Op::Exp, &mut rng);
            check_unary(Op::Square, &mut rng);
            check_unary(Op::Softplus, &mut rng);
            check_log(&mut rng);
            check_binary_elementwise(Op::Add, &mut rng);
            check_binary_elementwise(Op::Sub, &mut rng);
            check_binary_elementwise(Op::Mul, &mut rng);
            check_scale(&mut rng);
            check_dot(&mut rng);
            check_softmax(&mut rng);
            check_matmul(&mut rng);
            check_nary(&mut rng);
        }
    }

    /// FD over all entries of `params` for a loss builder; asserts < 1e-5.
    fn assert_fd<F>(loss_fn: F, params: &mut ParamSet)
    where
        F: FnMut(&mut Tape, &ParamSet) -> Result<Tensor>,
    {
        let rel = finite_difference_check(loss_fn, params, 1e-6).unwrap();
        assert!(rel < 1e-5, "vjp mismatch: rel={rel:e}");
    }

    // Reduce an arbitrary-shape output to a scalar through a fixed probe.
    fn probe(tape: &mut Tape, t: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let flat = if t.shape().len() == 2 {
            let rows = t.shape()[0];
            let cols = t.shape()[1];
            let w = Tensor::vector(rand_vec(rng, cols));
            let v = tape.matmul(t, &w)?; // [rows]
            let u = Tensor::vector(rand_vec(rng, rows));
            tape.dot(&v, &u)?
        } else if t.len() == 1 {
            t.clone()
        } else {
            let u = Tensor::vector(rand_vec(rng, t.len()));
            tape.dot(t, &u)?
        };
        Ok(flat)
    }

    fn check_unary(op: Op, rng: &mut ChaCha8Rng) {
        let mut params = ParamSet::new();
        let x = params
            .define("x", Tensor::vector(rand_vec(rng, 4)))
            .unwrap();
        let probe_vec = Tensor::vector(rand_vec(rng, 4));
        assert_fd(
            |tape, set| {
                let xv = tape.param(set, x);
                let y = tape.apply(op, &[&xv])?;
                tape.dot(&y, &probe_vec)
            },
            &mut params,
        );
    }

    fn check_log(rng: &mut ChaCha8Rng) {
        let mut params = ParamSet::new();
        let vals: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
        let x = params.define("x", Tensor::vector(vals)).unwrap();
        let probe_vec = Tensor::vector(rand_vec(rng, 4));
        assert_fd(
            |tape, set| {
                let xv = tape.param(set, x);
                let y = tape.log(&xv)?;
                tape.dot(&y, &probe_vec)
            },
            &mut params,
        );
    }

    fn check_binary_elementwise(op: Op, rng: &mut ChaCha8Rng) {
        let mut params = ParamSet::new();
        let a = params
            .define("a", Tensor::vector(rand_vec(rng, 3)))
            .unwrap();
        let b = params
            .define("b", Tensor::vector(rand_vec(rng, 3)))
            .unwrap();
        let probe_vec = Tensor::vector(rand_vec(rng, 3));
        assert_fd(
            |tape, set| {
                let av = tape.param(set, a);
                let bv = tape.param(set, b);
                let y = tape.apply(op, &[&av, &bv])?;
                tape.dot(&y, &probe_vec)
            },
            &mut params,
        );
    }

    fn check_scale(rng: &mut ChaCha8Rng) {
        let mut params = ParamSet::new();
        let a = params
            .define("a", Tensor::vector(rand_vec(rng, 3)))
            .unwrap();
        let s = params
            .define("s", Tensor::scalar(rng.gen_range(-1.0..1.0)))
            .unwrap();
        let probe_vec = Tensor::vector(rand_vec(rng, 3));
        assert_fd(
            |tape, set| {
                let av = tape.param(set, a);
                let sv = tape.param(set, s);
                let y = tape.scale(&av, &sv)?;
                tape.dot(&y, &probe_vec)
            },
            &mut params,
        );
    }

    fn check_dot(rng: &mut ChaCha8Rng) {
        let mut params = ParamSet::new();
        let a = params
            .define("a", Tensor::vector(rand_vec(rng, 4)))
            .unwrap();
        let b = params
            .define("b", Tensor::vector(rand_vec(rng, 4)))
            .unwrap();
        assert_fd(
            |tape, set| {
                let av = tape.param(set, a);
                let bv = tape.param(set, b);
                tape.dot(&av, &bv)
            },
            &mut params,
        );
    }

    fn check_softmax(rng: &mut ChaCha8Rng) {
        let mut params = ParamSet::new();
        let x = params
            .define("x", Tensor::vector(rand_vec(rng, 5)))
            .unwrap();
        let probe_vec = Tensor::vector(rand_vec(rng, 5));
        assert_fd(
            |tape, set| {
                let xv = tape.param(set, x);
                let y = tape.softmax(&xv)?;
                tape.dot(&y, &probe_vec)
            },
            &mut params,
        );
    }

    fn check_matmul(rng: &mut ChaCha8Rng) {
        // all three shape cases
        let mut params = ParamSet::new();
        let a = params
            .define("a", Tensor::matrix(3, 2, rand_vec(rng, 6)).unwrap())
            .unwrap();
        let b = params
            .define("b", Tensor::matrix(2, 4, rand_vec(rng, 8)).unwrap())
            .unwrap();
        let x = params
            .define("x", Tensor::vector(rand_vec(rng, 2)))
            .unwrap();
        let seeds = ChaCha8Rng::seed_from_u64(rng.gen());
        assert_fd(
            |tape, set| {
                let av = tape.param(set, a);
                let bv = tape.param(set, b);
                let xv = tape.param(set, x);
                let mm = tape.matmul(&av, &bv)?; // [3,4]
                let mv = tape.matmul(&av, &xv)?; // [3]
                let vm = tape.matmul(&xv, &bv)?; // [4]
                let p1 = probe(tape, &mm, &mut seeds.clone())?;
                let p2 = probe(tape, &mv, &mut {
                    let mut r = seeds.clone();
                    r.set_stream(1);
                    r
                })?;
                let p3 = probe(tape, &vm, &mut {
                    let mut r = seeds.clone();
                    r.set_stream(2);
                    r
                })?;
                let s = tape.add(&p1, &p2)?;
                tape.add(&s, &p3)
            },
            &mut params,
        );
    }

    fn check_nary(rng: &mut ChaCha8Rng) {
        let mut params = ParamSet::new();
        let a = params
            .define("a", Tensor::vector(rand_vec(rng, 3)))
            .unwrap();
        let b = params
            .define("b", Tensor::vector(rand_vec(rng, 3)))
            .unwrap();
        let c = params
            .define("c", Tensor::vector(rand_vec(rng, 3)))
            .unwrap();
        let probe_mean = Tensor::vector(rand_vec(rng, 3));
        let probe_cat = Tensor::vector(rand_vec(rng, 9));
        let probe_rows = Tensor::vector(rand_vec(rng, 3));
        let probe_out = Tensor::vector(rand_vec(rng, 3));
        assert_fd(
            |tape, set| {
                let av = tape.param(set, a);
                let bv = tape.param(set, b);
                let cv = tape.param(set, c);
                let m = tape.mean(&[&av, &bv, &cv])?;
                let p1 = tape.dot(&m, &probe_mean)?;
                let cat = tape.concat(&[&av, &bv, &cv])?;
                let p2 = tape.dot(&cat, &probe_cat)?;
                let rows = tape.stack_rows(&[&av, &bv, &cv])?; // [3,3]
                let rv = tape.matmul(&rows, &probe_rows)?;
                let p3 = tape.dot(&rv, &probe_out)?;
                let s = tape.add(&p1, &p2)?;
                tape.add(&s, &p3)
            },
            &mut params,
        );
    }

    #[test]
    fn param_grad_shape_and_zeroing() {
        let mut params = ParamSet::new();
        let w = params
            .define("w", Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        assert_eq!(params.grad(w).len(), params.value(w).len());
        let mut tape = Tape::new();
        let wv = tape.param(&params, w);
        let x = Tensor::vector(vec![1.0, -1.0]);
        let y = tape.matmul(&wv, &x).unwrap();
        let s = tape.dot(&y, &x).unwrap();
        tape.backward(&s, &mut params).unwrap();
        assert!(params.grad(w).iter().any(|g| *g != 0.0));
        params.zero_grad();
        assert!(params.grad(w).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn duplicate_parameter_rejected() {
        let mut params = ParamSet::new();
        params.define("w", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(
            params.define("w", Tensor::scalar(1.0)),
            Err(TensorError::DuplicateParameter(_))
        ));
    }
}
