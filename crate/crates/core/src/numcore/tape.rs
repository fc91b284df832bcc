//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends one node whose inputs already live on the tape, so
//! the node order is a topological order and the backward sweep simply walks
//! the tape from the loss towards the leaves.

use std::borrow::Cow;
use std::cell::Cell;
use std::fmt;

use super::kernels;
use super::tensor::{numel, Tensor};
use super::NumError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    Sum,
    Mean,
    Exp,
    LogSigmoid,
    Silu,
    Softmax,
    LogSoftmax,
    RmsNorm,
    GatherRows,
    PickLast,
    ConcatLast,
    ConcatRows,
    Reshape,
    Custom,
}

/// Backward rule for an operation defined outside this module.
///
/// `grad_out` is the gradient of the loss with respect to `output`. The rule
/// returns one entry per input; entries may be `None` for inputs whose
/// `needs[i]` is false.
pub trait BackwardRule {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    LogSigmoid(Var),
    Silu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    PickLast {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Exp(..) => OpKind::Exp,
            Op::LogSigmoid(..) => OpKind::LogSigmoid,
            Op::Silu(..) => OpKind::Silu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::PickLast { .. } => OpKind::PickLast,
            Op::ConcatLast(..) => OpKind::ConcatLast,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Custom { .. } => OpKind::Custom,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Exp(a)
            | Op::LogSigmoid(a)
            | Op::Silu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a) => vec![*a],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::GatherRows { src, .. } | Op::PickLast { src, .. } => vec![*src],
            Op::ConcatLast(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

/// Read-only view of a recorded node.
#[derive(Clone, Debug)]
pub struct TapeNode {
    pub op_kind: OpKind,
    pub custom_name: Option<&'static str>,
    pub inputs: Vec<Var>,
    pub requires_grad: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

thread_local! {
    static CORRUPTED: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Test hooks for checking that the gradient oracle catches broken rules.
#[doc(hidden)]
pub mod fault {
    use super::{OpKind, CORRUPTED};

    /// While the guard lives, the backward rule of `kind` on this thread
    /// propagates 1.5× the true gradient.
    pub fn corrupt_backward(kind: OpKind) -> CorruptionGuard {
        CORRUPTED.with(|c| c.set(Some(kind)));
        CorruptionGuard(())
    }

    pub struct CorruptionGuard(());

    impl Drop for CorruptionGuard {
        fn drop(&mut self) {
            CORRUPTED.with(|c| c.set(None));
        }
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn node(&self, v: Var) -> TapeNode {
        let n = &self.nodes[v.0];
        TapeNode {
            op_kind: n.op.kind(),
            custom_name: match &n.op {
                Op::Custom { rule, .. } => Some(rule.name()),
                _ => None,
            },
            inputs: n.op.inputs(),
            requires_grad: n.requires_grad,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, NumError> {
        value.validate()?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. It participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        what: &str,
    ) -> Result<Tensor, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(tb.shape(), ta.shape()) {
            return Err(NumError::ShapeMismatch(format!(
                "{what}: {:?} does not broadcast onto {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let bn = tb.numel();
        let bd = tb.data();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bn]))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), out))
    }

    /// Element-wise sum; `b` may broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.broadcast_binary(a, b, |x, y| x + y, "add")?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.broadcast_binary(a, b, |x, y| x - y, "sub")?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.broadcast_binary(a, b, |x, y| x * y, "mul")?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect());
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect());
        self.push(out, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumError> {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(out, op)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, kernels::log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary(a, |x| x * kernels::sigmoid(x), Op::Silu(a))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).softmax_lastdim();
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let mut out = t.data().to_vec();
        kernels::log_softmax_rows(&mut out, t.last_dim());
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, NumError> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.last_dim();
        if tg.ndim() != 1 || tg.numel() != d {
            return Err(NumError::ShapeMismatch(format!(
                "rms_norm gain {:?} against last dimension {d}",
                tg.shape()
            )));
        }
        let mut out = vec![0.0; tx.numel()];
        let mut inv_rms = Vec::with_capacity(tx.numel() / d);
        kernels::rms_norm_rows(tx.data(), tg.data(), eps, d, &mut out, Some(&mut inv_rms));
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Selects rows (slices along the first dimension) by index, with
    /// repetition allowed.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var, NumError> {
        let t = self.value(src);
        if t.ndim() == 0 || idx.is_empty() {
            return Err(NumError::ShapeMismatch(
                "gather_rows needs rows and indices".into(),
            ));
        }
        let n = t.shape()[0];
        let row = t.numel() / n;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumError::IndexOutOfRange { index: bad, len: n });
        }
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::from_parts(shape, out);
        self.push(
            out,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
        )
    }

    /// For a `[R × V]` input returns the `[R]` vector `src[r, idx[r]]`.
    pub fn pick_last(&mut self, src: Var, idx: &[usize]) -> Result<Var, NumError> {
        let t = self.value(src);
        let v = t.last_dim();
        let rows = t.numel() / v;
        if t.ndim() != 2 || idx.len() != rows {
            return Err(NumError::ShapeMismatch(format!(
                "pick_last of {} indices from {:?}",
                idx.len(),
                t.shape()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(NumError::IndexOutOfRange { index: bad, len: v });
        }
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * v + i])
            .collect();
        let out = Tensor::from_parts(vec![rows], out);
        self.push(
            out,
            Op::PickLast {
                src,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::ShapeMismatch("concat of nothing".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = numel(&lead);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(NumError::ShapeMismatch(format!(
                    "concat_last of {s:?} with {lead:?}"
                )));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatLast(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::ShapeMismatch("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(NumError::ShapeMismatch(format!(
                    "concat_rows of {s:?} with tail {tail:?}"
                )));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumError> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    /// Records an operation whose forward value was computed by the caller
    /// and whose backward pass is `rule`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var, NumError> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        if self.value(loss).numel() != 1 {
            return Err(NumError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let corrupted = CORRUPTED.with(Cell::get);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g: Cow<[f64]> = if corrupted == Some(node.op.kind()) {
                Cow::Owned(g.iter().map(|x| x * 1.5).collect())
            } else {
                Cow::Borrowed(g)
            };
            self.backward_node(node, &g, lower);
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'a>(&self, lower: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(lower[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.slot(lower, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(lower, *b) {
                    let bn = gb.len();
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % bn] += sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let bn = vb.len();
                if let Some(ga) = self.slot(lower, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * vb[i % bn];
                    }
                }
                if let Some(gb) = self.slot(lower, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % bn] += y * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(lower, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(lower, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = self.slot(lower, *a) {
                    kernels::matmul_a_bt(g, tb.data(), ga, m, k, n);
                }
                if let Some(gb) = self.slot(lower, *b) {
                    kernels::matmul_at_b(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(lower, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(lower, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(lower, *a) {
                    for ((x, &y), &o) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += y * o;
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.slot(lower, *a) {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(va) {
                        *x += y * kernels::sigmoid(-v);
                    }
                }
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.slot(lower, *a) {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(va) {
                        let s = kernels::sigmoid(v);
                        *x += y * (s + v * s * (1.0 - s));
                    }
                }
            }
            Op::Softmax(a) => {
                let d = out.last_dim();
                if let Some(ga) = self.slot(lower, *a) {
                    for ((gr, pr), xr) in
                        g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d))
                    {
                        let inner = kernels::dot(gr, pr);
                        for ((x, &gv), &p) in xr.iter_mut().zip(gr).zip(pr) {
                            *x += p * (gv - inner);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let d = out.last_dim();
                if let Some(ga) = self.slot(lower, *a) {
                    for ((gr, lr), xr) in
                        g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d))
                    {
                        let total: f64 = gr.iter().sum();
                        for ((x, &gv), &l) in xr.iter_mut().zip(gr).zip(lr) {
                            *x += gv - l.exp() * total;
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tx.last_dim();
                let gd = tg.data();
                if let Some(gg) = self.slot(lower, *gain) {
                    for ((gr, xr), &inv) in g.chunks(d).zip(tx.data().chunks(d)).zip(inv_rms) {
                        for ((acc, &gv), &xv) in gg.iter_mut().zip(gr).zip(xr) {
                            *acc += gv * xv * inv;
                        }
                    }
                }
                if let Some(gx) = self.slot(lower, *x) {
                    for (((gr, xr), acc), &inv) in g
                        .chunks(d)
                        .zip(tx.data().chunks(d))
                        .zip(gx.chunks_mut(d))
                        .zip(inv_rms)
                    {
                        let s: f64 = gr.iter().zip(gd).zip(xr).map(|((a, b), c)| a * b * c).sum();
                        let coef = inv * inv * inv * s / d as f64;
                        for (((o, &gv), &gn), &xv) in acc.iter_mut().zip(gr).zip(gd).zip(xr) {
                            *o += inv * gn * gv - coef * xv;
                        }
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                if let Some(gs) = self.slot(lower, *src) {
                    let row = out.numel() / idx.len();
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, &y) in gs[i * row..(i + 1) * row]
                            .iter_mut()
                            .zip(&g[r * row..(r + 1) * row])
                        {
                            *x += y;
                        }
                    }
                }
            }
            Op::PickLast { src, idx } => {
                let v = self.value(*src).last_dim();
                if let Some(gs) = self.slot(lower, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        gs[r * v + i] += g[r];
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = out.last_dim();
                let rows = out.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(gp) = self.slot(lower, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.slot(lower, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += n;
                }
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.requires_grad(v)).collect();
                let contribs = rule.backward(&values, out, g, &needs);
                for (&v, contrib) in inputs.iter().zip(contribs) {
                    if let (Some(c), Some(gv)) = (contrib, self.slot(lower, v)) {
                        gv.iter_mut().zip(&c).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
}

/// Gradients of one scalar loss with respect to every tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; a zero tensor when `v` does not influence
    /// the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn wrt_data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn self_dot_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        let unused = tape.param(Tensor::ones(&[2, 2]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn broadcasting_is_trailing_only() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[2, 3]));
        let row = tape.param(Tensor::ones(&[3]));
        let col = tape.param(Tensor::ones(&[2]));
        assert!(tape.add(a, row).is_ok());
        assert!(tape.add(a, col).is_err());
    }

    #[test]
    fn nodes_record_inputs_in_topological_order() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[2]));
        let b = tape.exp(a).unwrap();
        let c = tape.mul(a, b).unwrap();
        let node = tape.node(c);
        assert_eq!(node.op_kind, OpKind::Mul);
        assert!(node.inputs.iter().all(|v| v.index() < c.index()));
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2]));
        let b = tape.exp(a).unwrap();
        assert!(!tape.requires_grad(b));
    }
}
