//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node in creation order, so node
//! ids are already a topological order and [`Tape::backward`] is a single
//! reverse sweep. Leaves created with [`Tape::leaf`] collect gradients, which
//! accumulate across `backward` calls until [`Tape::zero_grad`].
//!
//! Broadcasting is limited to two forms: a one-element operand against any
//! tensor, and a trailing-axis vector (length = last extent) against a
//! matrix.

use crate::error::{Error, Result};
use crate::tensor::{self, round_half_away, sigmoid, softplus, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    RowLhs,
    RowRhs,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Binary(BinKind, Var, Var, Bcast),
    Scale(Var, f32),
    AddScalar(Var),
    Matmul(Var, Var),
    Linear(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice { src: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Clamp { src: Var, lo: f32, hi: f32 },
    Abs(Var),
    Pow { src: Var, exponent: f32 },
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Select { src: Var, index: usize },
    PassThrough(Var),
    RepeatCols { src: Var, group: usize },
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Binary(_, a, b, _) | Op::Matmul(a, b) | Op::Linear(a, b) => vec![*a, *b],
            Op::RmsNorm { x, w, .. } => vec![*x, *w],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scale(s, _)
            | Op::AddScalar(s)
            | Op::Transpose(s)
            | Op::Reshape(s)
            | Op::Slice { src: s, .. }
            | Op::Clamp { src: s, .. }
            | Op::Abs(s)
            | Op::Pow { src: s, .. }
            | Op::Exp(s)
            | Op::Sigmoid(s)
            | Op::Softplus(s)
            | Op::Softmax(s)
            | Op::Sum(s)
            | Op::Mean(s)
            | Op::Select { src: s, .. }
            | Op::PassThrough(s)
            | Op::RepeatCols { src: s, .. } => vec![*s],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Records operations for one training context. Not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A trainable input; receives gradients on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f32) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("{s:?} is not 2-D"))),
        }
    }

    // ---------------------------------------------------------------- binary

    fn bcast(&self, a: Var, b: Var, op: &'static str) -> Result<(Bcast, Vec<usize>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok((Bcast::Same, ta.shape().to_vec()));
        }
        if tb.is_scalar() {
            return Ok((Bcast::ScalarRhs, ta.shape().to_vec()));
        }
        if ta.is_scalar() {
            return Ok((Bcast::ScalarLhs, tb.shape().to_vec()));
        }
        let is_row = |t: &Tensor, other: &Tensor| {
            t.len() == other.last_dim() && (t.shape().len() == 1 || t.shape()[0] == 1)
        };
        if is_row(tb, ta) {
            return Ok((Bcast::RowRhs, ta.shape().to_vec()));
        }
        if is_row(ta, tb) {
            return Ok((Bcast::RowLhs, tb.shape().to_vec()));
        }
        Err(Error::shape(
            op,
            format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
        ))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (bc, shape) = self.bcast(a, b, name)?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        if matches!(kind, BinKind::Div) && tb.iter().any(|&x| x == 0.0) {
            return Err(Error::numeric("div", "division by zero"));
        }
        let len: usize = shape.iter().product();
        let cols = *shape.last().unwrap();
        let f = |x: f32, y: f32| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data: Vec<f32> = (0..len)
            .map(|i| {
                let (ia, ib) = bcast_index(bc, i, cols);
                f(ta[ia], tb[ib])
            })
            .collect();
        let value = Tensor::new(&shape, data)?;
        self.push(name, value, Op::Binary(kind, a, b, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push("scale", value, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a))
    }

    /// `c - a` for a constant `c`.
    pub fn rsub_scalar(&mut self, c: f32, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, c)
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let data = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        self.push("matmul", value, Op::Matmul(a, b))
    }

    /// `x · wᵀ` for `x: [s×m]`, `w: [n×m]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (s, m) = self.dims2(x, "linear")?;
        let (n, m2) = self.dims2(w, "linear")?;
        if m != m2 {
            return Err(Error::shape("linear", format!("input width {m} vs weight width {m2}")));
        }
        let data = tensor::matmul_nt(self.value(x).data(), self.value(w).data(), s, m, n);
        let value = Tensor::new(&[s, n], data)?;
        self.push("linear", value, Op::Linear(x, w))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push("transpose", value, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Contiguous slice `[start, start+len)` along `axis` (0 = rows, 1 = cols) of a matrix.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{} of [{r}x{c}]", start + len),
            ));
        }
        let src = self.value(a).data();
        let (shape, data) = if axis == 0 {
            (vec![len, c], src[start * c..(start + len) * c].to_vec())
        } else {
            let mut d = Vec::with_capacity(r * len);
            for row in src.chunks(c) {
                d.extend_from_slice(&row[start..start + len]);
            }
            (vec![r, len], d)
        };
        let value = Tensor::new(&shape, data)?;
        self.push("slice", value, Op::Slice { src: a, axis, start })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need inputs and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = inputs
            .iter()
            .map(|&v| self.dims2(v, "concat"))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let (shape, data) = if axis == 0 {
            if dims.iter().any(|d| d.1 != c0) {
                return Err(Error::shape("concat", "column counts differ"));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            (vec![rows, c0], data)
        } else {
            if dims.iter().any(|d| d.0 != r0) {
                return Err(Error::shape("concat", "row counts differ"));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for row in 0..r0 {
                for (&v, &(_, c)) in inputs.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(v).data()[row * c..(row + 1) * c]);
                }
            }
            (vec![r0, cols], data)
        };
        let value = Tensor::new(&shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Expands per-group columns: `out[r, j] = src[r, j / group]` for `j < width`.
    pub fn repeat_cols(&mut self, a: Var, group: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "repeat_cols")?;
        if group == 0 || c != width.div_ceil(group) {
            return Err(Error::shape(
                "repeat_cols",
                format!("{c} groups of {group} cannot cover width {width}"),
            ));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * width);
        for row in src.chunks(c) {
            data.extend((0..width).map(|j| row[j / group]));
        }
        let value = Tensor::new(&[r, width], data)?;
        self.push("repeat_cols", value, Op::RepeatCols { src: a, group })
    }

    // ---------------------------------------------------------------- elementwise

    /// Clamp into `[lo, hi]`; gradient flows only where the input lies inside.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp { src: a, lo, hi })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f32::abs);
        self.push("abs", value, Op::Abs(a))
    }

    pub fn pow(&mut self, a: Var, exponent: f32) -> Result<Var> {
        let t = self.value(a);
        if exponent.fract() != 0.0 && t.data().iter().any(|&x| x < 0.0) {
            return Err(Error::numeric(
                "pow",
                "negative base with fractional exponent",
            ));
        }
        let value = t.map(|x| x.powf(exponent));
        self.push("pow", value, Op::Pow { src: a, exponent })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f32::exp);
        self.push("exp", value, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a))
    }

    /// `ln(1 + eˣ)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(softplus);
        self.push("softplus", value, Op::Softplus(a))
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = tensor::softmax_rows(t.data(), t.last_dim());
        let value = Tensor::new(t.shape(), data)?;
        self.push("softmax", value, Op::Softmax(a))
    }

    /// Row softmax where row `i` may only see columns `j <= offset + i`.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "causal_softmax")?;
        if offset + r > c {
            return Err(Error::shape(
                "causal_softmax",
                format!("{r} query rows at offset {offset} exceed {c} key columns"),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let visible = offset + i + 1;
            tensor::softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|x| *x = 0.0);
        }
        let value = Tensor::new(&[r, c], data)?;
        self.push("causal_softmax", value, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean();
        self.push("mean", Tensor::scalar(m), Op::Mean(a))
    }

    fn masked_extreme(&mut self, a: Var, mask: &Tensor, want_max: bool) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(Error::shape("masked_extreme", "mask size differs"));
        }
        let mut best: Option<(usize, f32)> = None;
        for (i, (&x, &m)) in t.data().iter().zip(mask.data()).enumerate() {
            if m == 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, b)) => {
                    if want_max {
                        x > b
                    } else {
                        x < b
                    }
                }
            };
            if better {
                best = Some((i, x));
            }
        }
        let (index, x) = best.ok_or_else(|| Error::contract("extreme over an empty mask"))?;
        self.push("masked_extreme", Tensor::scalar(x), Op::Select { src: a, index })
    }

    /// Maximum over elements where `mask != 0`; gradient goes to the first argmax.
    pub fn masked_max(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        self.masked_extreme(a, mask, true)
    }

    pub fn masked_min(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        self.masked_extreme(a, mask, false)
    }

    /// Constant 0/1 mask of `x >= threshold`.
    pub fn mask_ge(&mut self, a: Var, threshold: f32) -> Var {
        let m = self.value(a).mask_ge(threshold);
        self.constant(m)
    }

    /// Constant 0/1 mask of `x < threshold`.
    pub fn mask_lt(&mut self, a: Var, threshold: f32) -> Var {
        let m = self.value(a).mask_lt(threshold);
        self.constant(m)
    }

    // ---------------------------------------------------------------- custom gradients

    /// Forward rounds half away from zero; backward is the identity.
    pub fn ste_round(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(round_half_away);
        self.push("ste_round", value, Op::PassThrough(a))
    }

    /// Forward thresholds at 0.5 (ties to 1); backward is the identity.
    pub fn ste_binarize(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mask_ge(0.5);
        self.push("ste_binarize", value, Op::PassThrough(a))
    }

    /// Forward copies `a`; contributes no gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Forward emits `hard` exactly; backward routes the gradient to `soft`.
    /// Equivalent to `sg[hard - soft] + soft` without the rounding error.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::shape("straight_through", "hard and soft shapes differ"));
        }
        self.push("straight_through", hard, Op::PassThrough(soft))
    }

    // ---------------------------------------------------------------- fused model ops

    /// Row-wise RMS normalisation with a learned gain `w` of length `d`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f32) -> Result<Var> {
        let (rows, d) = self.dims2(x, "rms_norm")?;
        if self.value(w).len() != d {
            return Err(Error::shape("rms_norm", "gain length differs from width"));
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut inv_rms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * d);
        for row in xv.chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(wv).map(|(a, g)| a * r * g));
        }
        let value = Tensor::new(&[rows, d], data)?;
        self.push("rms_norm", value, Op::RmsNorm { x, w, inv_rms })
    }

    /// Gathers rows of `table` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", format!("id {bad} outside vocab {vocab}")));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean next-token negative log-likelihood of `targets` under `logits: [s×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (s, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != s {
            return Err(Error::shape("cross_entropy", "one target per row required"));
        }
        if targets.iter().any(|&t| t >= vocab) {
            return Err(Error::shape("cross_entropy", "target outside vocab"));
        }
        let probs = tensor::softmax_rows(self.value(logits).data(), vocab);
        let nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(probs[i * vocab + t].max(f32::MIN_POSITIVE) as f64).ln())
            .sum();
        let value = Tensor::scalar((nll / s as f64) as f32);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    // ---------------------------------------------------------------- backward

    /// Propagates `d loss / d node` to every leaf, adding into existing leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((id, g));
                continue;
            }
            for (input, gi) in self.input_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }

        for (id, g) in leaf_grads {
            match &mut self.nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, id: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Binary(kind, a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = out.last_dim();
                let (av, bv) = (ta.data(), tb.data());
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = bcast_index(*bc, i, cols);
                    let (x, y) = (av[ia], bv[ib]);
                    let (da, db) = match kind {
                        BinKind::Add => (gi, gi),
                        BinKind::Sub => (gi, -gi),
                        BinKind::Mul => (gi * y, gi * x),
                        BinKind::Div => (gi / y, -gi * x / (y * y)),
                    };
                    ga[ia] += da;
                    gb[ib] += db;
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::AddScalar(a) | Op::Reshape(a) | Op::PassThrough(a) => vec![(*a, g.to_vec())],
            Op::Matmul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = out.last_dim();
                let da = tensor::matmul_nt(g, self.value(*b).data(), m, n, k);
                let db = tensor::matmul_tn(self.value(*a).data(), g, k, m, n);
                vec![(*a, da), (*b, db)]
            }
            Op::Linear(x, w) => {
                let (s, m) = dims(self.value(*x));
                let n = out.last_dim();
                let dx = tensor::matmul(g, self.value(*w).data(), s, n, m);
                let dw = tensor::matmul_tn(g, self.value(*x).data(), n, s, m);
                vec![(*x, dx), (*w, dw)]
            }
            Op::Transpose(a) => {
                let (r, c) = dims(out);
                vec![(*a, tensor::transpose(g, r, c))]
            }
            Op::Slice { src, axis, start } => {
                let (r, c) = dims(self.value(*src));
                let mut gs = vec![0.0; r * c];
                let (_, oc) = dims(out);
                if *axis == 0 {
                    gs[start * c..start * c + g.len()].copy_from_slice(g);
                } else {
                    for row in 0..r {
                        gs[row * c + start..row * c + start + oc]
                            .copy_from_slice(&g[row * oc..(row + 1) * oc]);
                    }
                }
                vec![(*src, gs)]
            }
            Op::Concat { inputs, axis } => {
                let (_, total_c) = dims(out);
                let mut res = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &v in inputs {
                    let (r, c) = dims(self.value(v));
                    let gi = if *axis == 0 {
                        g[offset * c..(offset + r) * c].to_vec()
                    } else {
                        let mut gi = Vec::with_capacity(r * c);
                        for row in 0..r {
                            gi.extend_from_slice(
                                &g[row * total_c + offset..row * total_c + offset + c],
                            );
                        }
                        gi
                    };
                    offset += if *axis == 0 { r } else { c };
                    res.push((v, gi));
                }
                res
            }
            Op::Clamp { src, lo, hi } => {
                let x = self.value(*src).data();
                let gi = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                    .collect();
                vec![(*src, gi)]
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let gi = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*a, gi)]
            }
            Op::Pow { src, exponent } => {
                let x = self.value(*src).data();
                let p = *exponent;
                let gi = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv == 0.0 && p < 1.0 {
                            0.0
                        } else {
                            gv * p * xv.powf(p - 1.0)
                        }
                    })
                    .collect();
                vec![(*src, gi)]
            }
            Op::Exp(a) => vec![(*a, g.iter().zip(out.data()).map(|(x, y)| x * y).collect())],
            Op::Sigmoid(a) => vec![(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect(),
            )],
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                vec![(*a, g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid(xv)).collect())]
            }
            Op::Softmax(a) => {
                let c = out.last_dim();
                let mut gi = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(gi.chunks_mut(c))
                {
                    let dotp: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (gv - dotp);
                    }
                }
                vec![(*a, gi)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Mean(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / n as f32; n])]
            }
            Op::Select { src, index } => {
                let mut gi = vec![0.0; self.value(*src).len()];
                gi[*index] = g[0];
                vec![(*src, gi)]
            }
            Op::RepeatCols { src, group } => {
                let (r, c) = dims(self.value(*src));
                let width = out.last_dim();
                let mut gi = vec![0.0; r * c];
                for row in 0..r {
                    for j in 0..width {
                        gi[row * c + j / group] += g[row * width + j];
                    }
                }
                vec![(*src, gi)]
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let d = wv.len();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; d];
                for (row, &r) in inv_rms.iter().enumerate() {
                    let xr = &xv[row * d..(row + 1) * d];
                    let gr = &g[row * d..(row + 1) * d];
                    let mut s = 0.0;
                    for j in 0..d {
                        gw[j] += gr[j] * xr[j] * r;
                        s += gr[j] * wv[j] * xr[j];
                    }
                    let k = r * r * r * s / d as f32;
                    for j in 0..d {
                        gx[row * d + j] = r * gr[j] * wv[j] - k * xr[j];
                    }
                }
                vec![(*x, gx), (*w, gw)]
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = dims(self.value(*table));
                let mut gt = vec![0.0; vocab * d];
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[row * d + j];
                    }
                }
                vec![(*table, gt)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = targets.len();
                let vocab = probs.len() / s;
                let scale = g[0] / s as f32;
                let mut gl: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * vocab + t] -= scale;
                }
                vec![(*logits, gl)]
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2()
}

#[inline]
fn bcast_index(bc: Bcast, i: usize, cols: usize) -> (usize, usize) {
    match bc {
        Bcast::Same => (i, i),
        Bcast::ScalarRhs => (i, 0),
        Bcast::ScalarLhs => (0, i),
        Bcast::RowRhs => (i, i % cols),
        Bcast::RowLhs => (i % cols, i),
    }
}
