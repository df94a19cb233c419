//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive pushes a node holding its forward value and the ids of
//! its inputs. Nodes are appended in evaluation order, so the node list is
//! already a topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.
//!
//! Binary elementwise ops accept a right-hand side whose shape is a suffix of
//! the left-hand shape (trailing broadcast). Nothing else broadcasts
//! implicitly; [`Tape::broadcast_axis`] inserts an axis explicitly.
//!
//! ```
//! use pfedseq::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise kinds exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Exp,
    Softplus,
    Silu,
    Tanh,
    Add,
    Mul,
}

/// Deliberately broken derivative rules, used as negative controls for the
/// gradient checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the SiLU derivative by 1.1.
    SiluDerivative,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Softplus(Var),
    Silu(Var),
    Tanh(Var),
    Scale(Var, f64),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Reshape(Var),
    SliceLast { x: Var, start: usize },
    Select { x: Var, axis: usize, index: usize },
    Stack { xs: Vec<Var>, axis: usize },
    BroadcastAxis { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    CausalConv { x: Var, w: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    fault: Option<Fault>,
}

/// Gradients of a scalar output with respect to the tape's leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::param`]; `None` for
    /// constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(full: &[usize], tail: &[usize]) -> bool {
    tail.len() <= full.len() && full[full.len() - tail.len()..] == *tail
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Whether gradients flow to `v` from some trainable leaf.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&mut self, value: Tensor, op_name: &str, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = value.ensure_finite(op_name)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, if rg { op } else { Op::Leaf }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.record(out, "matmul", Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.record(out, "transpose", Op::Transpose(a), &[a])
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(ta.shape(), tb.shape()) {
            return Err(Error::Dimension(format!(
                "{name}: {:?} does not trail-broadcast against {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let nb = tb.len();
        let data = ta
            .data()
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.record(out, "add", Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.record(out, "sub", Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.record(out, "mul", Op::Mul(a, b), &[a, b])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.record(out, "exp", Op::Exp(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.record(out, "softplus", Op::Softplus(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(silu);
        self.record(out, "silu", Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.record(out, "tanh", Op::Tanh(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.record(out, "scale", Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Dispatches on [`Elementwise`]; unary kinds take one argument, binary two.
    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Dimension(format!(
                "{kind:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match kind {
            Elementwise::Exp => self.exp(args[0]),
            Elementwise::Softplus => self.softplus(args[0]),
            Elementwise::Silu => self.silu(args[0]),
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
        }
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ gain` along the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("rmsnorm eps must be > 0, got {eps}")));
        }
        let (tx, tg) = (self.value(x), self.value(gain));
        let n = *tx.shape().last().ok_or_else(|| Error::Dimension("rmsnorm on scalar".into()))?;
        if tg.shape() != [n] {
            return Err(Error::Dimension(format!(
                "rmsnorm gain {:?} vs last extent {n}",
                tg.shape()
            )));
        }
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(n) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            data.extend(row.iter().zip(tg.data()).map(|(&v, &g)| v * r * g));
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.record(out, "rmsnorm", Op::RmsNorm { x, gain, eps }, &[x, gain])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.record(out, "reshape", Op::Reshape(x), &[x])
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().ok_or_else(|| Error::Dimension("slice of scalar".into()))?;
        if start + len > n {
            return Err(Error::Dimension(format!(
                "slice {start}..{} out of range {n}",
                start + len
            )));
        }
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::from_parts(shape, data);
        self.record(out, "slice_last", Op::SliceLast { x, start }, &[x])
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.ndim() || index >= tx.shape()[axis] {
            return Err(Error::Dimension(format!(
                "select axis {axis} index {index} on {:?}",
                tx.shape()
            )));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            data.extend_from_slice(&tx.data()[base..base + inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, data);
        self.record(out, "select", Op::Select { x, axis, index }, &[x])
    }

    /// Stacks equally-shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Dimension("stack of zero tensors".into()))?;
        let shape = self.shape(*first).to_vec();
        if axis > shape.len() {
            return Err(Error::Dimension(format!("stack axis {axis} on {shape:?}")));
        }
        if xs.iter().any(|&v| self.shape(v) != shape.as_slice()) {
            return Err(Error::Dimension("stack of mismatched shapes".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * xs.len() * inner);
        for o in 0..outer {
            for &v in xs {
                data.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, xs.len());
        let out = Tensor::from_parts(out_shape, data);
        self.record(
            out,
            "stack",
            Op::Stack {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Inserts a new axis of extent `n` at `axis`, replicating values.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis > tx.ndim() {
            return Err(Error::Dimension(format!(
                "broadcast axis {axis} on {:?}",
                tx.shape()
            )));
        }
        let outer: usize = tx.shape()[..axis].iter().product();
        let inner: usize = tx.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &tx.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.insert(axis, n);
        let out = Tensor::from_parts(shape, data);
        self.record(out, "broadcast_axis", Op::BroadcastAxis { x, axis }, &[x])
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.ndim() {
            return Err(Error::Dimension(format!("sum axis {axis} on {:?}", tx.shape())));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for j in 0..n {
                let base = (o * n + j) * inner;
                for (d, s) in dst.iter_mut().zip(&tx.data()[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, data);
        self.record(out, "sum_axis", Op::SumAxis { x, axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, "sum_all", Op::SumAll(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits[n×C]` against integer labels,
    /// computed with a max shift.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = tl.as_matrix("cross_entropy")?;
        if labels.len() != n || n == 0 {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} rows vs {} labels",
                labels.len()
            )));
        }
        let mut total = 0.0;
        for (row, &y) in tl.data().chunks(c).zip(labels) {
            if y >= c {
                return Err(Error::Dimension(format!("label {y} out of range {c}")));
            }
            total += log_sum_exp(row) - row[y];
        }
        let out = Tensor::scalar(total / n as f64);
        self.record(
            out,
            "cross_entropy",
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Causal depthwise convolution along axis 1 of `x[B×L×E]` with kernel
    /// `w[E×k]`: output step `j` sees inputs `j-k+1..=j`, left zero padded.
    pub fn causal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (b, l, e) = match tx.shape() {
            [b, l, e] => (*b, *l, *e),
            s => return Err(Error::Dimension(format!("causal_conv input rank 3, got {s:?}"))),
        };
        let (we, k) = tw.as_matrix("causal_conv kernel")?;
        if we != e {
            return Err(Error::Dimension(format!("causal_conv kernel {we} channels vs {e}")));
        }
        let (xd, wd) = (tx.data(), tw.data());
        let mut data = vec![0.0; b * l * e];
        for bi in 0..b {
            for j in 0..l {
                let out = &mut data[(bi * l + j) * e..(bi * l + j + 1) * e];
                for s in 0..k {
                    let Some(src_step) = (j + s + 1).checked_sub(k) else {
                        continue;
                    };
                    let src = &xd[(bi * l + src_step) * e..(bi * l + src_step + 1) * e];
                    for ch in 0..e {
                        out[ch] += wd[ch * k + s] * src[ch];
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![b, l, e], data);
        self.record(out, "causal_conv", Op::CausalConv { x, w }, &[x, w])
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        if self.value(output).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads)?;
        }

        // Keep gradients only for trainable leaves.
        for (i, g) in grads.iter_mut().enumerate() {
            let node = &self.nodes[i];
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                if g.is_none() {
                    *g = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                *g = None;
            }
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::numeric("backward"));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    /// Gradient for the trailing-broadcast right operand: sum over the
    /// leading repeats.
    fn reduce_trailing(g: &Tensor, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for chunk in g.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Tensor::from_parts(shape.to_vec(), out)
    }

    /// `gy ⊙ f'(x)` for a pointwise op with local derivative `f'`.
    fn unary_grad(&self, x: Var, gy: &Tensor, dfdx: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::from_parts(
            gy.shape().to_vec(),
            gy.data()
                .iter()
                .zip(xv.data())
                .map(|(&g, &xi)| g * dfdx(xi))
                .collect(),
        )
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.as_matrix("matmul")?;
                let n = tb.shape()[1];
                if self.rg(*a) {
                    // gA = gY · Bᵀ
                    let bt = tb.transpose()?;
                    let mut ga = vec![0.0; m * k];
                    matmul_into(gy.data(), bt.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.rg(*b) {
                    // gB = Aᵀ · gY
                    let at = ta.transpose()?;
                    let mut gb = vec![0.0; k * n];
                    matmul_into(at.data(), gy.data(), &mut gb, k, m, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, gy.transpose()?);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, gy.clone());
                if self.rg(*b) {
                    let gb = Self::reduce_trailing(gy, self.shape(*b));
                    self.accumulate(grads, *b, gb.map(|v| v * sign));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.len();
                if self.rg(*a) {
                    let ga = gy
                        .data()
                        .chunks(nb)
                        .flat_map(|c| c.iter().zip(tb.data()).map(|(g, y)| g * y))
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; nb];
                    for (gc, ac) in gy.data().chunks(nb).zip(ta.data().chunks(nb)) {
                        for ((o, g), x) in gb.iter_mut().zip(gc).zip(ac) {
                            *o += g * x;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), gb));
                }
            }
            Op::Exp(a) => {
                let g = Tensor::from_parts(
                    gy.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y)
                        .collect(),
                );
                self.accumulate(grads, *a, g);
            }
            Op::Softplus(a) => {
                let g = self.unary_grad(*a, gy, sigmoid);
                self.accumulate(grads, *a, g);
            }
            Op::Silu(a) => {
                let bump = if self.fault == Some(Fault::SiluDerivative) { 1.1 } else { 1.0 };
                let g = self.unary_grad(*a, gy, |x| silu_grad(x) * bump);
                self.accumulate(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = Tensor::from_parts(
                    gy.shape().to_vec(),
                    gy.data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                );
                self.accumulate(grads, *a, g);
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gy.map(|v| v * c));
            }
            Op::RmsNorm { x, gain, eps } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let n = tg.len();
                let mut gx = Vec::with_capacity(tx.len());
                let mut gg = vec![0.0; n];
                for (row, grow) in tx.data().chunks(n).zip(gy.data().chunks(n)) {
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let r = 1.0 / (ms + eps).sqrt();
                    let dot: f64 = row
                        .iter()
                        .zip(grow)
                        .zip(tg.data())
                        .map(|((x, g), w)| x * g * w)
                        .sum();
                    let coef = r * r * r * dot / n as f64;
                    for j in 0..n {
                        gx.push(r * tg.data()[j] * grow[j] - row[j] * coef);
                        gg[j] += grow[j] * row[j] * r;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
                self.accumulate(grads, *gain, Tensor::from_parts(vec![n], gg));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, gy.reshape(self.shape(*a))?);
            }
            Op::SliceLast { x, start } => {
                let shape = self.shape(*x);
                let n = *shape.last().unwrap();
                let len = *gy.shape().last().unwrap();
                let mut g = vec![0.0; self.value(*x).len()];
                for (dst, src) in g.chunks_mut(n).zip(gy.data().chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), g));
            }
            Op::Select { x, axis, index } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut g = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + index) * inner;
                    g[base..base + inner].copy_from_slice(&gy.data()[o * inner..(o + 1) * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), g));
            }
            Op::Stack { xs, axis } => {
                let shape = self.shape(xs[0]).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let n = xs.len();
                for (j, &v) in xs.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let mut g = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        let base = (o * n + j) * inner;
                        g.extend_from_slice(&gy.data()[base..base + inner]);
                    }
                    self.accumulate(grads, v, Tensor::from_parts(shape.clone(), g));
                }
            }
            Op::BroadcastAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let n = gy.shape()[*axis];
                let mut g = vec![0.0; outer * inner];
                for o in 0..outer {
                    let dst = &mut g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for (d, s) in dst.iter_mut().zip(&gy.data()[base..base + inner]) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), g));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut g = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let src = &gy.data()[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        g.extend_from_slice(src);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), g));
            }
            Op::SumAll(x) => {
                let g = gy.item()?;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::CrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let (n, c) = tl.as_matrix("cross_entropy")?;
                let scale = gy.item()? / n as f64;
                let mut g = Vec::with_capacity(n * c);
                for (row, &y) in tl.data().chunks(c).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        let t = if j == y { 1.0 } else { 0.0 };
                        g.push((p - t) * scale);
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_parts(vec![n, c], g));
            }
            Op::CausalConv { x, w } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (b, l, e) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let k = tw.shape()[1];
                let (xd, wd, gd) = (tx.data(), tw.data(), gy.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for bi in 0..b {
                    for j in 0..l {
                        let go = &gd[(bi * l + j) * e..(bi * l + j + 1) * e];
                        for s in 0..k {
                            let Some(src_step) = (j + s + 1).checked_sub(k) else {
                                continue;
                            };
                            let off = (bi * l + src_step) * e;
                            for ch in 0..e {
                                gx[off + ch] += wd[ch * k + s] * go[ch];
                                gw[ch * k + s] += xd[off + ch] * go[ch];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
                self.accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), gw));
            }
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
