//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every value produced during a forward pass. Each
//! primitive appends one node holding its output and the references needed
//! to replay it backwards. Because nodes can only refer to earlier nodes,
//! insertion order is already a topological order and [`Tape::backward`]
//! visits each record exactly once, newest first.
//!
//! Every primitive checks that its output is finite; a NaN or infinity is
//! reported as [`Error::NonFinite`] naming the primitive.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Conv1d { x: Var, kernel: Var, bias: Var, dilation: usize },
    Relu(Var),
    Softplus(Var),
    LogSoftplus(Var),
    Ln(Var),
    Scale(Var, f64),
    Reshape(Var),
    Square(Var),
    SqrtClamped { x: Var, min: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastCols { x: Var },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    Softmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Conv1d { .. } => "conv1d_dilated",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::LogSoftplus(_) => "log_softplus",
            Op::Ln(_) => "ln",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Square(_) => "square",
            Op::SqrtClamped { .. } => "sqrt_clamped",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Softmax { .. } => "softmax_axis",
            Op::LogSumExp { .. } => "logsumexp_axis",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitives for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `(outer, len, inner)` view of a tensor around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Below this, `log(softplus(v))` is `v − e^v/2` to double precision and
/// the direct form would underflow to `log(0)` near −745.
const LOG_SOFTPLUS_TAIL: f64 = -30.0;

fn log_softplus(v: f64) -> f64 {
    if v < LOG_SOFTPLUS_TAIL {
        v - 0.5 * v.exp()
    } else {
        softplus(v).ln()
    }
}

fn log_softplus_grad(v: f64) -> f64 {
    if v < LOG_SOFTPLUS_TAIL {
        1.0 - 0.5 * v.exp()
    } else {
        sigmoid(v) / softplus(v)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
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

    /// Gradient accumulated on `v` by the last [`Tape::backward`]. Only
    /// leaves keep their gradients; intermediate slots are released.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    /// Leaf that receives a gradient (a trainable parameter or an input
    /// under test).
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    fn leaf(&mut self, mut t: Tensor, needs_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        t.set_grad(None)?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `out[t] = x[t]·W + b` for `x: [T×A]`, `W: [A×B]`, `b: [B]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || bs != [ws[1]] {
            return Err(Error::dim(
                "affine",
                format!("x {xs:?}, W {ws:?}, b {bs:?}"),
            ));
        }
        let (t, a, n) = (xs[0], xs[1], ws[1]);
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = Vec::with_capacity(t * n);
        for row in 0..t {
            let mut acc = bd.to_vec();
            let xr = &xd[row * a..(row + 1) * a];
            for (k, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = &wd[k * n..(k + 1) * n];
                for (o, &wv) in acc.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
            out.extend_from_slice(&acc);
        }
        let value = Tensor::new(vec![t, n], out)?;
        self.push(value, Op::Affine { x, w, b }, &[x, w, b])
    }

    /// Dilated 1-D convolution over time with edge-replication padding.
    ///
    /// `x: [T×A]`, `kernel: [K×A×B]`, `bias: [B]`. Tap `k` reads frame
    /// `t + (k − c)·dilation` clamped into `[0, T)`, with `c = (K − 1) / 2`,
    /// so the output keeps all `T` frames.
    pub fn conv1d_dilated(&mut self, x: Var, kernel: Var, dilation: usize, bias: Var) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if xs.len() != 2 || ks.len() != 3 || ks[1] != xs[1] || bs != [ks[2]] {
            return Err(Error::dim(
                "conv1d_dilated",
                format!("x {xs:?}, kernel {ks:?}, bias {bs:?}"),
            ));
        }
        if dilation == 0 {
            return Err(Error::dim("conv1d_dilated", "dilation must be positive"));
        }
        let (t_len, a, k_len, n) = (xs[0], xs[1], ks[0], ks[2]);
        if t_len == 0 {
            return Err(Error::EmptyInput("conv1d_dilated"));
        }
        let (xd, kd, bd) = (self.data(x), self.data(kernel), self.data(bias));
        let mut out = Vec::with_capacity(t_len * n);
        for t in 0..t_len {
            let mut acc = bd.to_vec();
            for k in 0..k_len {
                let src = tap_index(t, k, k_len, dilation, t_len);
                let xr = &xd[src * a..(src + 1) * a];
                let kk = &kd[k * a * n..(k + 1) * a * n];
                for (ai, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wr = &kk[ai * n..(ai + 1) * n];
                    for (o, &wv) in acc.iter_mut().zip(wr) {
                        *o += xv * wv;
                    }
                }
            }
            out.extend_from_slice(&acc);
        }
        let value = Tensor::new(vec![t_len, n], out)?;
        self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
            },
            &[x, kernel, bias],
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Softplus => self.softplus(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// `log(1 + e^v)`, evaluated as `v + log1p(e^−v)` for positive `v`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, softplus);
        self.push(value, Op::Softplus(x), &[x])
    }

    /// `log(softplus(v))`, finite for every finite `v`.
    pub fn log_softplus(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, log_softplus);
        self.push(value, Op::LogSoftplus(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, f64::ln);
        self.push(value, Op::Ln(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.map(x, |v| c * v);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    /// `sqrt(max(v, min))`; the gradient is zero where the clamp is active.
    pub fn sqrt_clamped(&mut self, x: Var, min: f64) -> Result<Var> {
        let value = self.map(x, |v| v.max(min).sqrt());
        self.push(value, Op::SqrtClamped { x, min }, &[x])
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        Tensor::new(src.shape().to_vec(), data).expect("same shape")
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Repeats the single column of `x: [T×1]` to `[T×width]`.
    pub fn broadcast_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] != 1 || width == 0 {
            return Err(Error::dim("broadcast_cols", format!("x {xs:?} to width {width}")));
        }
        let rows = xs[0];
        let data = self
            .data(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, width))
            .collect();
        let value = Tensor::new(vec![rows, width], data)?;
        self.push(value, Op::BroadcastCols { x }, &[x])
    }

    /// Stacks `a: [m×D]` on top of `b: [n×D]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("concat_rows", format!("{sa:?} and {sb:?}")));
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::ConcatRows(a, b), &[a, b])
    }

    /// Joins `a: [r×m]` and `b: [r×n]` side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim("concat_cols", format!("{sa:?} and {sb:?}")));
        }
        let (r, m, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(r * (m + n));
        for i in 0..r {
            data.extend_from_slice(&da[i * m..(i + 1) * m]);
            data.extend_from_slice(&db[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![r, m + n], data)?;
        self.push(value, Op::ConcatCols(a, b), &[a, b])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::dim(op, format!("axis {axis} out of range for {s:?}")));
        }
        Ok(axis_split(s, axis))
    }

    fn reduced_shape(&self, x: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        s[axis] = 1;
        s
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("softmax_axis", x, axis)?;
        if len == 0 {
            return Err(Error::EmptyInput("softmax_axis"));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (xd[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[idx(k)] /= sum;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(value, Op::Softmax { x, axis }, &[x])
    }

    /// `log Σ exp(x)` along `axis`, keeping the reduced axis with extent 1.
    pub fn logsumexp_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("logsumexp_axis", x, axis)?;
        if len == 0 {
            return Err(Error::EmptyInput("logsumexp_axis"));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..len).map(|k| (xd[idx(k)] - max).exp()).sum();
                out[o * inner + i] = max + sum.ln();
            }
        }
        let value = Tensor::new(self.reduced_shape(x, axis), out)?;
        self.push(value, Op::LogSumExp { x, axis }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("sum_axis", x, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xd[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let value = Tensor::new(self.reduced_shape(x, axis), out)?;
        self.push(value, Op::SumAxis { x, axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("mean_axis", x, axis)?;
        if len == 0 {
            return Err(Error::EmptyInput("mean_axis"));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xd[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let n = len as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let value = Tensor::new(self.reduced_shape(x, axis), out)?;
        self.push(value, Op::MeanAxis { x, axis }, &[x])
    }

    /// Softmax cross-entropy of a single row of logits against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let ld = self.data(logits);
        let c = ld.len();
        if label >= c {
            return Err(Error::dim(
                "cross_entropy",
                format!("label {label} outside {c} classes"),
            ));
        }
        let max = ld.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = ld.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = max + sum.ln() - ld[label];
        let probs = exps.iter().map(|e| e / sum).collect();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        )
    }

    /// Back-propagates from the scalar `loss`, leaving `∂loss/∂leaf` in the
    /// grad slot of every leaf that requires one. Intermediate gradients are
    /// dropped once consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None)?;
        }
        self.nodes[loss.0].value.set_grad(Some(vec![1.0]))?;

        for idx in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].value.take_grad() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, op: &'static str, v: Var, contrib: &[f64]) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return Ok(());
        }
        if contrib.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteGradient { op });
        }
        let g = node.value.grad_mut_or_zero();
        for (acc, &c) in g.iter_mut().zip(contrib) {
            *acc += c;
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_op(&mut self, idx: usize, op: &Op, g: &[f64]) -> Result<()> {
        let name = op.name();
        match *op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (t, a) = (self.shape(x)[0], self.shape(x)[1]);
                let n = self.shape(w)[1];
                if self.needs(x) {
                    let wd = self.data(w);
                    let mut dx = vec![0.0; t * a];
                    for row in 0..t {
                        let gr = &g[row * n..(row + 1) * n];
                        for k in 0..a {
                            let wr = &wd[k * n..(k + 1) * n];
                            dx[row * a + k] = gr.iter().zip(wr).map(|(p, q)| p * q).sum();
                        }
                    }
                    self.accumulate(name, x, &dx)?;
                }
                if self.needs(w) {
                    let xd = self.data(x);
                    let mut dw = vec![0.0; a * n];
                    for row in 0..t {
                        let gr = &g[row * n..(row + 1) * n];
                        for k in 0..a {
                            let xv = xd[row * a + k];
                            if xv == 0.0 {
                                continue;
                            }
                            for (d, &gv) in dw[k * n..(k + 1) * n].iter_mut().zip(gr) {
                                *d += xv * gv;
                            }
                        }
                    }
                    self.accumulate(name, w, &dw)?;
                }
                if self.needs(b) {
                    let db = column_sums(g, t, n);
                    self.accumulate(name, b, &db)?;
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
            } => {
                let (t_len, a) = (self.shape(x)[0], self.shape(x)[1]);
                let (k_len, n) = (self.shape(kernel)[0], self.shape(kernel)[2]);
                if self.needs(x) {
                    let kd = self.data(kernel);
                    let mut dx = vec![0.0; t_len * a];
                    for t in 0..t_len {
                        let gr = &g[t * n..(t + 1) * n];
                        for k in 0..k_len {
                            let src = tap_index(t, k, k_len, dilation, t_len);
                            let kk = &kd[k * a * n..(k + 1) * a * n];
                            for ai in 0..a {
                                let wr = &kk[ai * n..(ai + 1) * n];
                                dx[src * a + ai] += gr.iter().zip(wr).map(|(p, q)| p * q).sum::<f64>();
                            }
                        }
                    }
                    self.accumulate(name, x, &dx)?;
                }
                if self.needs(kernel) {
                    let xd = self.data(x);
                    let mut dk = vec![0.0; k_len * a * n];
                    for t in 0..t_len {
                        let gr = &g[t * n..(t + 1) * n];
                        for k in 0..k_len {
                            let src = tap_index(t, k, k_len, dilation, t_len);
                            let xr = &xd[src * a..(src + 1) * a];
                            for (ai, &xv) in xr.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let off = (k * a + ai) * n;
                                for (d, &gv) in dk[off..off + n].iter_mut().zip(gr) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(name, kernel, &dk)?;
                }
                if self.needs(bias) {
                    let db = column_sums(g, t_len, n);
                    self.accumulate(name, bias, &db)?;
                }
            }
            Op::Relu(x) => {
                let d: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(name, x, &d)?;
            }
            Op::Softplus(x) => {
                let d: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * sigmoid(v))
                    .collect();
                self.accumulate(name, x, &d)?;
            }
            Op::LogSoftplus(x) => {
                let d: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * log_softplus_grad(v))
                    .collect();
                self.accumulate(name, x, &d)?;
            }
            Op::Ln(x) => {
                let d: Vec<f64> = self.data(x).iter().zip(g).map(|(&v, &gv)| gv / v).collect();
                self.accumulate(name, x, &d)?;
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|&gv| c * gv).collect();
                self.accumulate(name, x, &d)?;
            }
            Op::Reshape(x) => {
                self.accumulate(name, x, g)?;
            }
            Op::Square(x) => {
                let d: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| 2.0 * v * gv)
                    .collect();
                self.accumulate(name, x, &d)?;
            }
            Op::SqrtClamped { x, min } => {
                let out = self.nodes[idx].value.data();
                let d: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&v, &y), &gv)| if v > min { gv * 0.5 / y } else { 0.0 })
                    .collect();
                self.accumulate(name, x, &d)?;
            }
            Op::Add(a, b) => {
                self.accumulate(name, a, g)?;
                self.accumulate(name, b, g)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(name, a, g)?;
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(name, b, &neg)?;
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = self.data(b).iter().zip(g).map(|(y, gv)| y * gv).collect();
                let db: Vec<f64> = self.data(a).iter().zip(g).map(|(x, gv)| x * gv).collect();
                self.accumulate(name, a, &da)?;
                self.accumulate(name, b, &db)?;
            }
            Op::BroadcastCols { x } => {
                let width = self.nodes[idx].value.cols();
                let d: Vec<f64> = g.chunks(width).map(|c| c.iter().sum()).collect();
                self.accumulate(name, x, &d)?;
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(a).len();
                self.accumulate(name, a, &g[..split])?;
                self.accumulate(name, b, &g[split..])?;
            }
            Op::ConcatCols(a, b) => {
                let (r, m) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let mut da = Vec::with_capacity(r * m);
                let mut db = Vec::with_capacity(r * n);
                for row in g.chunks(m + n) {
                    da.extend_from_slice(&row[..m]);
                    db.extend_from_slice(&row[m..]);
                }
                self.accumulate(name, a, &da)?;
                self.accumulate(name, b, &db)?;
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                let y = self.nodes[idx].value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| y[at(k)] * g[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(name, x, &d)?;
            }
            Op::LogSumExp { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                let y = self.nodes[idx].value.data();
                let xd = self.data(x);
                let mut d = vec![0.0; xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for k in 0..len {
                            let at = (o * len + k) * inner + i;
                            d[at] = g[r] * (xd[at] - y[r]).exp();
                        }
                    }
                }
                self.accumulate(name, x, &d)?;
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                let factor = if matches!(op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            d[(o * len + k) * inner + i] = factor * g[o * inner + i];
                        }
                    }
                }
                self.accumulate(name, x, &d)?;
            }
            Op::CrossEntropy {
                logits,
                label,
                ref probs,
            } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[label] -= g[0];
                self.accumulate(name, logits, &d)?;
            }
        }
        Ok(())
    }
}

fn column_sums(g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

/// Source frame for output frame `t` and tap `k` under edge replication.
#[inline]
pub(crate) fn tap_index(t: usize, k: usize, k_len: usize, dilation: usize, t_len: usize) -> usize {
    let center = (k_len - 1) / 2;
    let offset = (k as isize - center as isize) * dilation as isize;
    (t as isize + offset).clamp(0, t_len as isize - 1) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[1.0, 2.0]])).unwrap();
        let eye = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let zero = tape.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let shift = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let mix = tape.constant(mat(&[&[1.0, 1.0], &[1.0, -1.0]])).unwrap();

        let y = tape.affine(x, eye, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
        let y = tape.affine(x, eye, shift).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);
        let y = tape.affine(x, mix, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[1.0, 2.0, 3.0]])).unwrap();
        let w = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.affine(x, w, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[1.0, -2.0], &[3.0, 4.0], &[0.5, 6.0]])).unwrap();
        let k = tape
            .constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y = tape.conv1d_dilated(x, k, 1, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_moving_average_with_edge_replication() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[1.0], &[2.0], &[3.0], &[4.0]])).unwrap();
        let k = tape
            .constant(Tensor::new(vec![3, 1, 1], vec![1.0 / 3.0; 3]).unwrap())
            .unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv1d_dilated(x, k, 1, b).unwrap();
        assert!(close(
            tape.value(y).data(),
            &[4.0 / 3.0, 2.0, 3.0, 11.0 / 3.0],
            1e-12
        ));
    }

    #[test]
    fn conv_dilated_taps_shift_impulse() {
        let mut tape = Tape::new();
        let x = tape
            .constant(mat(&[&[0.0], &[0.0], &[1.0], &[0.0], &[0.0]]))
            .unwrap();
        let k = tape
            .constant(Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv1d_dilated(x, k, 2, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_rejects_empty_sequence() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 1])).unwrap();
        let k = tape.constant(Tensor::zeros(&[3, 1, 1])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(
            tape.conv1d_dilated(x, k, 1, b),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let y = tape.activation(x, Activation::Relu).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let x = tape.constant(Tensor::vector(vec![0.0, 30.0, 800.0, -800.0])).unwrap();
        let y = tape.activation(x, Activation::Softplus).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v[1] - 30.0).abs() < 1e-9);
        assert_eq!(v[2], 800.0);
        assert!(v[3] >= 0.0 && v[3] < 1e-300);
    }

    #[test]
    fn log_softplus_is_finite_and_matches_finite_differences() {
        let points = [-900.0, -40.0, -30.5, -29.5, -3.0, 0.0, 2.0, 50.0];
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(points.to_vec())).unwrap();
        let y = tape.log_softplus(x).unwrap();
        let loss = tape.sum_axis(y, 0).unwrap();
        tape.backward(loss).unwrap();
        let v = tape.value(y).data().to_vec();
        let g = tape.grad(x).unwrap().to_vec();
        assert!((v[0] + 900.0).abs() < 1e-12);
        assert!((v[5] - std::f64::consts::LN_2.ln()).abs() < 1e-15);
        for (i, &a) in points.iter().enumerate().skip(1) {
            let h = 1e-5;
            let fd = (log_softplus(a + h) - log_softplus(a - h)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-7, "at {a}: {} vs {fd}", g[i]);
        }
        // both branches agree at the switch
        let direct = softplus(LOG_SOFTPLUS_TAIL).ln();
        assert!((direct - log_softplus(LOG_SOFTPLUS_TAIL - 1e-12)).abs() < 1e-10);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.7; 4])).unwrap();
        let y = tape.softmax_axis(x, 0).unwrap();
        assert!(close(tape.value(y).data(), &[0.25; 4], 1e-15));

        let x = tape.constant(Tensor::vector(vec![0.0, 2f64.ln()])).unwrap();
        let y = tape.softmax_axis(x, 0).unwrap();
        assert!(close(tape.value(y).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));

        let base = mat(&[&[1.0, -3.0], &[2.5, 0.0], &[-7.0, 4.0]]);
        let shifted = Tensor::new(
            vec![3, 2],
            base.data().iter().map(|v| v + 123.456).collect(),
        )
        .unwrap();
        let a = tape.constant(base).unwrap();
        let b = tape.constant(shifted).unwrap();
        let ya = tape.softmax_axis(a, 0).unwrap();
        let yb = tape.softmax_axis(b, 0).unwrap();
        assert!(close(tape.value(ya).data(), tape.value(yb).data(), 1e-12));
        let col0: f64 = (0..3).map(|r| tape.value(ya).get2(r, 0)).sum();
        assert!((col0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(tape.softmax_axis(x, 2).is_err());
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        // loss = Σ (x·W)  ⇒  ∂loss/∂W[a,b] = Σ_t x[t,a]
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[1.0, 2.0], &[3.0, -1.0]])).unwrap();
        let w = tape.variable(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.variable(Tensor::zeros(&[3])).unwrap();
        let unused = tape.variable(Tensor::vector(vec![5.0])).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        let rows = tape.sum_axis(y, 0).unwrap();
        let loss = tape.sum_axis(rows, 1).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 4.0, 4.0, 1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(unused).unwrap_or(&[0.0]), &[0.0]);
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0])).unwrap();
        assert!(matches!(tape.ln(x), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn non_finite_gradient_names_op() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1e-300])).unwrap();
        let y = tape.ln(x).unwrap();
        let y = tape.scale(y, 1e300).unwrap();
        let loss = tape.sum_axis(y, 0).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { op: "ln" }), "{err}");
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::zeros(&[1, 5])).unwrap();
        let loss = tape.cross_entropy(z, 3).unwrap();
        assert!((tape.value(loss).data()[0] - 5f64.ln()).abs() < 1e-15);
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        assert!((g[3] + 0.8).abs() < 1e-15);
        assert!((g[0] - 0.2).abs() < 1e-15);
    }
}
