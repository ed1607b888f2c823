//! Dense f64 tensors with reverse-mode differentiation on a Wengert tape.
//!
//! The primitive set is deliberately small: exactly what multilayer
//! perceptrons and the training objectives need. Operations are recorded
//! in topological order on a [`Tape`]; [`Tape::backward`] replays them in
//! reverse exactly once. Values are validated finite after every
//! completed operation.

use crate::error::{Error, Result};

/// Inputs to `log` are clamped below at this value, so a zero probability
/// contributes a large finite penalty instead of -inf.
pub const LOG_CLAMP: f64 = 1e-12;

/// Dense row-major tensor. Immutable after construction; gradients are
/// written by the tape during the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// 2-D constructor from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::Contract("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extent of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// Handle into a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    RowSum { a: NodeId },
    SelectRows { a: NodeId, rows: Vec<usize> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Recorded forward pass. Confined to one training thread; a fresh tape
/// is built per optimization step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// Row-wise softmax kernels, shared with the loss module so that teacher
// distributions computed off-tape are bit-identical to on-tape results.

/// Softmax of each length-`k` row, with max subtraction.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    assert!(k >= 1 && data.len().is_multiple_of(k));
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    out
}

/// Log-softmax of each length-`k` row, with max subtraction.
pub fn log_softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    assert!(k >= 1 && data.len().is_multiple_of(k));
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &x in row {
            z += (x - m).exp();
        }
        let lz = z.ln();
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = x - m - lz;
        }
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn require_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].tensor
    }

    /// Gradient of the most recent backward target w.r.t. node `id`, if
    /// the node requires grad and a backward pass has run.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].tensor.grad.as_deref()
    }

    /// Insert an input tensor. `requires_grad` marks it as a
    /// differentiation target.
    pub fn leaf(&mut self, mut tensor: Tensor, requires_grad: bool) -> NodeId {
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Insert a non-differentiated input.
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor, false)
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { tensor, op });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].tensor.requires_grad
    }

    fn record(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
        name: &'static str,
    ) -> Result<NodeId> {
        check_finite(&data, name)?;
        let t = Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        };
        Ok(self.push(t, op))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = require_2d(self.value(a), "matmul")?;
        let (kb, n) = require_2d(self.value(b), "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let av = &self.nodes[a].tensor.data;
        let bv = &self.nodes[b].tensor.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..ka {
                let x = av[i * ka + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += x * bb;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.record(vec![m, n], out, rg, Op::Matmul { a, b }, "matmul")
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .tensor
            .data
            .iter()
            .zip(&self.nodes[b].tensor.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.requires(a) || self.requires(b);
        self.record(shape, out, rg, op, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, Op::Add { a, b }, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, Op::Sub { a, b }, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, Op::Mul { a, b }, "mul", |x, y| x * y)
    }

    fn unary(
        &mut self,
        a: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[a].tensor.data.iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.requires(a);
        self.record(shape, out, rg, op, name)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, Op::Scale { a, c }, "scale", |x| x * c)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, Op::AddScalar { a }, "add_scalar", |x| x + c)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp { a }, "exp", f64::exp)
    }

    /// Natural log with the input clamped below at [`LOG_CLAMP`].
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log { a }, "log", |x| x.max(LOG_CLAMP).ln())
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu { a }, "relu", |x| x.max(0.0))
    }

    /// Tanh-approximate GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Gelu { a }, "gelu", gelu_scalar)
    }

    /// Broadcast-add a length-n bias to each row of an m x n tensor.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = require_2d(self.value(a), "add_row")?;
        if self.value(bias).shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(bias).shape.clone(),
            });
        }
        let av = &self.nodes[a].tensor.data;
        let bv = &self.nodes[bias].tensor.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n + j] + bv[j];
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        self.record(vec![m, n], out, rg, Op::AddRow { a, bias }, "add_row")
    }

    /// Row-wise softmax over the last axis of an m x n tensor.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = require_2d(self.value(a), "softmax")?;
        let out = softmax_rows(&self.nodes[a].tensor.data, n);
        let rg = self.requires(a);
        self.record(vec![m, n], out, rg, Op::Softmax { a }, "softmax")
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = require_2d(self.value(a), "log_softmax")?;
        let out = log_softmax_rows(&self.nodes[a].tensor.data, n);
        let rg = self.requires(a);
        self.record(vec![m, n], out, rg, Op::LogSoftmax { a }, "log_softmax")
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a].tensor.data.iter().sum();
        let rg = self.requires(a);
        self.record(vec![1], vec![s], rg, Op::Sum { a }, "sum")
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s: f64 = self.nodes[a].tensor.data.iter().sum();
        let rg = self.requires(a);
        self.record(vec![1], vec![s / n as f64], rg, Op::Mean { a }, "mean")
    }

    /// Sum over the last axis of an m x n tensor, yielding m x 1.
    pub fn rowsum(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = require_2d(self.value(a), "rowsum")?;
        let out: Vec<f64> = self.nodes[a]
            .tensor
            .data
            .chunks(n)
            .map(|row| row.iter().sum())
            .collect();
        let rg = self.requires(a);
        self.record(vec![m, 1], out, rg, Op::RowSum { a }, "rowsum")
    }

    /// Gather the given rows of an m x n tensor.
    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, n) = require_2d(self.value(a), "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Contract(format!(
                "select_rows index {bad} out of range for {m} rows"
            )));
        }
        let av = &self.nodes[a].tensor.data;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&av[r * n..(r + 1) * n]);
        }
        let rg = self.requires(a);
        self.record(
            vec![rows.len(), n],
            out,
            rg,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            "select_rows",
        )
    }

    /// Reverse pass from a scalar output. Populates `grad` on every
    /// requires-grad node reachable from it; repeated calls accumulate.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(output).shape
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        grads[output] = Some(vec![1.0]);

        for id in (0..=output).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[id].tensor.requires_grad {
                let acc = self.nodes[id]
                    .tensor
                    .grad
                    .get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, &v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a].tensor.shape[0], self.nodes[a].tensor.shape[1]);
                    let n = self.nodes[b].tensor.shape[1];
                    if self.requires(a) {
                        // dA = dC . B^T
                        let bv = self.nodes[b].tensor.data.clone();
                        let da = grads[a].get_or_insert_with(|| vec![0.0; m * k]);
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    }
                    if self.requires(b) {
                        // dB = A^T . dC
                        let av = self.nodes[a].tensor.data.clone();
                        let db = grads[b].get_or_insert_with(|| vec![0.0; k * n]);
                        for p in 0..k {
                            for i in 0..m {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += x * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, a, &g, |_, gv| gv);
                    self.accumulate(&mut grads, b, &g, |_, gv| gv);
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut grads, a, &g, |_, gv| gv);
                    self.accumulate(&mut grads, b, &g, |_, gv| -gv);
                }
                Op::Mul { a, b } => {
                    if self.requires(a) {
                        let bv = self.nodes[b].tensor.data.clone();
                        self.accumulate_idx(&mut grads, a, &g, |i, gv| gv * bv[i]);
                    }
                    if self.requires(b) {
                        let av = self.nodes[a].tensor.data.clone();
                        self.accumulate_idx(&mut grads, b, &g, |i, gv| gv * av[i]);
                    }
                }
                Op::Scale { a, c } => {
                    self.accumulate(&mut grads, a, &g, move |_, gv| gv * c);
                }
                Op::AddScalar { a } => {
                    self.accumulate(&mut grads, a, &g, |_, gv| gv);
                }
                Op::Exp { a } => {
                    let outv = self.nodes[id].tensor.data.clone();
                    self.accumulate_idx(&mut grads, a, &g, |i, gv| gv * outv[i]);
                }
                Op::Log { a } => {
                    let inv = self.nodes[a].tensor.data.clone();
                    self.accumulate_idx(&mut grads, a, &g, |i, gv| gv / inv[i].max(LOG_CLAMP));
                }
                Op::Relu { a } => {
                    let inv = self.nodes[a].tensor.data.clone();
                    self.accumulate_idx(
                        &mut grads,
                        a,
                        &g,
                        |i, gv| if inv[i] > 0.0 { gv } else { 0.0 },
                    );
                }
                Op::Gelu { a } => {
                    let inv = self.nodes[a].tensor.data.clone();
                    self.accumulate_idx(&mut grads, a, &g, |i, gv| gv * gelu_grad_scalar(inv[i]));
                }
                Op::AddRow { a, bias } => {
                    let n = self.nodes[id].tensor.shape[1];
                    self.accumulate(&mut grads, a, &g, |_, gv| gv);
                    if self.requires(bias) {
                        let db = grads[bias].get_or_insert_with(|| vec![0.0; n]);
                        for (j, gv) in g.iter().enumerate() {
                            db[j % n] += gv;
                        }
                    }
                }
                Op::Softmax { a } => {
                    if self.requires(a) {
                        // dX = p .* (g - rowsum(g .* p))
                        let n = self.nodes[id].tensor.shape[1];
                        let p = self.nodes[id].tensor.data.clone();
                        let da = grads[a].get_or_insert_with(|| vec![0.0; p.len()]);
                        for r in 0..p.len() / n {
                            let base = r * n;
                            let dot: f64 =
                                (0..n).map(|j| g[base + j] * p[base + j]).sum();
                            for j in 0..n {
                                da[base + j] += p[base + j] * (g[base + j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax { a } => {
                    if self.requires(a) {
                        // dX = g - p .* rowsum(g)
                        let n = self.nodes[id].tensor.shape[1];
                        let lp = &self.nodes[id].tensor.data;
                        let p: Vec<f64> = lp.iter().map(|&v| v.exp()).collect();
                        let da = grads[a].get_or_insert_with(|| vec![0.0; p.len()]);
                        for r in 0..p.len() / n {
                            let base = r * n;
                            let rs: f64 = (0..n).map(|j| g[base + j]).sum();
                            for j in 0..n {
                                da[base + j] += g[base + j] - p[base + j] * rs;
                            }
                        }
                    }
                }
                Op::Sum { a } => {
                    let gv = g[0];
                    self.accumulate_fill(&mut grads, a, gv);
                }
                Op::Mean { a } => {
                    let n = self.nodes[a].tensor.numel();
                    let gv = g[0] / n as f64;
                    self.accumulate_fill(&mut grads, a, gv);
                }
                Op::RowSum { a } => {
                    if self.requires(a) {
                        let n = self.nodes[a].tensor.shape[1];
                        let len = self.nodes[a].tensor.numel();
                        let da = grads[a].get_or_insert_with(|| vec![0.0; len]);
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += g[i / n];
                        }
                    }
                }
                Op::SelectRows { a, rows } => {
                    if self.requires(a) {
                        let n = self.nodes[a].tensor.shape[1];
                        let len = self.nodes[a].tensor.numel();
                        let da = grads[a].get_or_insert_with(|| vec![0.0; len]);
                        for (k, &r) in rows.iter().enumerate() {
                            for j in 0..n {
                                da[r * n + j] += g[k * n + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        self.accumulate_idx(grads, target, g, f)
    }

    fn accumulate_idx(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.requires(target) {
            return;
        }
        let len = self.nodes[target].tensor.numel();
        let buf = grads[target].get_or_insert_with(|| vec![0.0; len]);
        for (i, &gv) in g.iter().enumerate() {
            buf[i] += f(i, gv);
        }
    }

    fn accumulate_fill(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, gv: f64) {
        if !self.requires(target) {
            return;
        }
        let len = self.nodes[target].tensor.numel();
        let buf = grads[target].get_or_insert_with(|| vec![0.0; len]);
        for b in buf.iter_mut() {
            *b += gv;
        }
    }
}

/// Central finite-difference verification of tape gradients.
///
/// Runs `f` once with tracked leaves to collect analytic gradients, then
/// perturbs every input coordinate by +/- `eps` and compares. Returns the
/// max over all coordinates of |analytic - numeric| / max(1, |numeric|).
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    assert!(eps > 0.0);
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let out = f(&mut tape, &ids)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(
            "finite_diff_check requires a scalar-valued function".into(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = f(&mut t, &ids)?;
        Ok(t.value(out).data[0])
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data[ci];
            work[ti].data[ci] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data[ci] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].get(ci).copied().unwrap_or(0.0);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let b = tape.constant(
            Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap(),
        );
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c).data, vec![1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn matmul_hand_checked() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![5., 6.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![17., 39.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // grad of sum(A x B) w.r.t. A is ones x B^T
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, vec![4, 2], -2.0, 2.0);
        let err = finite_diff_check(
            |t, ids| {
                let c = t.matmul(ids[0], ids[1])?;
                t.sum(c)
            },
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");

        // and the closed form
        let mut tape = Tape::new();
        let ia = tape.leaf(a, true);
        let ib = tape.leaf(b.clone(), false);
        let c = tape.matmul(ia, ib).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        let ga = tape.grad(ia).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let expect: f64 = (0..2).map(|j| b.data[p * 2 + j]).sum();
                assert!((ga[i * 4 + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_and_exp_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![-1., 0., 2.]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data, vec![0., 0., 2.]);
        let z = tape.constant(Tensor::new(vec![1, 2], vec![0., 0.]).unwrap());
        let e = tape.exp(z).unwrap();
        assert_eq!(tape.value(e).data, vec![1., 1.]);
    }

    #[test]
    fn exp_overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1], vec![1e9]).unwrap());
        let err = tape.exp(x).unwrap_err();
        assert!(err.to_string().contains("exp"));
    }

    #[test]
    fn exp_gradient_is_exp() {
        let x = Tensor::new(vec![1, 2], vec![0.1, -0.3]).unwrap();
        let err = finite_diff_check(
            |t, ids| {
                let e = t.exp(ids[0])?;
                t.sum(e)
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);

        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone(), true);
        let e = tape.exp(ix).unwrap();
        let s = tape.sum(e).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(ix).unwrap();
        for (gv, xv) in g.iter().zip(&x.data) {
            assert!((gv - xv.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0., 0., 0.]).unwrap());
        let p = tape.softmax(x).unwrap();
        for v in &tape.value(p).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = rng.gen_range(-100.0..100.0);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let p1 = softmax_rows(&z, 4);
            let p2 = softmax_rows(&shifted, 4);
            for (a, b) in p1.iter().zip(&p2) {
                assert!((a - b).abs() < 1e-12);
            }
            let s: f64 = p1.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        let p = softmax_rows(&[1.0, 2.0, 3.0], 3);
        // direct exp/sum at 64-bit
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(e.iter().map(|v| v / z)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![5., -2., 9.]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn backward_elementwise_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1., 2.]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 4.]);
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![3., 4.]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 2.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn finite_diff_linear_is_exact() {
        let x = Tensor::new(vec![1, 4], vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let err = finite_diff_check(
            |t, ids| {
                let y = t.scale(ids[0], 3.5)?;
                t.sum(y)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "linear fd error {err}");
    }

    #[test]
    fn finite_diff_constant_function() {
        let x = Tensor::new(vec![1, 3], vec![1., 2., 3.]).unwrap();
        let err = finite_diff_check(
            |t, ids| {
                let z = t.scale(ids[0], 0.0)?;
                t.sum(z)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
        let target = {
            let mut t = Tensor::zeros(vec![3, 4]);
            t.data[0] = 1.0;
            t.data[4 + 2] = 1.0;
            t.data[8 + 3] = 1.0;
            t
        };
        let err = finite_diff_check(
            |t, ids| {
                let lp = t.log_softmax(ids[0])?;
                let tt = t.constant(target.clone());
                let prod = t.mul(lp, tt)?;
                let s = t.sum(prod)?;
                t.scale(s, -1.0 / 3.0)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "softmax-ce fd error {err}");
    }

    #[test]
    fn per_primitive_gradients_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..20 {
            let x = rand_tensor(&mut rng, vec![2, 3], -2.0, 2.0);
            // keep relu inputs away from the kink
            let x_off = Tensor::new(
                x.shape.clone(),
                x.data
                    .iter()
                    .map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v })
                    .collect(),
            )
            .unwrap();
            let pos = Tensor::new(
                x.shape.clone(),
                x.data.iter().map(|v| v.abs() + 0.1).collect(),
            )
            .unwrap();
            let y = rand_tensor(&mut rng, vec![2, 3], -2.0, 2.0);
            let bias = rand_tensor(&mut rng, vec![3], -1.0, 1.0);

            let cases: Vec<(&str, f64)> = vec![
                (
                    "add",
                    finite_diff_check(
                        |t, ids| {
                            let z = t.add(ids[0], ids[1])?;
                            t.sum(z)
                        },
                        &[x.clone(), y.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "sub",
                    finite_diff_check(
                        |t, ids| {
                            let z = t.sub(ids[0], ids[1])?;
                            t.sum(z)
                        },
                        &[x.clone(), y.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "mul",
                    finite_diff_check(
                        |t, ids| {
                            let z = t.mul(ids[0], ids[1])?;
                            t.sum(z)
                        },
                        &[x.clone(), y.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "relu",
                    finite_diff_check(
                        |t, ids| {
                            let z = t.relu(ids[0])?;
                            t.sum(z)
                        },
                        std::slice::from_ref(&x_off),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "gelu",
                    finite_diff_check(
                        |t, ids| {
                            let z = t.gelu(ids[0])?;
                            t.sum(z)
                        },
                        std::slice::from_ref(&x),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "log",
                    finite_diff_check(
                        |t, ids| {
                            let z = t.log(ids[0])?;
                            t.sum(z)
                        },
                        std::slice::from_ref(&pos),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "softmax",
                    finite_diff_check(
                        |t, ids| {
                            let p = t.softmax(ids[0])?;
                            let sq = t.mul(p, p)?;
                            t.sum(sq)
                        },
                        std::slice::from_ref(&x),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "log_softmax",
                    finite_diff_check(
                        |t, ids| {
                            let lp = t.log_softmax(ids[0])?;
                            let c = t.constant(y.clone());
                            let z = t.mul(lp, c)?;
                            t.sum(z)
                        },
                        std::slice::from_ref(&x),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "add_row",
                    finite_diff_check(
                        |t, ids| {
                            let z = t.add_row(ids[0], ids[1])?;
                            let sq = t.mul(z, z)?;
                            t.sum(sq)
                        },
                        &[x.clone(), bias.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "rowsum",
                    finite_diff_check(
                        |t, ids| {
                            let r = t.rowsum(ids[0])?;
                            let sq = t.mul(r, r)?;
                            t.sum(sq)
                        },
                        std::slice::from_ref(&x),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "select_rows",
                    finite_diff_check(
                        |t, ids| {
                            let sel = t.select_rows(ids[0], &[1, 0, 1])?;
                            let sq = t.mul(sel, sel)?;
                            t.sum(sq)
                        },
                        std::slice::from_ref(&x),
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "mean",
                    finite_diff_check(
                        |t, ids| {
                            let sq = t.mul(ids[0], ids[0])?;
                            t.mean(sq)
                        },
                        std::slice::from_ref(&x),
                        1e-5,
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in cases {
                assert!(err < 1e-4, "trial {trial}: {name} fd error {err}");
            }
        }
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = rand_tensor(&mut rng, vec![4, 5], -1.0, 1.0);
            let w = rand_tensor(&mut rng, vec![5, 3], -1.0, 1.0);
            let mut tape = Tape::new();
            let ix = tape.leaf(x, false);
            let iw = tape.leaf(w, true);
            let h = tape.matmul(ix, iw).unwrap();
            let r = tape.gelu(h).unwrap();
            let p = tape.log_softmax(r).unwrap();
            let s = tape.sum(p).unwrap();
            tape.backward(s).unwrap();
            (
                tape.value(s).data.clone(),
                tape.grad(iw).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
