use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::{AutodiffError, Tensor};

type NodeId = usize;

/// Key lists per query row: `visible[i]` holds the ascending key indices row `i` may attend to.
pub type Visibility = Rc<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    StopGradient,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    DivScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Gather {
        table: NodeId,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        visible: Visibility,
        offsets: Vec<usize>,
        probs: Vec<f64>,
    },
    LogSoftmax(NodeId),
    Softmax(NodeId),
    Pick {
        x: NodeId,
        idx: Vec<usize>,
    },
    Sum(NodeId),
    Stack(Vec<NodeId>),
    LogSumExp(NodeId),
    LogSigmoid(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in evaluation order, so node ids are already a
/// topological order and the backward sweep simply walks ids in reverse.
/// A tape is built fresh for every training step and dropped afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when no gradient reached it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a constant input; it never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable input.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Concatenates scalars into a vector.
    pub fn stack<'t>(&'t self, items: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        if items.is_empty() {
            return Err(AutodiffError::Empty("stack"));
        }
        let mut data = Vec::with_capacity(items.len());
        {
            let nodes = self.nodes.borrow();
            for v in items {
                let t = &nodes[v.id].value;
                if !t.is_scalar() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "stack",
                        lhs: t.shape().to_vec(),
                        rhs: vec![],
                    });
                }
                data.push(t.data()[0]);
            }
        }
        let ids: Vec<NodeId> = items.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(Tensor::vector(data), Op::Stack(ids), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutodiffError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_raw(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |s| add_into(s, g));
            accumulate(grads, nodes, *b, |s| add_into(s, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |s| add_into(s, g));
            accumulate(grads, nodes, *b, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, |s| add_into(s, g));
            let m = nodes[*b].value.len();
            accumulate(grads, nodes, *b, |s| {
                for row in g.chunks(m) {
                    add_into(s, row);
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)
            });
        }
        Op::DivScalar(a, c) => {
            accumulate(grads, nodes, *a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g / c)
            });
        }
        Op::MatMul(a, b) => {
            let at = &nodes[*a].value;
            let bt = &nodes[*b].value;
            let (n, k) = (at.rows(), at.cols());
            let m = bt.cols();
            let av = at.data();
            let bv = bt.data();
            accumulate(grads, nodes, *a, |s| {
                for i in 0..n {
                    let gi = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let bp = &bv[p * m..(p + 1) * m];
                        s[i * k + p] += dot(gi, bp);
                    }
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for i in 0..n {
                    let gi = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip != 0.0 {
                            axpy(&mut s[p * m..(p + 1) * m], aip, gi);
                        }
                    }
                }
            });
        }
        Op::Gather { table, rows } => {
            let d = nodes[*table].value.cols();
            accumulate(grads, nodes, *table, |s| {
                for (r, &src) in rows.iter().enumerate() {
                    add_into(&mut s[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[*gain].value.len();
            let gv = nodes[*gain].value.data();
            accumulate(grads, nodes, *gain, |s| {
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        s[j] += gr[j] * xr[j];
                    }
                }
            });
            accumulate(grads, nodes, *bias, |s| {
                for gr in g.chunks(d) {
                    add_into(s, gr);
                }
            });
            accumulate(grads, nodes, *x, |s| {
                let mut dxhat = vec![0.0; d];
                for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xr[j];
                    }
                    mean_d /= d as f64;
                    mean_dx /= d as f64;
                    let sr = &mut s[r * d..(r + 1) * d];
                    for j in 0..d {
                        sr[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * gelu_grad(av[i]);
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            visible,
            offsets,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *heads, visible, offsets, probs),
        Op::LogSoftmax(a) => {
            let c = nodes[*a].value.cols();
            accumulate(grads, nodes, *a, |s| {
                for ((sr, gr), yr) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        sr[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let c = nodes[*a].value.cols();
            accumulate(grads, nodes, *a, |s| {
                for ((sr, gr), yr) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let inner = dot(gr, yr);
                    for j in 0..c {
                        sr[j] += yr[j] * (gr[j] - inner);
                    }
                }
            });
        }
        Op::Pick { x, idx } => {
            accumulate(grads, nodes, *x, |s| {
                for (t, &i) in idx.iter().enumerate() {
                    s[i] += g[t];
                }
            });
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, *a, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::Stack(ids) => {
            for (t, &i) in ids.iter().enumerate() {
                accumulate(grads, nodes, i, |s| s[0] += g[t]);
            }
        }
        Op::LogSumExp(a) => {
            let av = nodes[*a].value.data();
            let lse = out[0];
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[0] * (av[i] - lse).exp();
                }
            });
        }
        Op::LogSigmoid(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * sigmoid(-av[i]);
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (NodeId, NodeId, NodeId),
    heads: usize,
    visible: &[Vec<usize>],
    offsets: &[usize],
    probs: &[f64],
) {
    let qt = &nodes[q].value;
    let n = qt.rows();
    let d = qt.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qv = qt.data();
    let kv = nodes[k].value.data();
    let vv = nodes[v].value.data();
    let total = *offsets.last().unwrap_or(&0);

    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dscore = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let keys = &visible[i];
            let p = &probs[h * total + offsets[i]..h * total + offsets[i + 1]];
            let gi = &g[i * d + cols.start..i * d + cols.end];
            dscore.clear();
            let mut inner = 0.0;
            for (jj, &j) in keys.iter().enumerate() {
                let vj = &vv[j * d + cols.start..j * d + cols.end];
                let dp = dot(gi, vj);
                dscore.push(dp);
                inner += p[jj] * dp;
                axpy(&mut dv[j * d + cols.start..j * d + cols.end], p[jj], gi);
            }
            for (jj, &j) in keys.iter().enumerate() {
                let ds = p[jj] * (dscore[jj] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &kv[j * d + cols.start..j * d + cols.end];
                axpy(&mut dq[i * d + cols.start..i * d + cols.end], ds, kj);
                let qi = &qv[i * d + cols.start..i * d + cols.end];
                axpy(&mut dk[j * d + cols.start..j * d + cols.end], ds, qi);
            }
        }
    }
    accumulate(grads, nodes, q, |s| add_into(s, &dq));
    accumulate(grads, nodes, k, |s| add_into(s, &dk));
    accumulate(grads, nodes, v, |s| add_into(s, &dv));
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline]
fn add_into(s: &mut [f64], g: &[f64]) {
    for (s, g) in s.iter_mut().zip(g) {
        *s += g;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let oi = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(oi, aip, &b[p * m..(p + 1) * m]);
            }
        }
    }
}

pub(crate) fn log_softmax_row(row: &mut [f64]) {
    let lse = logsumexp(row);
    row.iter_mut().for_each(|x| *x -= lse);
}

/// Forward pass of ragged multi-head attention. Returns the output and, per
/// head, the flattened probabilities for every visible (query, key) pair.
pub(crate) fn attention_forward(
    qv: &[f64],
    kv: &[f64],
    vv: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    visible: &[Vec<usize>],
    offsets: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let total = *offsets.last().unwrap_or(&0);
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * total];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = &qv[i * d + cols.start..i * d + cols.end];
            let p = &mut probs[h * total + offsets[i]..h * total + offsets[i + 1]];
            let mut m = f64::NEG_INFINITY;
            for (jj, &j) in visible[i].iter().enumerate() {
                let s = dot(qi, &kv[j * d + cols.start..j * d + cols.end]) * scale;
                p[jj] = s;
                m = m.max(s);
            }
            let mut z = 0.0;
            for s in p.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            let oi = &mut out[i * d + cols.start..i * d + cols.end];
            for (jj, &j) in visible[i].iter().enumerate() {
                p[jj] /= z;
                axpy(oi, p[jj], &vv[j * d + cols.start..j * d + cols.end]);
            }
        }
    }
    (out, probs)
}

pub(crate) fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Owned copy of the forward value, detached from the tape.
    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_shape(&self, other: Var<'t>, op: &'static str) -> Result<(), AutodiffError> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(AutodiffError::ShapeMismatch { op, lhs: a, rhs: b });
        }
        Ok(())
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor::from_raw(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, AutodiffError> {
        self.same_shape(other, name)?;
        let value = {
            let a = self.value();
            let b = other.value();
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_raw(a.shape().to_vec(), data)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (a, b) = (self.shape(), row.shape());
        let m = b.iter().product::<usize>();
        if self.value().cols() != m || b.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: a,
                rhs: b,
            });
        }
        let value = {
            let x = self.value();
            let r = row.value();
            let mut data = x.data().to_vec();
            for chunk in data.chunks_mut(m) {
                add_into(chunk, r.data());
            }
            Tensor::from_raw(a, data)
        };
        let rg = self.tape.requires(&[self.id, row.id]);
        Ok(self.tape.push(value, Op::AddRow(self.id, row.id), rg))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Division by a constant; kept separate from `scale` so that `x / n` is
    /// exactly the IEEE quotient.
    pub fn div_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|x| x / c, Op::DivScalar(self.id, c))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a,
                rhs: b,
            });
        }
        let (n, k, m) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(self.value().data(), other.value().data(), &mut out, n, k, m);
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self
            .tape
            .push(Tensor::from_raw(vec![n, m], out), Op::MatMul(self.id, other.id), rg))
    }

    /// Selects rows of a `[V, d]` table (embedding lookup).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (v, d) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        {
            let t = self.value();
            for &r in rows {
                if r >= v {
                    return Err(AutodiffError::IndexOutOfRange { index: r, len: v });
                }
                data.extend_from_slice(t.row(r));
            }
        }
        if rows.is_empty() {
            return Err(AutodiffError::Empty("gather_rows"));
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_raw(vec![rows.len(), d], data),
            Op::Gather {
                table: self.id,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let d = self.value().cols();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(),
                rhs: gain.shape(),
            });
        }
        let (y, xhat, rstd) =
            layer_norm_forward(self.value().data(), gain.value().data(), bias.value().data(), d);
        let rg = self.tape.requires(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            Tensor::from_raw(self.shape(), y),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(gelu, Op::Gelu(self.id))
    }

    /// Multi-head scaled dot-product attention where query row `i` attends
    /// only to the key rows listed in `visible[i]`.
    pub fn attention(
        &self,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
        visible: Visibility,
    ) -> Result<Var<'t>, AutodiffError> {
        let shape = self.shape();
        if shape.len() != 2 || k.shape() != shape || v.shape() != shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "attention",
                lhs: shape,
                rhs: k.shape(),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(AutodiffError::InvalidShape(vec![d, heads]));
        }
        if visible.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "attention.visible",
                lhs: vec![n],
                rhs: vec![visible.len()],
            });
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for (i, keys) in visible.iter().enumerate() {
            if keys.is_empty() {
                return Err(AutodiffError::Empty("attention row"));
            }
            if let Some(&bad) = keys.iter().find(|&&j| j >= n) {
                return Err(AutodiffError::IndexOutOfRange { index: bad, len: n });
            }
            offsets.push(offsets[i] + keys.len());
        }
        let (out, probs) = attention_forward(
            self.value().data(),
            k.value().data(),
            v.value().data(),
            n,
            d,
            heads,
            &visible,
            &offsets,
        );
        let rg = self.tape.requires(&[self.id, k.id, v.id]);
        Ok(self.tape.push(
            Tensor::from_raw(shape, out),
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                visible,
                offsets,
                probs,
            },
            rg,
        ))
    }

    /// Row-wise log-softmax (max-subtracted).
    pub fn log_softmax(&self) -> Var<'t> {
        let value = {
            let x = self.value();
            let c = x.cols();
            let mut data = x.data().to_vec();
            data.chunks_mut(c).for_each(log_softmax_row);
            Tensor::from_raw(x.shape().to_vec(), data)
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::LogSoftmax(self.id), rg)
    }

    /// Row-wise softmax (max-subtracted).
    pub fn softmax(&self) -> Var<'t> {
        let value = {
            let x = self.value();
            let c = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            Tensor::from_raw(x.shape().to_vec(), data)
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::Softmax(self.id), rg)
    }

    /// Picks elements by flat index into a vector.
    pub fn pick(&self, idx: &[usize]) -> Result<Var<'t>, AutodiffError> {
        if idx.is_empty() {
            return Err(AutodiffError::Empty("pick"));
        }
        let data = {
            let x = self.value();
            let mut data = Vec::with_capacity(idx.len());
            for &i in idx {
                if i >= x.len() {
                    return Err(AutodiffError::IndexOutOfRange { index: i, len: x.len() });
                }
                data.push(x.data()[i]);
            }
            data
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::vector(data),
            Op::Pick {
                x: self.id,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `(row, col)` entries of a matrix.
    pub fn pick2(&self, entries: &[(usize, usize)]) -> Result<Var<'t>, AutodiffError> {
        let (rows, cols) = {
            let x = self.value();
            (x.rows(), x.cols())
        };
        let mut idx = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= rows || c >= cols {
                return Err(AutodiffError::IndexOutOfRange {
                    index: r * cols + c,
                    len: rows * cols,
                });
            }
            idx.push(r * cols + c);
        }
        self.pick(&idx)
    }

    /// Sums every element, accumulating left to right.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().fold(0.0, |acc, x| acc + x);
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    /// `log Σ exp(x)` over all elements, max-subtracted.
    pub fn logsumexp(&self) -> Var<'t> {
        let s = logsumexp(self.value().data());
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::LogSumExp(self.id), rg)
    }

    pub fn log_sigmoid(&self) -> Var<'t> {
        self.unary(log_sigmoid, Op::LogSigmoid(self.id))
    }

    /// Value-identical copy through which no gradient flows.
    pub fn stop_gradient(&self) -> Var<'t> {
        let value = self.to_tensor();
        self.tape.push(value, Op::StopGradient, false)
    }

    pub fn backward(&self) -> Result<Gradients, AutodiffError> {
        self.tape.backward(*self)
    }
}
