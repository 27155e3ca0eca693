use super::kernels::{broadcast_index, gemm_acc, gemm_nt_acc, gemm_tn_acc, Broadcast};
use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
}

/// `tanh` through a single `exp`; agrees with `f64::tanh` to a few ulps
/// away from zero and in absolute terms near it.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + fast_tanh(u))
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = fast_tanh(u);
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// How a normalization op obtains its statistics.
#[derive(Clone, Debug, PartialEq)]
pub enum NormMode {
    /// Statistics from the current input (layer norm always, batch norm in training).
    FromInput,
    /// Frozen per-channel statistics (batch norm at inference).
    Frozen { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-channel moments observed by a batch-normalization op.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormAxis {
    /// Each row of the last axis is one group.
    Row,
    /// Each index of the last axis, across all rows, is one group.
    Channel,
}

#[derive(Clone, Copy, Debug)]
enum MatLayout {
    /// `a (m×k) · b (k×n)`, with any leading axes of `a` folded into `m`.
    Rows { m: usize, k: usize, n: usize },
    /// Shared `a (m×k)` applied to every `b[i] (k×n)`.
    SharedLeft { batch: usize, m: usize, k: usize, n: usize },
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, layout: MatLayout },
    Transpose { x: Var },
    Binary { kind: Binary, a: Var, b: Var, map: Broadcast },
    Act { x: Var, kind: Activation },
    Softmax { x: Var },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: NormAxis,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        input_stats: bool,
    },
    Mask { x: Var, mask: Vec<f64> },
    Select { x: Var, idx: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    Mse { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic record of executed primitives.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    flops: u64,
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

    /// Floating-point operations executed by forward primitives so far.
    pub fn flops(&self) -> u64 {
        self.flops
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

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("gradient shape matches value")
        })
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Matrix product.
    ///
    /// Supported layouts: `[m,k]·[k,n]`, `[B,m,k]·[k,n]` (rows of every batch
    /// element times a shared right factor) and `[m,k]·[B,k,n]` (shared left
    /// factor applied to every batch element).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (layout, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) | (3, 2) => {
                let k = sa[sa.len() - 1];
                if k != sb[0] {
                    return Err(mismatch());
                }
                let m: usize = sa[..sa.len() - 1].iter().product();
                let n = sb[1];
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(n);
                (MatLayout::Rows { m, k, n }, shape)
            }
            (2, 3) => {
                if sa[1] != sb[1] {
                    return Err(mismatch());
                }
                let (m, k, n, batch) = (sa[0], sa[1], sb[2], sb[0]);
                (MatLayout::SharedLeft { batch, m, k, n }, vec![batch, m, n])
            }
            _ => return Err(mismatch()),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; out_shape.iter().product()];
        match layout {
            MatLayout::Rows { m, k, n } => {
                gemm_acc(m, k, n, av, bv, &mut out);
                self.flops += 2 * (m * k * n) as u64;
            }
            MatLayout::SharedLeft { batch, m, k, n } => {
                for i in 0..batch {
                    gemm_acc(
                        m,
                        k,
                        n,
                        av,
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                self.flops += 2 * (batch * m * k * n) as u64;
            }
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, layout }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!("transpose expects rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, rg))
    }

    /// Elementwise `a + b` with `b` broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let map = broadcast_index(&sa, &sb).ok_or_else(|| Error::Dimension {
            op: "broadcast",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let out: Vec<f64> = match &map {
            Broadcast::Same => av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::Strided { inner: 1, len } if *len == bv.len() => av
                .chunks(*len)
                .flat_map(|row| row.iter().zip(bv).map(|(x, y)| f(*x, *y)))
                .collect(),
            m => av.iter().enumerate().map(|(i, x)| f(*x, bv[m.at(i)])).collect(),
        };
        self.flops += out.len() as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(sa, out)?, Op::Binary { kind, a, b, map }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let src = self.value(x);
        let out: Vec<f64> = src.data().iter().map(|&v| kind.apply(v)).collect();
        let shape = src.shape().to_vec();
        self.flops += out.len() as u64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data: out }, Op::Act { x, kind }, rg)
    }

    /// Softmax over the last axis, stabilized by subtracting each row's max.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::contract("softmax of a scalar"))?;
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(width.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.flops += 3 * out.len() as u64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.normalize(x, gamma, beta, eps, NormAxis::Row, NormMode::FromInput)
            .map(|(v, _)| v)
    }

    /// Normalizes each channel (last axis index) over all leading positions.
    ///
    /// Returns the moments that were used when they came from the input, so
    /// the caller can fold them into running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        self.normalize(x, gamma, beta, eps, NormAxis::Channel, mode)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        axis: NormAxis,
        mode: NormMode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("normalization eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::contract("normalization of a scalar"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::Dimension {
                    op: "normalize affine",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let rows = xs.len() / c.max(1);
        let groups = match axis {
            NormAxis::Row => rows,
            NormAxis::Channel => c,
        };
        let group_of = |i: usize| match axis {
            NormAxis::Row => i / c,
            NormAxis::Channel => i % c,
        };
        let (mean, var, input_stats) = match mode {
            NormMode::FromInput => {
                let count = (xs.len() / groups.max(1)) as f64;
                let mut mean = vec![0.0; groups];
                for (i, v) in xs.iter().enumerate() {
                    mean[group_of(i)] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0; groups];
                for (i, v) in xs.iter().enumerate() {
                    let d = v - mean[group_of(i)];
                    var[group_of(i)] += d * d;
                }
                var.iter_mut().for_each(|s| *s /= count);
                (mean, var, true)
            }
            NormMode::Frozen { mean, var } => {
                if axis != NormAxis::Channel || mean.len() != c || var.len() != c {
                    return Err(Error::contract("frozen statistics must be per channel"));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (i, v) in xs.iter().enumerate() {
            let grp = group_of(i);
            let h = (v - mean[grp]) * inv_std[grp];
            xhat.push(h);
            out.push(g[i % c] * h + b[i % c]);
        }
        self.flops += 6 * out.len() as u64;
        let moments = (axis == NormAxis::Channel && input_stats).then(|| BatchMoments {
            mean: mean.clone(),
            var: var.clone(),
        });
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::Norm {
            x,
            gamma,
            beta,
            axis,
            xhat,
            inv_std,
            input_stats,
        };
        Ok((self.push(Tensor { shape, data: out }, op, rg), moments))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    /// Identity (no node, no draws) when `p == 0` or `training` is off.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {p}")));
        }
        if p == 0.0 || !training {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let n = src.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.flops += n as u64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Mask { x, mask }, rg))
    }

    /// Keeps the listed indices of the last axis, in the given order.
    pub fn select_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::contract("select on a scalar"))?;
        if let Some(bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::contract(format!("channel {bad} out of range for width {c}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() / c.max(1) * idx.len());
        for row in src.chunks(c.max(1)) {
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = idx.len();
        let rg = self.any_grad(&[x]);
        let op = Op::Select {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(Tensor::new(new_shape, out)?, op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x).data();
        let s = src.iter().sum::<f64>() / src.len() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Mean squared error of `pred` against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::Dimension {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.any_grad(&[pred]);
        let op = Op::Mse {
            pred,
            target: target.data().to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse sweep from a scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        // Only keep gradients for nodes that actually track them.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, layout } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                match *layout {
                    MatLayout::Rows { m, k, n } => {
                        if let Some(ga) = slot(nodes, grads, *a) {
                            gemm_nt_acc(m, k, n, g, bv, ga);
                        }
                        if let Some(gb) = slot(nodes, grads, *b) {
                            gemm_tn_acc(m, k, n, av, g, gb);
                        }
                    }
                    MatLayout::SharedLeft { batch, m, k, n } => {
                        if let Some(ga) = slot(nodes, grads, *a) {
                            for i in 0..batch {
                                let gi = &g[i * m * n..(i + 1) * m * n];
                                gemm_nt_acc(m, k, n, gi, &bv[i * k * n..(i + 1) * k * n], ga);
                            }
                        }
                        if let Some(gb) = slot(nodes, grads, *b) {
                            for i in 0..batch {
                                let gi = &g[i * m * n..(i + 1) * m * n];
                                gemm_tn_acc(m, k, n, av, gi, &mut gb[i * k * n..(i + 1) * k * n]);
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Binary { kind, a, b, map } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let bi = |i: usize| map.at(i);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * bv[bi(i)],
                            Binary::Div => g[i] / bv[bi(i)],
                        };
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..g.len() {
                        let j = bi(i);
                        gb[j] += match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * av[i],
                            Binary::Div => -g[i] * av[i] / (bv[j] * bv[j]),
                        };
                    }
                }
            }
            Op::Act { x, kind } => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kind.derivative(xv[i]);
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..y.len() / width {
                        let span = r * width..(r + 1) * width;
                        let dot: f64 = g[span.clone()]
                            .iter()
                            .zip(&y[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for i in span {
                            gx[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
                input_stats,
            } => {
                let c = nodes[gamma.0].value.len();
                let gam = nodes[gamma.0].value.data();
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for i in 0..g.len() {
                        gg[i % c] += g[i] * xhat[i];
                    }
                }
                if let Some(gbeta) = slot(nodes, grads, *beta) {
                    for i in 0..g.len() {
                        gbeta[i % c] += g[i];
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let group_of = |i: usize| match axis {
                        NormAxis::Row => i / c,
                        NormAxis::Channel => i % c,
                    };
                    let groups = inv_std.len();
                    let dxhat: Vec<f64> = (0..g.len()).map(|i| g[i] * gam[i % c]).collect();
                    if *input_stats {
                        let count = (g.len() / groups) as f64;
                        let mut s1 = vec![0.0; groups];
                        let mut s2 = vec![0.0; groups];
                        for i in 0..g.len() {
                            s1[group_of(i)] += dxhat[i];
                            s2[group_of(i)] += dxhat[i] * xhat[i];
                        }
                        for i in 0..g.len() {
                            let grp = group_of(i);
                            gx[i] += inv_std[grp] / count
                                * (count * dxhat[i] - s1[grp] - xhat[i] * s2[grp]);
                        }
                    } else {
                        for i in 0..g.len() {
                            gx[i] += dxhat[i] * inv_std[group_of(i)];
                        }
                    }
                }
            }
            Op::Mask { x, mask } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Select { x, idx } => {
                let c = *nodes[x.0].value.shape().last().unwrap();
                if let Some(gx) = slot(nodes, grads, *x) {
                    let k = idx.len();
                    for (r, chunk) in g.chunks(k).enumerate() {
                        for (j, &src) in idx.iter().enumerate() {
                            gx[r * c + src] += chunk[j];
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let scale = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += scale);
                }
            }
            Op::Mse { pred, target } => {
                let p = nodes[pred.0].value.data();
                if let Some(gp) = slot(nodes, grads, *pred) {
                    let scale = 2.0 * g[0] / p.len() as f64;
                    for i in 0..p.len() {
                        gp[i] += scale * (p[i] - target[i]);
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}
