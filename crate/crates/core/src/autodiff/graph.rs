//! Tape of differentiable ops and reverse-mode accumulation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep walks it in reverse.

use crate::autodiff::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running statistics for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Batch statistics (train) or frozen running statistics (eval).
pub enum NormMode<'a> {
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub eps: f32,
    pub momentum: f32,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    },
    Relu {
        input: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    Sum {
        input: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => std::iter::once(*input).chain(Some(*kernel)).chain(*bias).collect(),
            Op::Relu { input }
            | Op::GlobalAvgPool { input }
            | Op::Reshape { input }
            | Op::Sum { input } => vec![*input],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Linear { input, weight, bias } => {
                std::iter::once(*input).chain(Some(*weight)).chain(*bias).collect()
            }
            Op::Add { lhs, rhs } => vec![*lhs, *rhs],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Summary of one backward sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose gradient was propagated (each at most once).
    pub visited: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input or parameter tensor. Any gradient the tensor carries is
    /// dropped; leaves with `requires_grad` then collect gradients in their
    /// own buffer across backward calls.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> NodeId {
        value.clear_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("node {} is not in this graph", id.0)))
        }
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        const OP: &str = "conv2d";
        self.check(input)?;
        self.check(kernel)?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
        }
        let (n, cin, h, w) = self.value(input).dims4(OP)?;
        let (cout, kcin, kh, kw) = self.value(kernel).dims4(OP)?;
        if kcin != cin {
            return Err(Error::shape(
                OP,
                "input channels",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape(
                OP,
                "kernel height",
                format!("kernel height {kh} exceeds padded input height {}", h + 2 * padding),
            ));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape(
                OP,
                "kernel width",
                format!("kernel width {kw} exceeds padded input width {}", w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    OP,
                    "bias length",
                    format!("bias shape {:?} does not match {cout} output channels", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            hout: (h + 2 * padding - kh) / stride + 1,
            wout: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new([n, cout, geom.hout, geom.wout], out)?;
        Ok(self.push_op(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Relu { input }))
    }

    /// Per-channel batch normalization over `N×H×W`.
    ///
    /// In train mode the running statistics are updated as
    /// `running = (1 - momentum) * running + momentum * batch`, using the
    /// unbiased batch variance.
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: NormMode<'_>,
        cfg: NormConfig,
    ) -> Result<NodeId> {
        const OP: &str = "batchnorm2d";
        self.check(input)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        for (name, id) in [("gamma length", gamma), ("beta length", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::shape(
                    OP,
                    name,
                    format!("expected [{c}], got {:?}", self.value(id).shape()),
                ));
            }
        }
        let stats_channels = match &mode {
            NormMode::Train(s) => s.channels(),
            NormMode::Eval(s) => s.channels(),
        };
        if stats_channels != c {
            return Err(Error::shape(
                OP,
                "running statistics",
                format!("statistics cover {stats_channels} channels, input has {c}"),
            ));
        }
        let count = n * h * w;
        let plane = h * w;
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f32; x.len()];
        let mut inv_std = vec![0.0f32; c];
        let train = matches!(mode, NormMode::Train(_));
        match mode {
            NormMode::Train(stats) => {
                if count < 2 {
                    return Err(Error::shape(
                        OP,
                        "batch elements",
                        format!("train mode needs N*H*W >= 2, got {count}"),
                    ));
                }
                for ch in 0..c {
                    let planes = || (0..n).map(move |b| &x[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
                    let mean = planes().map(sum_f32).sum::<f64>() / count as f64;
                    let shifted = mean as f32;
                    let var = planes().map(|p| sum_sq_dev(p, shifted)).sum::<f64>() / count as f64;
                    let istd = 1.0 / (var + cfg.eps as f64).sqrt();
                    inv_std[ch] = istd as f32;
                    let (mean32, istd32) = (mean as f32, istd as f32);
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for (xh, &v) in xhat[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                            *xh = (v - mean32) * istd32;
                        }
                    }
                    let m = cfg.momentum;
                    let unbiased = var * count as f64 / (count - 1) as f64;
                    stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean as f32;
                    stats.var[ch] = (1.0 - m) * stats.var[ch] + m * unbiased as f32;
                }
            }
            NormMode::Eval(stats) => {
                for ch in 0..c {
                    let istd = 1.0 / (stats.var[ch] + cfg.eps).sqrt();
                    inv_std[ch] = istd;
                    let mean = stats.mean[ch];
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for (xh, &v) in xhat[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                            *xh = (v - mean) * istd;
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0f32; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (g, b) = (gm[ch], bt[ch]);
                for (o, &xh) in out[base..base + plane].iter_mut().zip(&xhat[base..base + plane]) {
                    *o = g * xh + b;
                }
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push_op(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// `x · weightᵀ + bias` for `x: [N,F]`, `weight: [K,F]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        const OP: &str = "linear";
        self.check(input)?;
        self.check(weight)?;
        let (n, f) = self.value(input).dims2(OP)?;
        let (k, wf) = self.value(weight).dims2(OP)?;
        if wf != f {
            return Err(Error::shape(
                OP,
                "features",
                format!("input has {f} features but weight expects {wf}"),
            ));
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.value(b).shape() != [k] {
                return Err(Error::shape(
                    OP,
                    "bias length",
                    format!("expected [{k}], got {:?}", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![0.0f32; n * k];
        kernels::gemm(
            n,
            f,
            k,
            self.value(input).data(),
            (f, 1),
            self.value(weight).data(),
            (1, f),
            0.0,
            &mut out,
            k,
        );
        if let Some(b) = bias {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(k) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let value = Tensor::new([n, k], out)?;
        Ok(self.push_op(value, Op::Linear { input, weight, bias }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let (n, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        let plane = h * w;
        let x = self.value(input).data();
        let out = x
            .chunks_exact(plane)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let value = Tensor::new([n, c], out)?;
        Ok(self.push_op(value, Op::GlobalAvgPool { input }))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.check(lhs)?;
        self.check(rhs)?;
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "add",
                "operand shapes",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Add { lhs, rhs }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        self.check(input)?;
        let mut value = self.value(input).clone();
        value.clear_grad();
        let value = value.reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape { input }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let total = self.value(input).data().iter().map(|&v| v as f64).sum::<f64>();
        Ok(self.push_op(Tensor::scalar(total as f32), Op::Sum { input }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        const OP: &str = "softmax_cross_entropy";
        self.check(logits)?;
        let (n, k) = self.value(logits).dims2(OP)?;
        if labels.len() != n {
            return Err(Error::shape(
                OP,
                "batch",
                format!("{} labels for {n} logit rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "{OP}: label {bad} out of range for {k} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for (row, (&label, p)) in z.chunks_exact(k).zip(labels.iter().zip(probs.chunks_exact_mut(k))) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = ((v as f64 - max).exp() / denom) as f32;
            }
            total += max + denom.ln() - row[label] as f64;
        }
        let loss = (total / n as f64) as f32;
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar node with seed gradient 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<BackwardStats> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Reverse-mode sweep computing the vector-Jacobian product `seedᵀ · J`
    /// into every reachable leaf that requires a gradient.
    pub fn backward_with_seed(&mut self, root: NodeId, seed: &[f32]) -> Result<BackwardStats> {
        self.check(root)?;
        if seed.len() != self.value(root).numel() {
            return Err(Error::shape(
                "backward",
                "seed length",
                format!("seed has {} values for {} outputs", seed.len(), self.value(root).numel()),
            ));
        }
        let end = root.0 + 1;
        let mut reachable = vec![false; end];
        reachable[root.0] = true;
        for i in (0..end).rev() {
            if reachable[i] && self.nodes[i].requires_grad {
                for input in self.nodes[i].op.inputs() {
                    reachable[input.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; end];
        grads[root.0] = Some(seed.to_vec());
        let mut visited = 0;
        for i in (0..end).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            visited += 1;
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&gout);
                continue;
            }
            for (input, delta) in self.input_grads(i, &gout) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], delta);
                }
            }
        }
        Ok(BackwardStats { visited })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn input_grads(&self, i: usize, gout: &[f32]) -> Vec<(NodeId, Vec<f32>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need = (self.wants(*input), self.wants(*kernel), bias.is_some_and(|b| self.wants(b)));
                let grads = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gout,
                    geom,
                    need,
                );
                let mut out = Vec::new();
                if let Some(g) = grads.input {
                    out.push((*input, g));
                }
                if let Some(g) = grads.kernel {
                    out.push((*kernel, g));
                }
                if let (Some(b), Some(g)) = (bias, grads.bias) {
                    out.push((*b, g));
                }
                out
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let g = x.iter().zip(gout).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                vec![(*input, g)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*input).dims4("batchnorm2d").expect("checked in forward");
                let plane = h * w;
                let count = (n * plane) as f64;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = vec![0.0f32; gout.len()];
                for ch in 0..c {
                    let range = |b: usize| (b * c + ch) * plane..(b * c + ch + 1) * plane;
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for b in 0..n {
                        let (gy, xh) = (&gout[range(b)], &xhat[range(b)]);
                        sum_dy += sum_f32(gy);
                        sum_dy_xhat += dot_f32(gy, xh);
                    }
                    dgamma[ch] = sum_dy_xhat as f32;
                    dbeta[ch] = sum_dy as f32;
                    let scale = gm[ch] * inv_std[ch];
                    let (mean_dy, mean_dy_xhat) = if *train {
                        ((sum_dy / count) as f32, (sum_dy_xhat / count) as f32)
                    } else {
                        (0.0, 0.0)
                    };
                    for b in 0..n {
                        let r = range(b);
                        for ((d, &g), &xh) in dx[r.clone()].iter_mut().zip(&gout[r.clone()]).zip(&xhat[r]) {
                            *d = scale * (g - mean_dy - xh * mean_dy_xhat);
                        }
                    }
                }
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Linear { input, weight, bias } => {
                let (n, f) = self.value(*input).dims2("linear").expect("checked in forward");
                let k = gout.len() / n;
                let mut out = Vec::new();
                if self.wants(*input) {
                    let mut dx = vec![0.0f32; n * f];
                    kernels::gemm(n, k, f, gout, (k, 1), self.value(*weight).data(), (f, 1), 0.0, &mut dx, f);
                    out.push((*input, dx));
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0f32; k * f];
                    kernels::gemm(k, n, f, gout, (1, k), self.value(*input).data(), (f, 1), 0.0, &mut dw, f);
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0f32; k];
                    for row in gout.chunks_exact(k) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::GlobalAvgPool { input } => {
                let (_, _, h, w) = self.value(*input).dims4("global_avg_pool").expect("checked in forward");
                let plane = h * w;
                let scale = 1.0 / plane as f32;
                let dx = gout.iter().flat_map(|&g| std::iter::repeat_n(g * scale, plane)).collect();
                vec![(*input, dx)]
            }
            Op::Add { lhs, rhs } => vec![(*lhs, gout.to_vec()), (*rhs, gout.to_vec())],
            Op::Reshape { input } => vec![(*input, gout.to_vec())],
            Op::Sum { input } => vec![(*input, vec![gout[0]; self.value(*input).numel()])],
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = gout[0] / n as f32;
                let mut dz: Vec<f32> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    dz[row * k + label] -= scale;
                }
                vec![(*logits, dz)]
            }
        }
    }
}

const LANES: usize = 16;

/// Lane-parallel reductions: f32 partial sums per lane, combined in f64.
fn reduce_lanes(len: usize, mut term: impl FnMut(usize) -> f32) -> f64 {
    let mut acc = [0.0f32; LANES];
    let full = len / LANES * LANES;
    for base in (0..full).step_by(LANES) {
        for (l, a) in acc.iter_mut().enumerate() {
            *a += term(base + l);
        }
    }
    let mut total: f64 = acc.iter().map(|&a| a as f64).sum();
    for i in full..len {
        total += term(i) as f64;
    }
    total
}

fn sum_f32(xs: &[f32]) -> f64 {
    reduce_lanes(xs.len(), |i| xs[i])
}

fn sum_sq_dev(xs: &[f32], mean: f32) -> f64 {
    reduce_lanes(xs.len(), |i| (xs[i] - mean) * (xs[i] - mean))
}

fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    let b = &b[..a.len()];
    reduce_lanes(a.len(), |i| a[i] * b[i])
}

fn accumulate(slot: &mut Option<Vec<f32>>, delta: Vec<f32>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let k = g.leaf(t(&[1, 1, 1, 1], &[2.0]), false);
        let b = g.leaf(t(&[1], &[0.0]), false);
        let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut g = Graph::new();
        let input = Tensor::from_fn([2, 3, 5, 4], |i| (i as f32 * 0.37).sin());
        let x = g.leaf(input.clone(), false);
        let mut kernel = Tensor::zeros([3, 3, 3, 3]);
        for c in 0..3 {
            kernel.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let k = g.leaf(kernel, false);
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), input.data());
    }

    #[test]
    fn conv_output_extent_and_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([1, 2, 7, 5]), false);
        let k = g.leaf(Tensor::zeros([4, 2, 3, 3]), false);
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 4, 4, 3]);

        let bad = g.leaf(Tensor::zeros([4, 3, 3, 3]), false);
        let err = g.conv2d(x, bad, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let tall = g.leaf(Tensor::zeros([1, 2, 9, 1]), false);
        let err = g.conv2d(x, tall, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("kernel height"), "{err}");
        let bias = g.leaf(Tensor::zeros([3]), false);
        let err = g.conv2d(x, k, Some(bias), 1, 0).unwrap_err().to_string();
        assert!(err.contains("bias length"), "{err}");
    }

    #[test]
    fn relu_forward_and_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_propagates_nan() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[f32::NAN, -1.0]), false);
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data()[0].is_nan());
    }

    #[test]
    fn relu_all_negative_passes_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn([2, 3], |i| -1.0 - i as f32), true);
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full([4, 2, 3, 3], 0.7), false);
        let gamma = g.leaf(Tensor::full([2], 1.0), false);
        let beta = g.leaf(Tensor::zeros([2]), false);
        let mut stats = RunningStats::new(2);
        let y = g
            .batchnorm2d(x, gamma, beta, NormMode::Train(&mut stats), NormConfig::default())
            .unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() <= 1e-3));
        // running <- 0.9 * running + 0.1 * batch
        assert!((stats.mean[0] - 0.07).abs() < 1e-6);
        assert!((stats.var[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let mut g = Graph::new();
        let input = Tensor::from_fn([2, 3, 2, 2], |i| i as f32 * 0.1 - 1.0);
        let x = g.leaf(input.clone(), false);
        let gamma = g.leaf(Tensor::full([3], 1.0), false);
        let beta = g.leaf(Tensor::zeros([3]), false);
        let stats = RunningStats::new(3);
        let cfg = NormConfig { eps: 0.0, momentum: 0.1 };
        let y = g.batchnorm2d(x, gamma, beta, NormMode::Eval(&stats), cfg).unwrap();
        assert_eq!(g.value(y).data(), input.data());
    }

    #[test]
    fn batchnorm_train_requires_two_elements() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([1, 2, 1, 1]), false);
        let gamma = g.leaf(Tensor::full([2], 1.0), false);
        let beta = g.leaf(Tensor::zeros([2]), false);
        let mut stats = RunningStats::new(2);
        assert!(g
            .batchnorm2d(x, gamma, beta, NormMode::Train(&mut stats), NormConfig::default())
            .is_err());
        assert_eq!(stats, RunningStats::new(2));
    }

    #[test]
    fn linear_hand_arithmetic_and_identity() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let w = g.leaf(t(&[1, 2], &[3.0, 4.0]), false);
        let b = g.leaf(t(&[1], &[5.0]), false);
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[16.0]);

        let input = Tensor::from_fn([3, 4], |i| i as f32 - 5.5);
        let x = g.leaf(input.clone(), false);
        let eye = g.leaf(Tensor::from_fn([4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }), false);
        let zero = g.leaf(Tensor::zeros([4]), false);
        let y = g.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(g.value(y).data(), input.data());

        let err = g.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("features"), "{err}");
    }

    #[test]
    fn global_avg_pool_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full([2, 3, 4, 5], 1.25), true);
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.25));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0 / 20.0));

        let input = Tensor::from_fn([2, 3, 1, 1], |i| i as f32);
        let x = g.leaf(input.clone(), false);
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), input.data());
    }

    #[test]
    fn add_zeros_and_gradient_routing() {
        let mut g = Graph::new();
        let a_val = Tensor::from_fn([2, 2], |i| i as f32 + 0.5);
        let a = g.leaf(a_val.clone(), true);
        let z = g.leaf(Tensor::zeros([2, 2]), true);
        let y = g.add(a, z).unwrap();
        assert_eq!(g.value(y).data(), a_val.data());
        let seed = [1.0, -2.0, 3.0, -4.0];
        g.backward_with_seed(y, &seed).unwrap();
        assert_eq!(g.grad(a).unwrap(), &seed);
        assert_eq!(g.grad(z).unwrap(), &seed);

        let other = g.leaf(Tensor::zeros([4]), false);
        assert!(g.add(a, other).is_err());
    }

    #[test]
    fn cross_entropy_symmetry_and_saturation() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros([3, 20]), false);
        let loss = g.softmax_cross_entropy(z, &[0, 7, 19]).unwrap();
        assert!((g.value(loss).item().unwrap() - 20f32.ln()).abs() < 1e-6);

        let mut logits = vec![0.0f32; 5];
        logits[2] = 50.0;
        let z = g.leaf(t(&[1, 5], &logits), false);
        let loss = g.softmax_cross_entropy(z, &[2]).unwrap();
        assert!(g.value(loss).item().unwrap() < 1e-6);

        assert!(g.softmax_cross_entropy(z, &[5]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let raw = [0.3f32, -1.2, 2.0, 0.5, 0.0, 0.1];
        let z = g.leaf(t(&[2, 3], &raw), true);
        let loss = g.softmax_cross_entropy(z, &[2, 0]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(z).unwrap();
        for (row, label) in [(0usize, 2usize), (1, 0)] {
            let r = &raw[row * 3..row * 3 + 3];
            let denom: f32 = r.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let p = r[j].exp() / denom;
                let want = (p - if j == label { 1.0 } else { 0.0 }) / 2.0;
                assert!((grad[row * 3 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_requires_scalar_and_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = g.relu(x).unwrap();
        assert!(g.backward(y).is_err());
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diamond_visits_each_node_once() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.5, -0.5]), true);
        let a = g.relu(x).unwrap();
        let b = g.add(x, a).unwrap();
        let c = g.add(a, b).unwrap();
        let unused = g.relu(x).unwrap();
        let s = g.sum(c).unwrap();
        let stats = g.backward(s).unwrap();
        // s, c, b, a, x
        assert_eq!(stats.visited, 5);
        let _ = unused;
        // d/dx [relu(x) + x + relu(x)] = 1 + 2·[x > 0]
        assert_eq!(g.grad(x).unwrap(), &[3.0, 1.0]);
    }

    #[test]
    fn leaves_start_without_the_tensors_gradient() {
        let mut carried = t(&[2], &[1.0, 2.0]);
        carried.accumulate_grad(&[5.0, 5.0]);
        let mut g = Graph::new();
        let x = g.leaf(carried, true);
        assert!(g.grad(x).is_none());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn constant_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), false);
        let w = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.add(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
    }
}
