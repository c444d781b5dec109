use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm running statistics, updated in training mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        scale: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    WeightedConcat {
        parts: Vec<(Var, f64)>,
    },
    Sum {
        input: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// Scalar whose gradient with respect to `input` is supplied by the
    /// caller (used for losses computed outside the graph).
    ScalarWithGrad {
        input: Var,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward computation recorded for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape order is already a
/// topological order and backward walks it in reverse.
#[derive(Debug, Default)]
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

    /// Adds a leaf. Gradient tracking follows `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<f64>, deps: &[Var], op: Op) -> Var {
        let mut t = Tensor::new(shape, data).expect("kernel produced consistent shape");
        t.requires_grad = self.tracked(deps);
        self.push(t, op)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (k, wc, kh, kw) = self.value(weight).dims4()?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels but weight expects {wc}"
            )));
        }
        if !(stride == 1 || stride == 2) || padding > 1 {
            return Err(Error::Shape(format!(
                "conv2d: unsupported stride {stride} / padding {padding}"
            )));
        }
        if !((kh == 3 && kw == 3) || (kh == 1 && kw == 1)) {
            return Err(Error::Shape(format!(
                "conv2d: unsupported kernel {kh}x{kw}"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d: input {h}x{w} smaller than kernel"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [k] {
                return Err(Error::Shape(format!(
                    "conv2d: bias shape {:?}, expected [{k}]",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.make(
            vec![n, k, geom.ho, geom.wo],
            out,
            &deps,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let dims @ (n, c, h, w) = self.value(input).dims4()?;
        if size == 0 || stride == 0 {
            return Err(Error::Shape("maxpool2d: zero size or stride".into()));
        }
        if h < size || w < size {
            return Err(Error::Shape(format!(
                "maxpool2d: spatial {h}x{w} smaller than window {size}"
            )));
        }
        let (out, argmax, ho, wo) =
            kernels::maxpool_forward(dims, size, stride, self.value(input).data());
        Ok(self.make(
            vec![n, c, ho, wo],
            out,
            &[input],
            Op::MaxPool { input, argmax },
        ))
    }

    /// Bilinear upsampling with half-pixel centres (align_corners = false).
    pub fn upsample_bilinear(&mut self, input: Var, scale: usize) -> Result<Var> {
        let dims @ (n, c, h, w) = self.value(input).dims4()?;
        if scale == 0 {
            return Err(Error::Shape("upsample: scale must be positive".into()));
        }
        let out = kernels::upsample_forward(dims, scale, self.value(input).data());
        Ok(self.make(
            vec![n, c, h * scale, w * scale],
            out,
            &[input],
            Op::Upsample { input, scale },
        ))
    }

    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "batchnorm: affine params must be [{c}]"
            )));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm: running stats must have {c} channels"
            )));
        }
        let m = n * h * w;
        if training && m < 2 {
            return Err(Error::Shape(
                "batchnorm: training mode needs at least two values per channel".into(),
            ));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if training {
                let mut sum = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    sum += x[base..base + hw].iter().sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    sq += x[base..base + hw]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = sq / m as f64;
                let unbiased = sq / (m - 1) as f64;
                stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * mean;
                stats.var[ch] = (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * unbiased;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let istd = 1.0 / (var + stats.eps).sqrt();
            inv_std[ch] = istd;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean) * istd;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bta[ch];
                }
            }
        }
        Ok(self.make(
            vec![n, c, h, w],
            out,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: training,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.make(shape, out, &[input], Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out = t.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        self.make(shape, out, &[input], Op::Sigmoid { input })
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` in training,
    /// identity in eval.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout p must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let t = self.value(input);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        Ok(self.make(shape, out, &[input], Op::Dropout { input, mask }))
    }

    /// Scales each part by its weight and concatenates along channels.
    pub fn weighted_concat(&mut self, parts: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = parts
            .first()
            .ok_or_else(|| Error::Shape("weighted_concat: no parts".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut channels = 0;
        for &(v, weight) in parts {
            let (pn, pc, ph, pw) = self.value(v).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "weighted_concat: part is {pn}x{ph}x{pw}, expected {n}x{h}x{w}"
                )));
            }
            if !weight.is_finite() {
                return Err(Error::Input(format!(
                    "weighted_concat: weight {weight} not finite"
                )));
            }
            channels += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            for &(v, weight) in parts {
                let t = self.value(v);
                let pc = t.shape()[1];
                let src = &t.data()[b * pc * hw..(b + 1) * pc * hw];
                out.extend(src.iter().map(|x| x * weight));
            }
        }
        let deps: Vec<Var> = parts.iter().map(|p| p.0).collect();
        Ok(self.make(
            vec![n, channels, h, w],
            out,
            &deps,
            Op::WeightedConcat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.make(vec![1], vec![s], &[input], Op::Sum { input })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.make(shape, out, &[a, b], Op::Mul { a, b }))
    }

    /// Records a scalar computed outside the graph together with its
    /// gradient with respect to `input`.
    pub fn scalar_with_grad(
        &mut self,
        input: Var,
        value: f64,
        local_grad: Vec<f64>,
    ) -> Result<Var> {
        if local_grad.len() != self.value(input).numel() {
            return Err(Error::Shape(
                "scalar_with_grad: gradient length mismatch".into(),
            ));
        }
        Ok(self.make(
            vec![1],
            vec![value],
            &[input],
            Op::ScalarWithGrad { input, local_grad },
        ))
    }

    /// Reverse pass from a scalar loss. Every node that requires a gradient
    /// and is reachable from `loss` ends up with a populated `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.value(loss).requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            self.propagate(idx, &grad);
            self.nodes[idx].value.grad = Some(grad);
        }
        Ok(())
    }

    /// Returns a zeroed gradient buffer for `v` if it needs one.
    fn grad_buf(&mut self, v: Var) -> Option<Vec<f64>> {
        let t = &mut self.nodes[v.0].value;
        if !t.requires_grad {
            return None;
        }
        Some(t.grad.take().unwrap_or_else(|| vec![0.0; t.numel()]))
    }

    fn store(&mut self, v: Var, buf: Option<Vec<f64>>) {
        if let Some(b) = buf {
            self.nodes[v.0].value.grad = Some(b);
        }
    }

    fn propagate(&mut self, idx: usize, dy: &[f64]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let mut gi = self.grad_buf(*input);
                let mut gw = self.grad_buf(*weight);
                let mut gb = bias.and_then(|b| self.grad_buf(b));
                kernels::conv2d_backward(
                    geom,
                    self.nodes[input.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    dy,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.store(*input, gi);
                self.store(*weight, gw);
                if let Some(b) = bias {
                    self.store(*b, gb);
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(mut gi) = self.grad_buf(*input) {
                    for (g, &src) in dy.iter().zip(argmax) {
                        gi[src] += g;
                    }
                    self.store(*input, Some(gi));
                }
            }
            Op::Upsample { input, scale } => {
                if let Some(mut gi) = self.grad_buf(*input) {
                    let dims = self.nodes[input.0].value.dims4().expect("rank 4");
                    kernels::upsample_backward(dims, *scale, dy, &mut gi);
                    self.store(*input, Some(gi));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.nodes[input.0].value.dims4().expect("rank 4");
                let hw = h * w;
                let m = (n * hw) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                if let Some(mut gg) = self.grad_buf(*gamma) {
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(g, s)| *g += s);
                    self.store(*gamma, Some(gg));
                }
                if let Some(mut gb) = self.grad_buf(*beta) {
                    gb.iter_mut().zip(&sum_dy).for_each(|(g, s)| *g += s);
                    self.store(*beta, Some(gb));
                }
                if let Some(mut gi) = self.grad_buf(*input) {
                    let gam = self.nodes[gamma.0].value.data();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            for i in base..base + hw {
                                gi[i] += if *batch_stats {
                                    scale / m * (m * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                                } else {
                                    scale * dy[i]
                                };
                            }
                        }
                    }
                    self.store(*input, Some(gi));
                }
            }
            Op::Relu { input } => {
                if let Some(mut gi) = self.grad_buf(*input) {
                    let x = self.nodes[input.0].value.data();
                    for i in 0..gi.len() {
                        if x[i] > 0.0 {
                            gi[i] += dy[i];
                        }
                    }
                    self.store(*input, Some(gi));
                }
            }
            Op::Sigmoid { input } => {
                if let Some(mut gi) = self.grad_buf(*input) {
                    let y = self.nodes[idx].value.data();
                    for i in 0..gi.len() {
                        gi[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                    self.store(*input, Some(gi));
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(mut gi) = self.grad_buf(*input) {
                    for i in 0..gi.len() {
                        gi[i] += dy[i] * mask[i];
                    }
                    self.store(*input, Some(gi));
                }
            }
            Op::WeightedConcat { parts } => {
                let (n, channels, h, w) = self.nodes[idx].value.dims4().expect("rank 4");
                let hw = h * w;
                let mut offset = 0;
                for &(v, weight) in parts {
                    let pc = self.nodes[v.0].value.shape()[1];
                    if let Some(mut gi) = self.grad_buf(v) {
                        for b in 0..n {
                            let src = &dy
                                [(b * channels + offset) * hw..(b * channels + offset + pc) * hw];
                            let dst = &mut gi[b * pc * hw..(b + 1) * pc * hw];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * weight);
                        }
                        self.store(v, Some(gi));
                    }
                    offset += pc;
                }
            }
            Op::Sum { input } => {
                if let Some(mut gi) = self.grad_buf(*input) {
                    gi.iter_mut().for_each(|g| *g += dy[0]);
                    self.store(*input, Some(gi));
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if let Some(mut ga) = self.grad_buf(a) {
                    let bv = self.nodes[b.0].value.data();
                    ga.iter_mut()
                        .zip(dy.iter().zip(bv))
                        .for_each(|(g, (d, x))| *g += d * x);
                    self.store(a, Some(ga));
                }
                if let Some(mut gb) = self.grad_buf(b) {
                    let av = self.nodes[a.0].value.data();
                    gb.iter_mut()
                        .zip(dy.iter().zip(av))
                        .for_each(|(g, (d, x))| *g += d * x);
                    self.store(b, Some(gb));
                }
            }
            Op::ScalarWithGrad { input, local_grad } => {
                if let Some(mut gi) = self.grad_buf(*input) {
                    gi.iter_mut()
                        .zip(local_grad)
                        .for_each(|(g, l)| *g += dy[0] * l);
                    self.store(*input, Some(gi));
                }
            }
        }
        self.nodes[idx].op = op;
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
