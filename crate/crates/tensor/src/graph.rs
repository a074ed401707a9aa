//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built for one forward pass and dropped after backward.
//! Nodes are appended in construction order, so every node's inputs
//! precede it and the backward sweep is the exact reverse of that order.

use std::fmt;

use crate::error::{contract, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{image_shape, nchw, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Argmax bookkeeping of a 2×2 max pooling, consumed by unpooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<u8>,
}

impl PoolIndices {
    /// Shape of the tensor that was pooled.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_dims(&self) -> (usize, usize, usize, usize) {
        let (n, c, h, w) = nchw(&self.input_shape).expect("pooled tensors are image shaped");
        (n, c, h / 2, w / 2)
    }

    /// Row/column offset `(dy, dx)` of the maximum inside pooled cell `(i, j)`.
    pub fn position(&self, n: usize, c: usize, i: usize, j: usize) -> (usize, usize) {
        let (_, ch, oh, ow) = self.output_dims();
        let p = self.argmax[((n * ch + c) * oh + i) * ow + j];
        ((p / 2) as usize, (p % 2) as usize)
    }
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    /// Weight of the current batch in the running-statistics update.
    pub momentum: f32,
    pub eps: f32,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Backward rule for an operation defined outside this crate.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; only the vector-Jacobian product lives here.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` for inputs it does not
    /// differentiate), each congruent to that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f32]) -> Vec<Option<Vec<f32>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var, dilation: usize },
    MaxPool { x: Var, indices: PoolIndices },
    Unpool { x: Var, indices: PoolIndices },
    Upsample { x: Var },
    AreaPool { x: Var, factor: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, mode: Mode },
    Relu { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f32 },
    Sum { x: Var },
    WeightedSum { terms: Vec<(Var, f32)> },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Unpool { .. } => "unpool2d",
            Op::Upsample { .. } => "bilinear_upsample2x",
            Op::AreaPool { .. } => "area_downsample",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<String>,
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
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

    /// Test hook: corrupts the backward rule of every node whose operation
    /// is called `op_name` by scaling the gradients it emits by 1.5.
    pub fn inject_backward_fault(&mut self, op_name: &str) {
        self.fault = Some(op_name.to_string());
    }

    /// Names of the operations in construction order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(contract!("variable {} does not belong to this graph", v.0))
        }
    }

    /// Inserts a tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_leaf(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Dilated, zero-padded, stride-1 cross-correlation. Weights are
    /// `C_out×C_in×k×k` with odd `k`; the output keeps the input's spatial size.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        if dilation == 0 {
            return Err(contract!("dilation must be at least 1"));
        }
        let xs = self.shape(x).to_vec();
        let (n, cin, h, wd) = nchw(&xs)?;
        let ws = self.shape(w).to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(contract!("conv weights must be rank 4, got {ws:?}"));
        };
        if wcin != cin {
            return Err(contract!("weights expect {wcin} input channels, input has {cin}"));
        }
        if k != k2 || k % 2 == 0 {
            return Err(contract!("kernel must be square with odd size, got {k}×{k2}"));
        }
        if self.shape(b) != [cout] {
            return Err(contract!("bias shape {:?} does not match {cout} output channels", self.shape(b)));
        }
        if h == 0 || wd == 0 {
            return Err(contract!("conv input needs nonzero spatial size"));
        }
        let g = ConvGeometry { in_channels: cin, out_channels: cout, height: h, width: wd, kernel: k, dilation };
        let (in_len, out_len) = (cin * h * wd, cout * h * wd);
        let mut out = vec![0.0; n * out_len];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            for i in 0..n {
                kernels::conv_forward(
                    &xv[i * in_len..(i + 1) * in_len],
                    wv,
                    bv,
                    &g,
                    &mut out[i * out_len..(i + 1) * out_len],
                );
            }
        }
        let t = Tensor::new(image_shape(&xs, n, cout, h, wd), out)?;
        Ok(self.push(t, Op::Conv { x, w, b, dilation }, &[x, w, b]))
    }

    /// 2×2 stride-2 max pooling; ties go to the first element in row-major order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<(Var, PoolIndices)> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = nchw(&xs)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(contract!("max_pool2d needs even spatial dims, got {h}×{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0u8; out.len()];
        let xv = self.value(x).data();
        for p in 0..n * c {
            kernels::max_pool_plane(
                &xv[p * h * w..(p + 1) * h * w],
                h,
                w,
                &mut out[p * oh * ow..(p + 1) * oh * ow],
                &mut argmax[p * oh * ow..(p + 1) * oh * ow],
            );
        }
        let indices = PoolIndices { input_shape: xs.clone(), argmax };
        let t = Tensor::new(image_shape(&xs, n, c, oh, ow), out)?;
        let v = self.push(t, Op::MaxPool { x, indices: indices.clone() }, &[x]);
        Ok((v, indices))
    }

    /// Inverse placement of [`Graph::max_pool2d`]: each value goes to its
    /// recorded argmax position, everything else is zero.
    pub fn unpool2d(&mut self, x: Var, indices: &PoolIndices) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = nchw(&xs)?;
        if (n, c, h, w) != indices.output_dims() {
            return Err(contract!(
                "unpool input {:?} does not match pooled shape {:?}",
                (n, c, h, w),
                indices.output_dims()
            ));
        }
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        let xv = self.value(x).data();
        for p in 0..n * c {
            kernels::unpool_plane(
                &xv[p * h * w..(p + 1) * h * w],
                h,
                w,
                &indices.argmax[p * h * w..(p + 1) * h * w],
                &mut out[p * oh * ow..(p + 1) * oh * ow],
            );
        }
        let t = Tensor::new(image_shape(&xs, n, c, oh, ow), out)?;
        Ok(self.push(t, Op::Unpool { x, indices: indices.clone() }, &[x]))
    }

    /// Align-corners-false bilinear 2× upsampling.
    pub fn bilinear_upsample2x(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = nchw(&xs)?;
        if h == 0 || w == 0 {
            return Err(contract!("cannot upsample an empty plane"));
        }
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        let xv = self.value(x).data();
        for p in 0..n * c {
            kernels::upsample_plane(&xv[p * h * w..(p + 1) * h * w], h, w, &mut out[p * oh * ow..(p + 1) * oh * ow]);
        }
        let t = Tensor::new(image_shape(&xs, n, c, oh, ow), out)?;
        Ok(self.push(t, Op::Upsample { x }, &[x]))
    }

    /// Block-mean downsampling by an integer `factor` in both directions.
    pub fn area_downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = nchw(&xs)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(contract!("{h}×{w} is not an integer multiple of factor {factor}"));
        }
        let (oh, ow) = (h / factor, w / factor);
        let mut out = vec![0.0; n * c * oh * ow];
        let xv = self.value(x).data();
        for p in 0..n * c {
            kernels::area_pool_plane(
                &xv[p * h * w..(p + 1) * h * w],
                h,
                w,
                factor,
                &mut out[p * oh * ow..(p + 1) * oh * ow],
            );
        }
        let t = Tensor::new(image_shape(&xs, n, c, oh, ow), out)?;
        Ok(self.push(t, Op::AreaPool { x, factor }, &[x]))
    }

    /// Per-channel batch normalization over (N, H, W).
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats` (unbiased variance); eval mode normalizes with `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = nchw(&xs)?;
        let m = n * h * w;
        if c == 0 || m == 0 {
            return Err(contract!("batch_norm needs nonempty channels, got shape {xs:?}"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(contract!("gamma/beta must have length {c}"));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(contract!("running stats track {} channels, input has {c}", stats.mean.len()));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut inv_std = vec![0.0f32; c];
        let mut mean = vec![0.0f32; c];
        for ch in 0..c {
            let (mu, var) = match mode {
                Mode::Train => {
                    let mut s = 0.0f64;
                    let mut s2 = 0.0f64;
                    for i in 0..n {
                        for v in &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            s += *v as f64;
                            s2 += (*v as f64) * (*v as f64);
                        }
                    }
                    let mu = s / m as f64;
                    let var = (s2 / m as f64 - mu * mu).max(0.0);
                    let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                    let mom = cfg.momentum;
                    stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * mu as f32;
                    stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * unbiased as f32;
                    (mu as f32, var as f32)
                }
                Mode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            mean[ch] = mu;
            inv_std[ch] = 1.0 / (var + cfg.eps).sqrt();
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for k in off..off + hw {
                    xhat[k] = (xv[k] - mean[ch]) * inv_std[ch];
                    out[k] = gv[ch] * xhat[k] + bv[ch];
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Relu { x }, &[x]))
    }

    /// Stacks `b` after `a` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, ca, ha, wa) = nchw(&sa)?;
        let (nb, cb, hb, wb) = nchw(&sb)?;
        if sa.len() != sb.len() || na != nb || ha != hb || wa != wb {
            return Err(contract!("cannot concatenate {sa:?} with {sb:?}"));
        }
        let hw = ha * wa;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..na {
            out.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let t = Tensor::new(image_shape(&sa, na, ca + cb, ha, wa), out)?;
        Ok(self.push(t, Op::Concat { a, b }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(contract!("shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.check(x)?;
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Scale { x, s }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s: f64 = self.value(x).data().iter().map(|v| *v as f64).sum();
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum { x }, &[x]))
    }

    /// `Σ coeff·term` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut total = 0.0f64;
        for &(v, c) in terms {
            self.check(v)?;
            if self.value(v).numel() != 1 {
                return Err(contract!("weighted_sum terms must be scalars"));
            }
            total += (c * self.value(v).item()) as f64;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(total as f32), Op::WeightedSum { terms: terms.to_vec() }, &inputs))
    }

    /// Records an externally computed operation together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomOp>) -> Result<Var> {
        for v in inputs {
            self.check(*v)?;
        }
        Ok(self.push(output, Op::Custom { inputs: inputs.to_vec(), rule }, inputs))
    }

    /// Reverse sweep from a one-element `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(contract!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let mut emitted = self.vjp(idx, &gout);
            if let Some(f) = &self.fault {
                if f == self.nodes[idx].op.name() {
                    for (_, g) in &mut emitted {
                        g.iter_mut().for_each(|v| *v *= 1.5);
                    }
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&gout);
                continue;
            }
            for (v, g) in emitted {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian product of node `idx`: gradients for its inputs.
    fn vjp(&self, idx: usize, gout: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, dilation } => {
                let (n, cin, h, wd) = val(*x).nchw().expect("checked at construction");
                let ws = val(*w).shape();
                let (cout, k) = (ws[0], ws[2]);
                let g = ConvGeometry { in_channels: cin, out_channels: cout, height: h, width: wd, kernel: k, dilation: *dilation };
                let (in_len, out_len) = (cin * h * wd, cout * h * wd);
                let mut dw = vec![0.0; val(*w).numel()];
                let mut db = vec![0.0; cout];
                let mut dx = wants(*x).then(|| vec![0.0; val(*x).numel()]);
                let xv = val(*x).data();
                for i in 0..n {
                    kernels::conv_backward(
                        &xv[i * in_len..(i + 1) * in_len],
                        val(*w).data(),
                        &gout[i * out_len..(i + 1) * out_len],
                        &g,
                        &mut dw,
                        &mut db,
                        dx.as_mut().map(|d| &mut d[i * in_len..(i + 1) * in_len]),
                    );
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::MaxPool { x, indices } => {
                let (n, c, h, w) = val(*x).nchw().expect("checked");
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; val(*x).numel()];
                for p in 0..n * c {
                    let mut plane = vec![0.0; h * w];
                    kernels::unpool_plane(
                        &gout[p * oh * ow..(p + 1) * oh * ow],
                        oh,
                        ow,
                        &indices.argmax[p * oh * ow..(p + 1) * oh * ow],
                        &mut plane,
                    );
                    dx[p * h * w..(p + 1) * h * w].copy_from_slice(&plane);
                }
                out.push((*x, dx));
            }
            Op::Unpool { x, indices } => {
                let (n, c, h, w) = val(*x).nchw().expect("checked");
                let big = 4 * h * w;
                let mut dx = vec![0.0; val(*x).numel()];
                for p in 0..n * c {
                    kernels::gather_plane(
                        &gout[p * big..(p + 1) * big],
                        h,
                        w,
                        &indices.argmax[p * h * w..(p + 1) * h * w],
                        &mut dx[p * h * w..(p + 1) * h * w],
                    );
                }
                out.push((*x, dx));
            }
            Op::Upsample { x } => {
                let (n, c, h, w) = val(*x).nchw().expect("checked");
                let big = 4 * h * w;
                let mut dx = vec![0.0; val(*x).numel()];
                for p in 0..n * c {
                    kernels::upsample_plane_backward(&gout[p * big..(p + 1) * big], h, w, &mut dx[p * h * w..(p + 1) * h * w]);
                }
                out.push((*x, dx));
            }
            Op::AreaPool { x, factor } => {
                let (n, c, h, w) = val(*x).nchw().expect("checked");
                let small = h * w / (factor * factor);
                let mut dx = vec![0.0; val(*x).numel()];
                for p in 0..n * c {
                    kernels::area_pool_plane_backward(
                        &gout[p * small..(p + 1) * small],
                        h,
                        w,
                        *factor,
                        &mut dx[p * h * w..(p + 1) * h * w],
                    );
                }
                out.push((*x, dx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode } => {
                let (n, c, h, w) = val(*x).nchw().expect("checked");
                let hw = h * w;
                let m = (n * hw) as f64;
                let gv = val(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = vec![0.0f32; val(*x).numel()];
                for ch in 0..c {
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xhat = 0.0f64;
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        for k in off..off + hw {
                            sum_dy += gout[k] as f64;
                            sum_dy_xhat += (gout[k] * xhat[k]) as f64;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat as f32;
                    dbeta[ch] = sum_dy as f32;
                    let scale = gv[ch] * inv_std[ch];
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        for k in off..off + hw {
                            dx[k] = match mode {
                                Mode::Eval => scale * gout[k],
                                Mode::Train => {
                                    scale
                                        * (gout[k] - (sum_dy / m) as f32 - xhat[k] * (sum_dy_xhat / m) as f32)
                                }
                            };
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu { x } => {
                let dx = val(*x).data().iter().zip(gout).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect();
                out.push((*x, dx));
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = val(*a).nchw().expect("checked");
                let cb = val(*b).nchw().expect("checked").1;
                let hw = h * w;
                let mut da = Vec::with_capacity(val(*a).numel());
                let mut db = Vec::with_capacity(val(*b).numel());
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    da.extend_from_slice(&gout[base..base + ca * hw]);
                    db.extend_from_slice(&gout[base + ca * hw..base + (ca + cb) * hw]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Add { a, b } => {
                out.push((*a, gout.to_vec()));
                out.push((*b, gout.to_vec()));
            }
            Op::Mul { a, b } => {
                let da = gout.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let db = gout.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Scale { x, s } => out.push((*x, gout.iter().map(|g| g * s).collect())),
            Op::Sum { x } => out.push((*x, vec![gout[0]; val(*x).numel()])),
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    out.push((v, vec![c * gout[0]]));
                }
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                for (v, g) in inputs.iter().zip(rule.backward(&ins, &node.value, gout)) {
                    if let Some(g) = g {
                        out.push((*v, g));
                    }
                }
            }
        }
        out
    }
}
