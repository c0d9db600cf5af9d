use std::collections::HashMap;

use rand::Rng;

use super::conv::{self, ConvDims, Geometry};
use super::{Mode, ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running statistics maintained by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchStats {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchStats {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::full(&[channels], 1.0)?,
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    Tanh(Var),
    Sigmoid(Var),
    Dropout {
        input: Var,
        mask: Vec<f32>,
    },
    Concat(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: f32,
    },
    Abs(Var),
    Ln(Var),
    Clamp {
        input: Var,
        lo: f32,
        hi: f32,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Vec<f32>>,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, so the vector itself is a
/// topological order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Vec<Var>>,
    pinned: Option<PinnedPieces>,
}

#[derive(Debug)]
struct PinnedPieces {
    pattern: Vec<u8>,
    cursor: usize,
}

fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(grads: &mut [Option<Vec<f32>>], var: Var, delta: Vec<f32>) {
    match &mut grads[var.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose piecewise-linear nodes evaluate on the pieces recorded
    /// in `pattern` (as produced by [`Graph::kink_pattern`]) rather than on
    /// the pieces their inputs fall on. Where the two agree the values are
    /// identical; elsewhere each node extends its pinned piece linearly.
    pub fn with_pinned_pieces(pattern: Vec<u8>) -> Self {
        Graph {
            pinned: Some(PinnedPieces { pattern, cursor: 0 }),
            ..Self::default()
        }
    }

    fn next_pieces(&mut self, n: usize) -> Option<Vec<u8>> {
        let pinned = self.pinned.as_mut()?;
        let pieces = pinned.pattern.get(pinned.cursor..pinned.cursor + n)?.to_vec();
        pinned.cursor += n;
        Some(pieces)
    }

    fn piecewise(&mut self, input: Var, op: Op, natural: impl Fn(f32) -> u8, on_piece: impl Fn(f32, u8) -> f32) -> Var {
        let n = self.value(input).numel();
        let pieces = self.next_pieces(n);
        let src = self.value(input);
        let data = match pieces {
            Some(p) => src.data().iter().zip(p).map(|(&v, k)| on_piece(v, k)).collect(),
            None => src.data().iter().map(|&v| on_piece(v, natural(v))).collect(),
        };
        let value = Tensor::new(src.shape(), data).expect("same shape as input");
        let rg = self.needs(input);
        self.push(value, op, rg)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf. It takes part in differentiation iff the tensor
    /// requires grad; tensors carrying a [`ParamId`] can later be queried
    /// with [`Graph::param_grad`].
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let id = tensor.id();
        let mut value = tensor;
        value.clear_grad();
        let var = self.push(value, Op::Leaf, requires_grad);
        if let (true, Some(id)) = (requires_grad, id) {
            self.nodes[var.0].param = Some(id);
            self.params.entry(id).or_default().push(var);
        }
        var
    }

    /// Binds a model parameter by copying its current value.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.clone())
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.detached(), Op::Leaf, false)
    }

    /// A constant copy of `v`'s value: gradient flow stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.detached();
        self.push(value, Op::Leaf, false)
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Sum of the accumulated gradients of every leaf bound to `id`.
    pub fn param_grad(&self, id: ParamId) -> Option<Vec<f32>> {
        let mut total: Option<Vec<f32>> = None;
        for v in self.params.get(&id)? {
            if let Some(g) = &self.nodes[v.0].grad {
                match &mut total {
                    Some(t) => t.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => total = Some(g.clone()),
                }
            }
        }
        total
    }

    /// Which linear piece every input of a piecewise-linear node (leaky
    /// ReLU, abs, clamp) falls on. Evaluations whose patterns differ lie on
    /// opposite sides of a kink.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu { input, .. } | Op::Abs(input) => {
                    out.extend(self.value(input).data().iter().map(|&v| u8::from(v > 0.0)));
                }
                Op::Clamp { input, lo, hi } => {
                    out.extend(self.value(input).data().iter().map(|&v| u8::from(v >= lo) + u8::from(v > hi)));
                }
                _ => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn conv_dims(&self, input: Var, kernel: Var, transposed: bool, stride: usize, padding: usize) -> Result<ConvDims> {
        let [b, cin, h, w] = self.value(input).dims4()?;
        let [k0, k1, kh, kw] = self.value(kernel).dims4()?;
        if kh != kw {
            return Err(Error::shape(format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        let (kin, kout) = if transposed { (k0, k1) } else { (k1, k0) };
        if kin != cin {
            return Err(Error::shape(format!(
                "input has {cin} channels but kernel {:?} expects {kin}",
                self.shape(kernel)
            )));
        }
        let geom = if transposed {
            let oh = ((h - 1) * stride + kh).checked_sub(2 * padding).filter(|&v| v > 0);
            let ow = ((w - 1) * stride + kw).checked_sub(2 * padding).filter(|&v| v > 0);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::shape(format!(
                    "transposed convolution of {h}x{w} with kernel {kh}, stride {stride}, padding {padding} is empty"
                )));
            };
            Geometry::new(kout, oh, ow, kh, stride, padding)
                .filter(|g| g.out_h == h && g.out_w == w)
        } else {
            Geometry::new(cin, h, w, kh, stride, padding)
        };
        let geom = geom.ok_or_else(|| {
            Error::shape(format!(
                "kernel {kh} does not fit {h}x{w} input with padding {padding}"
            ))
        })?;
        Ok(ConvDims {
            batch: b,
            in_channels: cin,
            out_channels: kout,
            geom,
        })
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize) -> Result<()> {
        match bias {
            Some(b) if self.shape(b) != [channels] => Err(Error::shape(format!(
                "bias shape {:?} does not match {channels} output channels",
                self.shape(b)
            ))),
            _ => Ok(()),
        }
    }

    /// 2-d cross-correlation of `[B,Cin,H,W]` with a `[Cout,Cin,K,K]` kernel
    /// and zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let d = self.conv_dims(input, kernel, false, stride, padding)?;
        self.check_bias(bias, d.out_channels)?;
        let data = conv::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &d,
        );
        let shape = [d.batch, d.out_channels, d.geom.out_h, d.geom.out_w];
        let rg = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, stride, padding }, rg))
    }

    /// Transposed convolution with a `[Cin,Cout,K,K]` kernel; the adjoint of
    /// [`Graph::conv2d`] with the same kernel, stride and padding.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let d = self.conv_dims(input, kernel, true, stride, padding)?;
        self.check_bias(bias, d.out_channels)?;
        let data = conv::conv_transpose2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &d,
        );
        let shape = [d.batch, d.out_channels, d.geom.height, d.geom.width];
        let rg = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::ConvTranspose2d { input, kernel, bias, stride, padding }, rg))
    }

    /// Per-channel batch normalization over `(B, H, W)`.
    ///
    /// With batch statistics the running estimates are updated as
    /// `running = (1 - momentum) * running + momentum * batch`, using the
    /// unbiased batch variance; normalization itself uses the biased one.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut BatchStats,
        mode: Mode,
        eps: f32,
        momentum: f32,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("batch norm eps must be positive"));
        }
        let [b, c, h, w] = self.value(input).dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(format!("{name} shape {:?} for {c} channels", self.shape(v))));
            }
        }
        if running.mean.shape() != [c] || running.var.shape() != [c] {
            return Err(Error::shape(format!("running statistics do not cover {c} channels")));
        }
        let plane = h * w;
        let count = b * plane;
        let x = self.value(input).data();
        let batch_stats = mode.uses_batch_stats();
        let mut inv_std = vec![0.0f32; c];
        let mut means = vec![0.0f32; c];
        for ch in 0..c {
            let (mean, var) = if batch_stats {
                let mut sum = 0.0f64;
                for bi in 0..b {
                    let s = (bi * c + ch) * plane;
                    sum += x[s..s + plane].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for bi in 0..b {
                    let s = (bi * c + ch) * plane;
                    sq += x[s..s + plane].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
                }
                let biased = sq / count as f64;
                let unbiased = if count > 1 { sq / (count - 1) as f64 } else { biased };
                let rm = &mut running.mean.data_mut()[ch];
                *rm = (1.0 - momentum) * *rm + momentum * mean as f32;
                let rv = &mut running.var.data_mut()[ch];
                *rv = (1.0 - momentum) * *rv + momentum * unbiased as f32;
                (mean as f32, biased as f32)
            } else {
                (running.mean.data()[ch], running.var.data()[ch])
            };
            means[ch] = mean;
            inv_std[ch] = 1.0 / (var + eps).sqrt();
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut normalized = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let s = (bi * c + ch) * plane;
                for i in s..s + plane {
                    let n = (x[i] - means[ch]) * inv_std[ch];
                    normalized[i] = n;
                    out[i] = gd[ch] * n + bd[ch];
                }
            }
        }
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm { input, gamma, beta, normalized, inv_std, batch_stats },
            rg,
        ))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let src = self.value(input);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&v| f(v)).collect())
            .expect("same shape as input");
        let rg = self.needs(input);
        self.push(value, op, rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::invalid(format!("leaky slope {slope} outside [0, 1)")));
        }
        Ok(self.piecewise(
            input,
            Op::LeakyRelu { input, slope },
            |v| u8::from(v > 0.0),
            |v, k| if k == 1 { v } else { slope * v },
        ))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, f32::tanh, Op::Tanh(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, sigmoid_scalar, Op::Sigmoid(input))
    }

    /// Inverted dropout: in an active mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Otherwise, or when `rate == 0`, the input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f32, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !mode.dropout_active() || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(input).numel())
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let src = self.value(input);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape(), data)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} and {:?} along channels",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for bi in 0..ba {
            data.extend_from_slice(&da[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&db[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let value = Tensor::new(&[ba, ca + cb, ha, wa], data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("channel range {start}..{} of {c}", start + len)));
        }
        let plane = h * w;
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let s = (bi * c + start) * plane;
            data.extend_from_slice(&src[s..s + len * plane]);
        }
        let value = Tensor::new(&[b, len, h, w], data)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::SliceChannels { input, start }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "elementwise operands {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, input: Var, scale: f32, shift: f32) -> Var {
        self.unary(input, |v| scale * v + shift, Op::Affine { input, scale })
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        self.affine(input, factor, 0.0)
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.piecewise(input, Op::Abs(input), |v| u8::from(v > 0.0), |v, k| if k == 1 { v } else { -v })
    }

    /// Natural logarithm; callers clamp their input away from zero first.
    pub fn ln(&mut self, input: Var) -> Var {
        self.unary(input, f32::ln, Op::Ln(input))
    }

    pub fn clamp(&mut self, input: Var, lo: f32, hi: f32) -> Var {
        self.piecewise(
            input,
            Op::Clamp { input, lo, hi },
            |v| u8::from(v >= lo) + u8::from(v > hi),
            |v, k| match k {
                0 => lo,
                1 => v,
                _ => hi,
            },
        )
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let rg = self.needs(input);
        self.push(Tensor::scalar(s as f32), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar((s / t.numel() as f64) as f32);
        let rg = self.needs(input);
        self.push(value, Op::Mean(input), rg)
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// Every differentiable leaf reachable from `loss` has its gradient
    /// incremented; leaf gradients persist across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
            } else {
                self.propagate(node, &g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            let slot = &mut self.nodes[i].grad;
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let map = |v: Var, f: &dyn Fn(usize) -> f32| -> Vec<f32> {
            (0..self.nodes[v.0].value.numel()).map(f).collect()
        };
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Conv2d { input, kernel, bias, stride, padding }
            | Op::ConvTranspose2d { input, kernel, bias, stride, padding } => {
                let transposed = matches!(node.op, Op::ConvTranspose2d { .. });
                let d = self
                    .conv_dims(*input, *kernel, transposed, *stride, *padding)
                    .expect("geometry validated on forward");
                let want = [self.needs(*input), self.needs(*kernel), bias.is_some_and(|b| self.needs(b))];
                let backward = if transposed {
                    conv::conv_transpose2d_backward
                } else {
                    conv::conv2d_backward
                };
                let (di, dk, db) = backward(val(*input), val(*kernel), g, &d, want);
                if let Some(di) = di {
                    add_into(grads, *input, di);
                }
                if let Some(dk) = dk {
                    add_into(grads, *kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    add_into(grads, *b, db);
                }
            }
            Op::BatchNorm { input, gamma, beta, normalized, inv_std, batch_stats } => {
                let [b, c, h, w] = node.value.dims4().expect("4-d");
                let plane = h * w;
                let count = (b * plane) as f64;
                let gd = val(*gamma);
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let s = (bi * c + ch) * plane;
                        for i in s..s + plane {
                            sum_dy[ch] += g[i] as f64;
                            sum_dy_xhat[ch] += (g[i] * normalized[i]) as f64;
                        }
                    }
                }
                if self.needs(*input) {
                    let mut dx = vec![0.0f32; g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let s = (bi * c + ch) * plane;
                            let scale = gd[ch] * inv_std[ch];
                            if *batch_stats {
                                let mean_dy = (sum_dy[ch] / count) as f32;
                                let mean_dy_xhat = (sum_dy_xhat[ch] / count) as f32;
                                for i in s..s + plane {
                                    dx[i] = scale * (g[i] - mean_dy - normalized[i] * mean_dy_xhat);
                                }
                            } else {
                                for i in s..s + plane {
                                    dx[i] = scale * g[i];
                                }
                            }
                        }
                    }
                    add_into(grads, *input, dx);
                }
                if self.needs(*gamma) {
                    add_into(grads, *gamma, sum_dy_xhat.iter().map(|&v| v as f32).collect());
                }
                if self.needs(*beta) {
                    add_into(grads, *beta, sum_dy.iter().map(|&v| v as f32).collect());
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = val(*input);
                let d = map(*input, &|i| if x[i] > 0.0 { g[i] } else { slope * g[i] });
                add_into(grads, *input, d);
            }
            Op::Tanh(input) => {
                let y = node.value.data();
                add_into(grads, *input, map(*input, &|i| g[i] * (1.0 - y[i] * y[i])));
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                add_into(grads, *input, map(*input, &|i| g[i] * y[i] * (1.0 - y[i])));
            }
            Op::Dropout { input, mask } => {
                add_into(grads, *input, map(*input, &|i| g[i] * mask[i]));
            }
            Op::Concat(a, b) => {
                let [bn, c, h, w] = node.value.dims4().expect("4-d");
                let plane = h * w;
                let ca = self.shape(*a)[1];
                let cb = c - ca;
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for bi in 0..bn {
                    let s = bi * c * plane;
                    ga.extend_from_slice(&g[s..s + ca * plane]);
                    gb.extend_from_slice(&g[s + ca * plane..s + (ca + cb) * plane]);
                }
                if self.needs(*a) {
                    add_into(grads, *a, ga);
                }
                if self.needs(*b) {
                    add_into(grads, *b, gb);
                }
            }
            Op::SliceChannels { input, start } => {
                let [b, c, h, w] = self.value(*input).dims4().expect("4-d");
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut d = vec![0.0; b * c * plane];
                for bi in 0..b {
                    let dst = (bi * c + start) * plane;
                    let src = bi * len * plane;
                    d[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                }
                add_into(grads, *input, d);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    add_into(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    add_into(grads, *b, g.iter().map(|v| sign * v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if self.needs(*a) {
                    add_into(grads, *a, map(*a, &|i| g[i] * y[i]));
                }
                if self.needs(*b) {
                    add_into(grads, *b, map(*b, &|i| g[i] * x[i]));
                }
            }
            Op::Affine { input, scale } => {
                add_into(grads, *input, g.iter().map(|v| scale * v).collect());
            }
            Op::Abs(input) => {
                let x = val(*input);
                let d = map(*input, &|i| match x[i] {
                    v if v > 0.0 => g[i],
                    v if v < 0.0 => -g[i],
                    _ => 0.0,
                });
                add_into(grads, *input, d);
            }
            Op::Ln(input) => {
                let x = val(*input);
                add_into(grads, *input, map(*input, &|i| g[i] / x[i]));
            }
            Op::Clamp { input, lo, hi } => {
                let x = val(*input);
                let d = map(*input, &|i| if x[i] >= *lo && x[i] <= *hi { g[i] } else { 0.0 });
                add_into(grads, *input, d);
            }
            Op::Sum(input) => {
                add_into(grads, *input, map(*input, &|_| g[0]));
            }
            Op::Mean(input) => {
                let n = self.value(*input).numel() as f32;
                add_into(grads, *input, map(*input, &|_| g[0] / n));
            }
        }
    }
}
