//! Encoder/decoder building blocks and parameter bookkeeping.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Mode, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const KERNEL: usize = 4;

/// Whether a visited tensor is trained or only carried along (running
/// statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Param,
    Buffer,
}

/// Hierarchical enumeration of a model's tensors.
///
/// Names are dotted paths such as `enc3.conv.kernel`; the visit order is
/// fixed and defines the order optimizer state is kept in.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, Slot));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, Slot));

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, slot| {
            if slot == Slot::Param {
                out.push((name, t));
            }
        });
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |name, t, slot| {
            if slot == Slot::Param {
                out.push((name, t));
            }
        });
        out
    }

    /// Parameters and buffers together.
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, _| out.push((name, t)));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |name, t, _| out.push((name, t)));
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Adds every gradient `graph` accumulated for this module's parameters.
    fn collect_grads(&mut self, graph: &Graph) -> Result<()> {
        for (_, t) in self.named_params_mut() {
            if let Some(g) = t.id().and_then(|id| graph.param_grad(id)) {
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal initialization with a fixed mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub mean: f32,
    pub std: f32,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme { mean: 0.0, std: 0.02 }
    }
}

/// Draws a trainable tensor i.i.d. from `N(mean, std²)`.
pub fn init_weights<R: Rng + ?Sized>(shape: &[usize], scheme: InitScheme, rng: &mut R) -> Result<Tensor> {
    let normal = Normal::new(scheme.mean, scheme.std)
        .map_err(|e| Error::invalid(format!("init scheme {scheme:?}: {e}")))?;
    let n = shape.iter().product();
    Tensor::parameter(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

/// Learned affine parameters plus running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: BatchStats,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: Tensor::parameter(&[channels], vec![1.0; channels])?,
            beta: Tensor::parameter(&[channels], vec![0.0; channels])?,
            stats: BatchStats::new(channels)?,
        })
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.batch_norm(x, gamma, beta, &mut self.stats, mode, BN_EPS, BN_MOMENTUM)
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, Slot)) {
        f(join(prefix, "gamma"), &self.gamma, Slot::Param);
        f(join(prefix, "beta"), &self.beta, Slot::Param);
        f(join(prefix, "running_mean"), &self.stats.mean, Slot::Buffer);
        f(join(prefix, "running_var"), &self.stats.var, Slot::Buffer);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, Slot)) {
        f(join(prefix, "gamma"), &mut self.gamma, Slot::Param);
        f(join(prefix, "beta"), &mut self.beta, Slot::Param);
        f(join(prefix, "running_mean"), &mut self.stats.mean, Slot::Buffer);
        f(join(prefix, "running_var"), &mut self.stats.var, Slot::Buffer);
    }
}

/// Convolution (or transposed convolution) weights with an optional bias.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, Slot)) {
        f(join(prefix, "kernel"), &self.kernel, Slot::Param);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, Slot::Param);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, Slot)) {
        f(join(prefix, "kernel"), &mut self.kernel, Slot::Param);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b, Slot::Param);
        }
    }

    fn bind(&self, g: &mut Graph) -> (Var, Option<Var>) {
        let k = g.param(&self.kernel);
        let b = self.bias.as_ref().map(|b| g.param(b));
        (k, b)
    }
}

fn zero_bias(channels: usize) -> Result<Tensor> {
    Tensor::parameter(&[channels], vec![0.0; channels])
}

/// `conv(4, stride, 1) -> [batch_norm] -> leaky_relu(slope)`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub conv: ConvParams,
    pub bn: Option<BatchNorm>,
    pub stride: usize,
    pub slope: f32,
}

impl EncoderBlock {
    /// The convolution carries a bias only when no batch norm follows it.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        use_batchnorm: bool,
        stride: usize,
        slope: f32,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        let kernel = init_weights(&[out_channels, in_channels, KERNEL, KERNEL], init, rng)?;
        let (bias, bn) = if use_batchnorm {
            (None, Some(BatchNorm::new(out_channels)?))
        } else {
            (Some(zero_bias(out_channels)?), None)
        };
        Ok(EncoderBlock {
            conv: ConvParams { kernel, bias },
            bn,
            stride,
            slope,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.conv.kernel.shape()[0]
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let [_, _, h, w] = g.value(x).dims4()?;
        if self.stride == 2 && (h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2) {
            return Err(Error::shape(format!(
                "down-sampling block needs even spatial dims >= 2, got {h}x{w}"
            )));
        }
        let (k, b) = self.conv.bind(g);
        let mut y = g.conv2d(x, k, b, self.stride, 1)?;
        if let Some(bn) = &mut self.bn {
            y = bn.forward(g, y, mode)?;
        }
        g.leaky_relu(y, self.slope)
    }
}

impl Module for EncoderBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, Slot)) {
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(bn) = &self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, Slot)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&join(prefix, "bn"), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f32),
    Tanh,
}

/// `conv_transpose(4, 2, 1) -> [batch_norm] -> dropout -> activation`,
/// followed by channel concatenation with a skip input when one is given.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub conv: ConvParams,
    pub bn: Option<BatchNorm>,
    pub dropout_rate: f32,
    pub activation: Activation,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        use_batchnorm: bool,
        dropout_rate: f32,
        activation: Activation,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        let kernel = init_weights(&[in_channels, out_channels, KERNEL, KERNEL], init, rng)?;
        let (bias, bn) = if use_batchnorm {
            (None, Some(BatchNorm::new(out_channels)?))
        } else {
            (Some(zero_bias(out_channels)?), None)
        };
        Ok(DecoderBlock {
            conv: ConvParams { kernel, bias },
            bn,
            dropout_rate,
            activation,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.kernel.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.conv.kernel.shape()[1]
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        x: Var,
        skip: Option<Var>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let [b, _, h, w] = g.value(x).dims4()?;
        if let Some(s) = skip {
            let [sb, _, sh, sw] = g.value(s).dims4()?;
            if (sb, sh, sw) != (b, 2 * h, 2 * w) {
                return Err(Error::shape(format!(
                    "skip input {:?} does not match up-sampled {b}x?x{}x{}",
                    g.shape(s),
                    2 * h,
                    2 * w
                )));
            }
        }
        let (k, bias) = self.conv.bind(g);
        let mut y = g.conv_transpose2d(x, k, bias, 2, 1)?;
        if let Some(bn) = &mut self.bn {
            y = bn.forward(g, y, mode)?;
        }
        y = g.dropout(y, self.dropout_rate, mode, rng)?;
        y = match self.activation {
            Activation::LeakyRelu(slope) => g.leaky_relu(y, slope)?,
            Activation::Tanh => g.tanh(y),
        };
        match skip {
            Some(s) => g.concat_channels(y, s),
            None => Ok(y),
        }
    }
}

impl Module for DecoderBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, Slot)) {
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(bn) = &self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, Slot)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&join(prefix, "bn"), f);
        }
    }
}
