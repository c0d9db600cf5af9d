//! Finite-difference checks of every differentiable graph operation and of
//! the full generator.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gan::{discriminator_loss, generator_loss, l1_loss, GanLoss, Generator, GeneratorConfig};
use crate::nn::{Module, BN_EPS, BN_MOMENTUM};
use crate::tensor::{
    gradcheck_with, relative_error, BatchStats, Graph, GradcheckReport, Mode, Projection, Tensor, Var,
};

pub const DEFAULT_EPSILON: f32 = 1e-3;
/// Outer step of the fourth-order difference used by [`unet_gradcheck`].
pub const UNET_STEP: f32 = 1e-2;
pub const DEFAULT_SEEDS: u64 = 10;
pub const POINTWISE_TOLERANCE: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-2;
/// Scalar generator parameters sampled by [`unet_gradcheck`].
pub const UNET_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOp {
    Conv2d,
    ConvTranspose2d,
    BatchNorm,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Dropout,
    ConcatChannels,
    SliceChannels,
    Add,
    Sub,
    Mul,
    Affine,
    Abs,
    Ln,
    Clamp,
    Sum,
    Mean,
    DiscriminatorLoss,
    GeneratorLossSaturating,
    GeneratorLossNonSaturating,
    L1Loss,
}

impl GradOp {
    pub const ALL: [GradOp; 22] = [
        GradOp::Conv2d,
        GradOp::ConvTranspose2d,
        GradOp::BatchNorm,
        GradOp::LeakyRelu,
        GradOp::Tanh,
        GradOp::Sigmoid,
        GradOp::Dropout,
        GradOp::ConcatChannels,
        GradOp::SliceChannels,
        GradOp::Add,
        GradOp::Sub,
        GradOp::Mul,
        GradOp::Affine,
        GradOp::Abs,
        GradOp::Ln,
        GradOp::Clamp,
        GradOp::Sum,
        GradOp::Mean,
        GradOp::DiscriminatorLoss,
        GradOp::GeneratorLossSaturating,
        GradOp::GeneratorLossNonSaturating,
        GradOp::L1Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Conv2d => "conv2d",
            GradOp::ConvTranspose2d => "conv_transpose2d",
            GradOp::BatchNorm => "batch_norm",
            GradOp::LeakyRelu => "leaky_relu",
            GradOp::Tanh => "tanh",
            GradOp::Sigmoid => "sigmoid",
            GradOp::Dropout => "dropout",
            GradOp::ConcatChannels => "concat_channels",
            GradOp::SliceChannels => "slice_channels",
            GradOp::Add => "add",
            GradOp::Sub => "sub",
            GradOp::Mul => "mul",
            GradOp::Affine => "affine",
            GradOp::Abs => "abs",
            GradOp::Ln => "ln",
            GradOp::Clamp => "clamp",
            GradOp::Sum => "sum",
            GradOp::Mean => "mean",
            GradOp::DiscriminatorLoss => "discriminator_loss",
            GradOp::GeneratorLossSaturating => "generator_loss_saturating",
            GradOp::GeneratorLossNonSaturating => "generator_loss_non_saturating",
            GradOp::L1Loss => "l1_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<GradOp> {
        GradOp::ALL.into_iter().find(|op| op.name() == name)
    }

    /// Elementwise operations are held to the tighter bound.
    pub fn is_pointwise(self) -> bool {
        matches!(
            self,
            GradOp::LeakyRelu
                | GradOp::Tanh
                | GradOp::Sigmoid
                | GradOp::Dropout
                | GradOp::Add
                | GradOp::Sub
                | GradOp::Mul
                | GradOp::Affine
                | GradOp::Abs
                | GradOp::Ln
                | GradOp::Clamp
        )
    }

    /// Convolutions are checked at all-positive points under a positive
    /// projection, so no gradient element is a near-cancelling sum.
    pub fn projection(self) -> Projection {
        match self {
            GradOp::Conv2d | GradOp::ConvTranspose2d => Projection::Positive,
            _ => Projection::Signed,
        }
    }

    pub fn tolerance(self) -> f64 {
        if self.is_pointwise() {
            POINTWISE_TOLERANCE
        } else {
            TOLERANCE
        }
    }
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).expect("non-empty shape")
}

/// Values with magnitude in `[lo, hi)` and random sign, keeping inputs off
/// the kinks of piecewise-linear operations.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("non-empty shape")
}

fn case(op: GradOp, seed: u64) -> (Vec<Tensor>, OpFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = [2, 3, 4, 4];
    let unary = |x: Tensor, f: fn(&mut Graph, Var) -> Result<Var>| -> (Vec<Tensor>, OpFn) {
        (vec![x], Box::new(move |g: &mut Graph, v: &[Var]| f(g, v[0])))
    };
    match op {
        GradOp::Conv2d => {
            let x = uniform(&mut rng, &[2, 3, 7, 7], 0.1, 1.0);
            let k = uniform(&mut rng, &[4, 3, 3, 3], 0.1, 0.5);
            let b = uniform(&mut rng, &[4], -0.5, 0.5);
            (
                vec![x, k, b],
                Box::new(move |g, v| {
                    g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
                }),
            )
        }
        GradOp::ConvTranspose2d => {
            let x = uniform(&mut rng, &[2, 4, 3, 3], 0.1, 1.0);
            let k = uniform(&mut rng, &[4, 3, 4, 4], 0.1, 0.5);
            let b = uniform(&mut rng, &[3], -0.5, 0.5);
            (
                vec![x, k, b],
                Box::new(move |g, v| {
                    g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)
                }),
            )
        }
        GradOp::BatchNorm => {
            let x = uniform(&mut rng, &[4, 3, 6, 6], -1.0, 1.0);
            let gamma = uniform(&mut rng, &[3], 0.5, 1.5);
            let beta = uniform(&mut rng, &[3], -0.5, 0.5);
            (
                vec![x, gamma, beta],
                Box::new(move |g, v| {
                    let mut stats = BatchStats::new(3)?;
                    g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train, BN_EPS, BN_MOMENTUM)
                }),
            )
        }
        GradOp::LeakyRelu => {
            let x = signed(&mut rng, &act, 0.1, 2.0);
            unary(x, |g, v| g.leaky_relu(v, 0.2))
        }
        GradOp::Tanh => {
            let x = uniform(&mut rng, &act, -1.5, 1.5);
            unary(x, |g, v| Ok(g.tanh(v)))
        }
        GradOp::Sigmoid => {
            let x = uniform(&mut rng, &act, -2.5, 2.5);
            unary(x, |g, v| Ok(g.sigmoid(v)))
        }
        GradOp::Dropout => {
            let x = uniform(&mut rng, &act, -1.0, 1.0);
            let mask_seed = rng.gen();
            (
                vec![x],
                Box::new(move |g, v| {
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    g.dropout(v[0], 0.5, Mode::Train, &mut mask_rng)
                }),
            )
        }
        GradOp::ConcatChannels => {
            let a = uniform(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
            let b = uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |g, v| {
                    g.concat_channels(v[0], v[1])
                }),
            )
        }
        GradOp::SliceChannels => {
            let x = uniform(&mut rng, &[2, 5, 4, 4], -1.0, 1.0);
            (
                vec![x],
                Box::new(move |g, v| {
                    g.slice_channels(v[0], 1, 3)
                }),
            )
        }
        GradOp::Add | GradOp::Sub | GradOp::Mul => {
            let a = uniform(&mut rng, &act, -1.0, 1.0);
            let b = uniform(&mut rng, &act, -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |g, v| {
                    match op {
                        GradOp::Add => g.add(v[0], v[1]),
                        GradOp::Sub => g.sub(v[0], v[1]),
                        _ => g.mul(v[0], v[1]),
                    }
                }),
            )
        }
        GradOp::Affine => {
            let x = uniform(&mut rng, &act, -1.0, 1.0);
            unary(x, |g, v| Ok(g.affine(v, -1.7, 0.3)))
        }
        GradOp::Abs => {
            let x = signed(&mut rng, &act, 0.1, 2.0);
            unary(x, |g, v| Ok(g.abs(v)))
        }
        GradOp::Ln => {
            let x = uniform(&mut rng, &act, 0.5, 2.0);
            unary(x, |g, v| Ok(g.ln(v)))
        }
        GradOp::Clamp => {
            // bounds at ±0.5; inputs stay at least 0.1 away from them
            let x = Tensor::from_fn(&act, |_| {
                let m = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.4) } else { rng.gen_range(0.6..1.2) };
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .expect("non-empty shape");
            unary(x, |g, v| Ok(g.clamp(v, -0.5, 0.5)))
        }
        GradOp::Sum => {
            let x = uniform(&mut rng, &act, -1.0, 1.0);
            (vec![x], Box::new(|g, v| Ok(g.sum(v[0]))))
        }
        GradOp::Mean => {
            let x = uniform(&mut rng, &act, -1.0, 1.0);
            (vec![x], Box::new(|g, v| Ok(g.mean(v[0]))))
        }
        GradOp::DiscriminatorLoss => {
            let real = uniform(&mut rng, &[2, 1, 3, 3], 0.05, 0.95);
            let fake = uniform(&mut rng, &[2, 1, 3, 3], 0.05, 0.95);
            (vec![real, fake], Box::new(|g, v| discriminator_loss(g, v[0], v[1])))
        }
        GradOp::GeneratorLossSaturating | GradOp::GeneratorLossNonSaturating => {
            let variant = if op == GradOp::GeneratorLossSaturating {
                GanLoss::Saturating
            } else {
                GanLoss::NonSaturating
            };
            let fake = uniform(&mut rng, &[2, 1, 3, 3], 0.05, 0.95);
            (vec![fake], Box::new(move |g, v| Ok(generator_loss(g, v[0], variant))))
        }
        GradOp::L1Loss => {
            let a = uniform(&mut rng, &act, -1.0, 1.0);
            let offset = signed(&mut rng, &act, 0.1, 1.0);
            let b = Tensor::new(&act, a.data().iter().zip(offset.data()).map(|(x, o)| x + o).collect())
                .expect("same shape");
            (vec![a, b], Box::new(|g, v| l1_loss(g, v[0], v[1])))
        }
    }
}

/// Full-sweep check of one operation at the point drawn from `seed`.
pub fn check_op(op: GradOp, seed: u64, epsilon: f32) -> Result<GradcheckReport> {
    let (inputs, f) = case(op, seed);
    gradcheck_with(f, &inputs, epsilon, op.projection())
}

/// Worst result of one operation over several seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct OpSummary {
    pub op: GradOp,
    pub max_relative_error: f64,
    pub worst_seed: u64,
    pub tolerance: f64,
    pub checked: usize,
}

impl OpSummary {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

pub fn check_op_seeds(op: GradOp, seeds: u64, epsilon: f32) -> Result<OpSummary> {
    let mut summary = OpSummary {
        op,
        max_relative_error: 0.0,
        worst_seed: 0,
        tolerance: op.tolerance(),
        checked: 0,
    };
    for seed in 0..seeds {
        let r = check_op(op, seed, epsilon)?;
        if r.max_relative_error > summary.max_relative_error {
            summary.max_relative_error = r.max_relative_error;
            summary.worst_seed = seed;
        }
        summary.checked += r.checked;
    }
    Ok(summary)
}

/// Every operation, or only those listed in `only`.
pub fn run_suite(only: &[GradOp], seeds: u64, epsilon: f32) -> Result<Vec<OpSummary>> {
    let ops: Vec<GradOp> = if only.is_empty() { GradOp::ALL.to_vec() } else { only.to_vec() };
    ops.into_iter().map(|op| check_op_seeds(op, seeds, epsilon)).collect()
}

/// The small U-Net used for the end-to-end check: 3 levels, so a 16×16
/// input reaches a 2×2 bottleneck.
pub fn unet_toy_config() -> GeneratorConfig {
    GeneratorConfig {
        depth: 3,
        base_channels: 4,
        ..GeneratorConfig::default()
    }
}

/// Compares generator parameter gradients with central differences on
/// `samples` randomly chosen scalar parameters.
///
/// The loss is the fixed projection of the training-mode output for a
/// batch of two 16×16 images. Dropout draws are replayed from one seed on
/// every evaluation so the function is deterministic.
pub fn unet_gradcheck(seed: u64, samples: usize, step: f32) -> Result<GradcheckReport> {
    unet_gradcheck_with(&unet_toy_config(), 2, 16, seed, samples, step)
}

/// [`unet_gradcheck`] for an arbitrary generator, batch and image size.
///
/// The numeric derivative is the fourth-order central difference
/// `(8(f(+h/2) - f(-h/2)) - (f(+h) - f(-h))) / 6h`. Every probe is evaluated
/// on the linear pieces that the activations, clamps and absolute values
/// occupy at the unperturbed point (see [`Graph::with_pinned_pieces`]), so
/// a probe that happens to cross a kink still measures the slope at the
/// point itself.
pub fn unet_gradcheck_with(
    config: &GeneratorConfig,
    batch: usize,
    size: usize,
    seed: u64,
    samples: usize,
    step: f32,
) -> Result<GradcheckReport> {
    if step <= 0.0 {
        return Err(Error::invalid("gradcheck step must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Generator::new(config.clone(), &mut rng)?;
    let input = uniform(&mut rng, &[batch, config.image_channels, size, size], -1.0, 1.0);
    let dropout_seed: u64 = rng.gen();

    let mut model = base.clone();
    model.zero_grad();
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = model.forward(&mut g, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(dropout_seed))?;
    let pieces = g.kink_pattern();
    let loss = Projection::Signed.apply(&mut g, y)?;
    g.backward(loss)?;
    model.collect_grads(&g)?;
    let grads: Vec<Vec<f32>> = model
        .named_params()
        .iter()
        .map(|(_, t)| t.grad().expect("zeroed above").to_vec())
        .collect();

    let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let locate = |mut flat: usize| -> (usize, usize) {
        for (i, &n) in sizes.iter().enumerate() {
            if flat < n {
                return (i, flat);
            }
            flat -= n;
        }
        unreachable!("index below total")
    };

    let evaluate = |param: usize, elem: usize, value: f32| -> Result<f64> {
        let mut probe = base.clone();
        probe.named_params_mut()[param].1.data_mut()[elem] = value;
        let mut g = Graph::with_pinned_pieces(pieces.clone());
        let x = g.constant(input.clone());
        let y = probe.forward(&mut g, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(dropout_seed))?;
        Ok(Projection::Signed.value(g.value(y)))
    };
    let central = |param: usize, elem: usize, original: f32, h: f32| -> Result<f64> {
        let (plus, minus) = (original + h, original - h);
        Ok((evaluate(param, elem, plus)? - evaluate(param, elem, minus)?) / (plus as f64 - minus as f64))
    };

    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for flat in sample(&mut rng, total, samples.min(total)) {
        let (p, e) = locate(flat);
        let original = base.named_params()[p].1.data()[e];
        let numeric = (4.0 * central(p, e, original, step / 2.0)? - central(p, e, original, step)?) / 3.0;
        let analytic = grads[p][e] as f64;
        let err = relative_error(analytic, numeric);
        if err > report.max_relative_error || report.checked == 0 {
            report = GradcheckReport {
                max_relative_error: err,
                worst: (p, e),
                analytic,
                numeric,
                checked: report.checked,
            };
        }
        report.checked += 1;
    }
    Ok(report)
}
