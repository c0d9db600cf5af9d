//! Central-difference verification of autodiff gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const PROJECTION_SEED: u64 = 0x6772_6164;

/// How a non-scalar output is reduced to the scalar that gets
/// differentiated. Scalar outputs are used as they are.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Projection {
    /// Weights of random sign with magnitude in `[0.5, 1.5)`.
    #[default]
    Signed,
    /// Weights in `[0.5, 1.5)`.
    Positive,
}

impl Projection {
    /// The weights for an output of `len` elements, drawn from a fixed seed.
    pub fn weights(self, len: usize) -> Vec<f32> {
        if len == 1 {
            return vec![1.0];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        (0..len)
            .map(|_| {
                let m: f32 = rng.gen_range(0.5..1.5);
                match self {
                    Projection::Signed if rng.gen_bool(0.5) => -m,
                    _ => m,
                }
            })
            .collect()
    }

    /// `Σ r·y` accumulated in `f64`.
    pub fn value(self, output: &Tensor) -> f64 {
        let r = self.weights(output.numel());
        output.data().iter().zip(&r).map(|(&y, &w)| y as f64 * w as f64).sum()
    }

    /// Appends the projection of `out` to the graph, returning a scalar.
    pub fn apply(self, g: &mut Graph, out: Var) -> Result<Var> {
        let value = g.value(out);
        if value.numel() == 1 {
            return Ok(out);
        }
        let r = Tensor::new(value.shape(), self.weights(value.numel()))?;
        let rv = g.constant(r);
        let p = g.mul(out, rv)?;
        Ok(g.sum(p))
    }
}

/// `|a - n| / (|a| + |n| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor], projection: Projection) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(projection.value(g.value(out)))
}

/// Autodiff gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor], projection: Projection) -> Result<Vec<Vec<f32>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.detached().with_requires_grad()))
        .collect();
    let out = f(&mut g, &vars)?;
    let loss = projection.apply(&mut g, out)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
        .collect())
}

/// Compares autodiff against central differences at the listed
/// `(input, element)` positions. Non-scalar outputs are reduced with
/// [`projection_weights`].
///
/// `f` must be deterministic: it is re-run twice per position on a fresh
/// graph. The step actually taken is measured after `f32` rounding.
pub fn gradcheck_sampled<F>(
    f: F,
    inputs: &[Tensor],
    epsilon: f32,
    projection: Projection,
    positions: &[(usize, usize)],
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::invalid("gradcheck epsilon must be positive"));
    }
    let analytic = analytic_gradients(&f, inputs, projection)?;
    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for &(i, j) in positions {
        let original = inputs[i].data()[j];
        let plus = original + epsilon;
        let minus = original - epsilon;
        probe[i].data_mut()[j] = plus;
        let fp = evaluate(&f, &probe, projection)?;
        probe[i].data_mut()[j] = minus;
        let fm = evaluate(&f, &probe, projection)?;
        probe[i].data_mut()[j] = original;

        let numeric = (fp - fm) / (plus as f64 - minus as f64);
        let a = analytic[i][j] as f64;
        let err = relative_error(a, numeric);
        if err > report.max_relative_error || report.checked == 0 {
            report.max_relative_error = err;
            report.worst = (i, j);
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Full sweep over every element of every input, with the signed
/// projection.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], epsilon: f32) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, inputs, epsilon, Projection::Signed)
}

/// Full sweep over every element of every input.
pub fn gradcheck_with<F>(f: F, inputs: &[Tensor], epsilon: f32, projection: Projection) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let positions: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    gradcheck_sampled(f, inputs, epsilon, projection, &positions)
}
