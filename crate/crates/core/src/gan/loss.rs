//! Adversarial and reconstruction objectives, all reduced by the mean over
//! batch and patch positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]` before any logarithm.
pub const SCORE_EPS: f32 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GanLoss {
    /// Minimize `mean(log(1 - D(G(z))))`.
    Saturating,
    /// Minimize `-mean(log D(G(z)))`.
    #[default]
    NonSaturating,
}

impl std::str::FromStr for GanLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saturating" => Ok(GanLoss::Saturating),
            "non-saturating" => Ok(GanLoss::NonSaturating),
            other => Err(Error::invalid(format!("unknown gan loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for GanLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GanLoss::Saturating => "saturating",
            GanLoss::NonSaturating => "non-saturating",
        })
    }
}

fn clamped(g: &mut Graph, scores: Var) -> Var {
    g.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS)
}

/// `mean(log s)`
fn mean_log(g: &mut Graph, scores: Var) -> Var {
    let s = clamped(g, scores);
    let l = g.ln(s);
    g.mean(l)
}

/// `mean(log(1 - s))`
fn mean_log_complement(g: &mut Graph, scores: Var) -> Var {
    let s = clamped(g, scores);
    let c = g.affine(s, -1.0, 1.0);
    let l = g.ln(c);
    g.mean(l)
}

/// `-mean(log real) - mean(log(1 - fake))`: the negated discriminator
/// objective, so that lower is better for the discriminator.
pub fn discriminator_loss(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let real = mean_log(g, real_scores);
    let fake = mean_log_complement(g, fake_scores);
    let total = g.add(real, fake)?;
    Ok(g.scale(total, -1.0))
}

pub fn generator_loss(g: &mut Graph, fake_scores: Var, variant: GanLoss) -> Var {
    match variant {
        GanLoss::Saturating => mean_log_complement(g, fake_scores),
        GanLoss::NonSaturating => {
            let m = mean_log(g, fake_scores);
            g.scale(m, -1.0)
        }
    }
}

/// Mean absolute difference.
pub fn l1_loss(g: &mut Graph, generated: Var, target: Var) -> Result<Var> {
    let d = g.sub(generated, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn scores(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.01..0.99)).unwrap()
    }

    fn clamp_scalar(v: f32) -> f64 {
        v.clamp(SCORE_EPS, 1.0 - SCORE_EPS) as f64
    }

    fn loss_value(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item() as f64
    }

    #[test]
    fn discriminator_loss_analytic_points() {
        let half = Tensor::full(&[2, 1, 3, 3], 0.5).unwrap();
        let v = loss_value(|g| {
            let r = g.constant(half.clone());
            let f = g.constant(half.clone());
            discriminator_loss(g, r, f).unwrap()
        });
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-4, "{v}");

        let v = loss_value(|g| {
            let r = g.constant(Tensor::full(&[4], 1.0).unwrap());
            let f = g.constant(Tensor::full(&[4], 0.0).unwrap());
            discriminator_loss(g, r, f).unwrap()
        });
        assert!(v.abs() < 1e-5, "{v}");
    }

    #[test]
    fn generator_loss_analytic_points() {
        let half = Tensor::full(&[3, 1, 2, 2], 0.5).unwrap();
        let sat = loss_value(|g| {
            let f = g.constant(half.clone());
            generator_loss(g, f, GanLoss::Saturating)
        });
        let non = loss_value(|g| {
            let f = g.constant(half.clone());
            generator_loss(g, f, GanLoss::NonSaturating)
        });
        assert!((sat + 0.6931).abs() < 1e-4);
        assert!((non - 0.6931).abs() < 1e-4);
        let winning = loss_value(|g| {
            let f = g.constant(Tensor::full(&[5], 1.0).unwrap());
            generator_loss(g, f, GanLoss::NonSaturating)
        });
        assert!(winning.abs() < 1e-6);
    }

    #[test]
    fn losses_match_direct_summation() {
        for seed in 0..5 {
            let real = scores(&[2, 1, 6, 6], seed);
            let fake = scores(&[2, 1, 6, 6], seed + 100);
            let n = real.numel() as f64;
            let d_ref = -real.data().iter().map(|&v| clamp_scalar(v).ln()).sum::<f64>() / n
                - fake.data().iter().map(|&v| (1.0 - clamp_scalar(v)).ln()).sum::<f64>() / n;
            let sat_ref = fake.data().iter().map(|&v| (1.0 - clamp_scalar(v)).ln()).sum::<f64>() / n;
            let non_ref = -fake.data().iter().map(|&v| clamp_scalar(v).ln()).sum::<f64>() / n;

            let d = loss_value(|g| {
                let r = g.constant(real.clone());
                let f = g.constant(fake.clone());
                discriminator_loss(g, r, f).unwrap()
            });
            let sat = loss_value(|g| {
                let f = g.constant(fake.clone());
                generator_loss(g, f, GanLoss::Saturating)
            });
            let non = loss_value(|g| {
                let f = g.constant(fake.clone());
                generator_loss(g, f, GanLoss::NonSaturating)
            });
            assert!((d - d_ref).abs() < 1e-6, "{d} vs {d_ref}");
            assert!((sat - sat_ref).abs() < 1e-6, "{sat} vs {sat_ref}");
            assert!((non - non_ref).abs() < 1e-6, "{non} vs {non_ref}");
        }
    }

    #[test]
    fn l1_values_and_shape_error() {
        let a = scores(&[2, 3, 4, 4], 7);
        let shifted = Tensor::new(a.shape(), a.data().iter().map(|v| v + 0.5).collect()).unwrap();
        let mut g = Graph::new();
        let (av, sv) = (g.constant(a.clone()), g.constant(shifted));
        let same = l1_loss(&mut g, av, av).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let off = l1_loss(&mut g, sv, av).unwrap();
        assert!((g.value(off).item() - 0.5).abs() < 1e-6);

        let b = scores(&[2, 3, 4, 4], 8);
        let bv = g.constant(b.clone());
        let l = l1_loss(&mut g, av, bv).unwrap();
        let reference =
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.numel() as f64;
        assert!((g.value(l).item() as f64 - reference).abs() < 1e-6);

        let wrong = g.constant(Tensor::zeros(&[2, 3, 4, 5]).unwrap());
        assert!(l1_loss(&mut g, av, wrong).is_err());
    }

    #[test]
    fn discriminator_optimum_on_grid() {
        let eval = |r: f32, f: f32| {
            loss_value(|g| {
                let rv = g.constant(Tensor::full(&[4], r).unwrap());
                let fv = g.constant(Tensor::full(&[4], f).unwrap());
                discriminator_loss(g, rv, fv).unwrap()
            })
        };
        let grid: Vec<f32> = (1..=99).map(|i| i as f32 / 100.0).collect();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for &r in &grid {
            for &f in &grid {
                let v = eval(r, f);
                if v < best.0 {
                    best = (v, r, f);
                }
            }
        }
        assert_eq!((best.1, best.2), (0.99, 0.01));
        assert!(eval(1.0 - SCORE_EPS, SCORE_EPS) < best.0);
    }

    #[test]
    fn generator_variants_push_scores_the_same_way() {
        let fake = scores(&[1, 1, 4, 4], 9);
        for variant in [GanLoss::Saturating, GanLoss::NonSaturating] {
            let mut g = Graph::new();
            let f = g.leaf(fake.clone().with_requires_grad());
            let l = generator_loss(&mut g, f, variant);
            g.backward(l).unwrap();
            assert!(g.grad(f).unwrap().iter().all(|&d| d < 0.0), "{variant}");
        }
    }

    #[test]
    fn gan_loss_parses() {
        assert_eq!("saturating".parse::<GanLoss>().unwrap(), GanLoss::Saturating);
        assert_eq!("non-saturating".parse::<GanLoss>().unwrap(), GanLoss::NonSaturating);
        assert!("hinge".parse::<GanLoss>().is_err());
        assert_eq!(GanLoss::default(), GanLoss::NonSaturating);
    }
}
