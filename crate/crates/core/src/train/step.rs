//! One alternating update: the discriminator first, then the generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::gan::{discriminator_loss, generator_loss, l1_loss, AdamState, Discriminator, Generator};
use crate::nn::Module;
use crate::tensor::{Graph, Mode, Tensor, Var};

/// Per-step losses and mean discriminator scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based index of the step over the whole run.
    pub step: u64,
    /// 1-based epoch the step belongs to.
    pub epoch: u64,
    pub d_loss: f32,
    pub g_loss_adv: f32,
    pub g_loss_l1: f32,
    pub d_real: f32,
    pub d_fake: f32,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        [self.d_loss, self.g_loss_adv, self.g_loss_l1, self.d_real, self.d_fake]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// The graph of one step. The generator runs forward once; both phases
/// extend the same graph from its output.
pub struct StepGraph {
    pub graph: Graph,
    pub satellite: Var,
    pub real: Var,
    pub fake: Var,
}

impl StepGraph {
    pub fn build<R: Rng + ?Sized>(batch: &Batch, generator: &mut Generator, rng: &mut R) -> Result<Self> {
        let mut graph = Graph::new();
        let satellite = graph.constant(batch.satellite.clone());
        let real = graph.constant(batch.map_img.clone());
        let fake = generator.forward(&mut graph, satellite, Mode::Train, rng)?;
        Ok(StepGraph {
            graph,
            satellite,
            real,
            fake,
        })
    }

    pub fn fake_value(&self) -> &Tensor {
        self.graph.value(self.fake)
    }

    fn checked(&self, term: &str, v: Var) -> Result<f32> {
        let value = self.graph.value(v).item();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite {
                term: term.to_string(),
                value,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorReport {
    pub loss: f32,
    pub real_mean: f32,
    pub fake_mean: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorReport {
    pub adv: f32,
    pub l1: f32,
}

/// Scores real and generated pairs, backpropagates the discriminator loss
/// and updates the discriminator. The generated image enters through a
/// detached copy.
pub fn discriminator_phase(
    sg: &mut StepGraph,
    discriminator: &mut Discriminator,
    opt: &mut AdamState,
) -> Result<DiscriminatorReport> {
    discriminator.zero_grad();
    sg.graph.zero_grad();
    let fake = sg.graph.detach(sg.fake);
    let real_scores = discriminator.forward(&mut sg.graph, sg.satellite, sg.real, Mode::Train)?;
    let fake_scores = discriminator.forward(&mut sg.graph, sg.satellite, fake, Mode::Train)?;
    let loss = discriminator_loss(&mut sg.graph, real_scores, fake_scores)?;
    let report = DiscriminatorReport {
        loss: sg.checked("d_loss", loss)?,
        real_mean: sg.graph.value(real_scores).mean(),
        fake_mean: sg.graph.value(fake_scores).mean(),
    };
    sg.graph.backward(loss)?;
    discriminator.collect_grads(&sg.graph)?;
    opt.step(discriminator)?;
    Ok(report)
}

/// Backpropagates the weighted generator objective through fresh
/// discriminator scores and updates the generator only.
pub fn generator_phase(
    sg: &mut StepGraph,
    generator: &mut Generator,
    discriminator: &mut Discriminator,
    opt: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<GeneratorReport> {
    generator.zero_grad();
    sg.graph.zero_grad();
    let mut terms = Vec::new();
    let mut report = GeneratorReport { adv: 0.0, l1: 0.0 };
    if cfg.adv_weight > 0.0 {
        let scores = discriminator.forward(&mut sg.graph, sg.satellite, sg.fake, Mode::Train)?;
        let adv = generator_loss(&mut sg.graph, scores, cfg.gan_loss);
        report.adv = sg.checked("g_loss_adv", adv)?;
        terms.push(sg.graph.scale(adv, cfg.adv_weight));
    }
    if cfg.l1_weight > 0.0 {
        let l1 = l1_loss(&mut sg.graph, sg.fake, sg.real)?;
        report.l1 = sg.checked("g_loss_l1", l1)?;
        terms.push(sg.graph.scale(l1, cfg.l1_weight));
    }
    let mut total = *terms.first().ok_or_else(|| Error::invalid("generator objective has no terms"))?;
    for &t in &terms[1..] {
        total = sg.graph.add(total, t)?;
    }
    sg.graph.backward(total)?;
    generator.collect_grads(&sg.graph)?;
    opt.step(generator)?;
    Ok(report)
}

/// One full update on `batch`. The returned metrics carry step and epoch 0;
/// the caller numbers them.
pub fn train_step<R: Rng + ?Sized>(
    batch: &Batch,
    generator: &mut Generator,
    discriminator: &mut Discriminator,
    g_opt: &mut AdamState,
    d_opt: &mut AdamState,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(StepMetrics, Tensor)> {
    let mut sg = StepGraph::build(batch, generator, rng)?;
    let mut d = discriminator_phase(&mut sg, discriminator, d_opt)?;
    for _ in 1..cfg.d_steps {
        d.loss = discriminator_phase(&mut sg, discriminator, d_opt)?.loss;
    }
    let g = generator_phase(&mut sg, generator, discriminator, g_opt, cfg)?;
    let metrics = StepMetrics {
        step: 0,
        epoch: 0,
        d_loss: d.loss,
        g_loss_adv: g.adv,
        g_loss_l1: g.l1,
        d_real: d.real_mean,
        d_fake: d.fake_mean,
    };
    Ok((metrics, sg.fake_value().clone()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::synthetic::synthetic_pair;
    use crate::data::Dataset;
    use crate::gan::{DiscriminatorConfig, GeneratorConfig};

    fn setup(seed: u64) -> (Generator, Discriminator, AdamState, AdamState, TrainConfig, Batch) {
        let cfg = TrainConfig {
            resize_to: 32,
            generator: GeneratorConfig { depth: 5, base_channels: 4, ..Default::default() },
            discriminator: DiscriminatorConfig { base_channels: 4, ..Default::default() },
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Generator::new(cfg.generator.clone(), &mut rng).unwrap();
        let d = Discriminator::new(cfg.discriminator.clone(), &mut rng).unwrap();
        let g_opt = AdamState::new(cfg.adam(), &g).unwrap();
        let d_opt = AdamState::new(cfg.adam(), &d).unwrap();
        let ds = Dataset::from_samples((0..2).map(|i| synthetic_pair(32, seed + i)).collect()).unwrap();
        let batch = ds.load_batch(&[0, 1]).unwrap();
        (g, d, g_opt, d_opt, cfg, batch)
    }

    fn snapshot<M: Module>(m: &M) -> Vec<Vec<f32>> {
        m.named_tensors().into_iter().map(|(_, t)| t.data().to_vec()).collect()
    }

    #[test]
    fn generator_grads_are_zero_after_discriminator_phase() {
        let (mut g, mut d, _, mut d_opt, _, batch) = setup(1);
        let mut sg = StepGraph::build(&batch, &mut g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        discriminator_phase(&mut sg, &mut d, &mut d_opt).unwrap();
        g.zero_grad();
        g.collect_grads(&sg.graph).unwrap();
        for (name, t) in g.named_params() {
            assert!(t.grad().unwrap().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn phases_touch_only_their_own_model() {
        let (mut g, mut d, mut g_opt, mut d_opt, cfg, batch) = setup(2);
        let mut sg = StepGraph::build(&batch, &mut g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (g0, d0) = (snapshot(&g), snapshot(&d));
        discriminator_phase(&mut sg, &mut d, &mut d_opt).unwrap();
        assert_eq!(snapshot(&g), g0);
        assert_ne!(snapshot(&d), d0);

        let d_params = |d: &Discriminator| -> Vec<Vec<f32>> {
            d.named_params().into_iter().map(|(_, t)| t.data().to_vec()).collect()
        };
        let d1 = d_params(&d);
        generator_phase(&mut sg, &mut g, &mut d, &mut g_opt, &cfg).unwrap();
        assert_eq!(d_params(&d), d1);
        assert_ne!(snapshot(&g), g0);
        assert_eq!((g_opt.step, d_opt.step), (1, 1));
    }

    #[test]
    fn disabled_l1_reports_zero() {
        let (mut g, mut d, mut g_opt, mut d_opt, cfg, batch) = setup(3);
        let (m, fake) =
            train_step(&batch, &mut g, &mut d, &mut g_opt, &mut d_opt, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert_eq!(m.g_loss_l1, 0.0);
        assert!(m.is_finite());
        assert!(m.d_real > 0.0 && m.d_real < 1.0 && m.d_fake > 0.0 && m.d_fake < 1.0);
        assert_eq!(fake.shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn l1_only_leaves_discriminator_out_of_generator_phase() {
        let (mut g, mut d, mut g_opt, mut d_opt, mut cfg, batch) = setup(4);
        cfg.adv_weight = 0.0;
        cfg.l1_weight = 1.0;
        let (m, _) =
            train_step(&batch, &mut g, &mut d, &mut g_opt, &mut d_opt, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert_eq!(m.g_loss_adv, 0.0);
        assert!(m.g_loss_l1 > 0.0);
    }
}
