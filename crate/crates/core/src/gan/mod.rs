//! Generator, discriminator, adversarial losses, and the optimizer.

mod adam;
mod discriminator;
mod generator;
mod loss;

pub use adam::{AdamConfig, AdamState};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};
pub use loss::{discriminator_loss, generator_loss, l1_loss, GanLoss, SCORE_EPS};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Module;
    use crate::tensor::{Graph, Mode, Tensor};
    use crate::Error;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn image(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0)).unwrap()
    }

    fn small_generator(depth: usize, seed: u64) -> Generator {
        let cfg = GeneratorConfig { depth, base_channels: 4, ..GeneratorConfig::default() };
        Generator::new(cfg, &mut rng(seed)).unwrap()
    }

    #[test]
    fn skip_wiring_mirrors_encoders() {
        let g = small_generator(6, 1);
        let plan = g.config().channel_plan();
        assert_eq!(plan, [4, 8, 16, 32, 32, 32]);
        assert_eq!(g.decoders.len(), 5);
        for (j, dec) in g.decoders.iter().enumerate() {
            // decoder j+1 output is concatenated with encoder n-(j+1)
            assert_eq!(dec.out_channels(), g.encoders[6 - (j + 1) - 1].out_channels());
        }
        assert_eq!(g.output.in_channels(), 2 * plan[0]);
        assert_eq!(g.output.out_channels(), 3);
        let dropout: Vec<f32> = g.decoders.iter().map(|d| d.dropout_rate).collect();
        assert_eq!(dropout, [0.5, 0.5, 0.5, 0.0, 0.0]);
        assert!(g.encoders[0].bn.is_none() && g.encoders[5].bn.is_none());
        assert!(g.encoders[1..5].iter().all(|e| e.bn.is_some()));
    }

    #[test]
    fn generator_shape_and_range() {
        let mut g = small_generator(5, 2);
        let mut graph = Graph::new();
        let x = graph.constant(image(&[2, 3, 32, 32], 3));
        let (y, bottleneck) = g.forward_traced(&mut graph, x, Mode::Train, &mut rng(4)).unwrap();
        assert_eq!(graph.shape(y), &[2, 3, 32, 32]);
        assert_eq!(graph.shape(bottleneck), &[2, 32, 1, 1]);
        assert!(graph.value(y).data().iter().all(|v| v.abs() < 1.0));

        // larger power of two passes through with a deeper bottleneck map
        let x = graph.constant(image(&[1, 3, 64, 64], 5));
        let (y, b) = g.forward_traced(&mut graph, x, Mode::Eval, &mut rng(4)).unwrap();
        assert_eq!(graph.shape(y), &[1, 3, 64, 64]);
        assert_eq!(graph.shape(b), &[1, 32, 2, 2]);
    }

    #[test]
    fn generator_rejects_bad_sizes_before_compute() {
        let mut g = small_generator(4, 6);
        let mut graph = Graph::new();
        for shape in [[1, 3, 24, 24], [1, 3, 8, 8], [1, 3, 16, 32 + 16], [1, 1, 16, 16]] {
            let x = graph.constant(Tensor::zeros(&shape).unwrap());
            let before = graph.len();
            assert!(matches!(g.forward(&mut graph, x, Mode::Train, &mut rng(0)), Err(Error::Shape(_))));
            assert_eq!(graph.len(), before);
        }
    }

    #[test]
    fn discriminator_patch_map() {
        let cfg = DiscriminatorConfig { base_channels: 4, ..DiscriminatorConfig::default() };
        let mut d = Discriminator::new(cfg, &mut rng(7)).unwrap();
        let sat = image(&[2, 3, 64, 64], 8);
        let map = image(&[2, 3, 64, 64], 9);
        let scores = d.score(&sat, &map, Mode::Train).unwrap();
        assert_eq!(scores.shape(), &[2, 1, 6, 6]);
        assert_eq!(DiscriminatorConfig::patch_size(64), 6);
        assert_eq!(DiscriminatorConfig::patch_size(256), 30);
        assert!(scores.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let other = image(&[2, 3, 64, 64], 10);
        assert_ne!(d.score(&sat, &other, Mode::Eval).unwrap(), d.score(&sat, &map, Mode::Eval).unwrap());
        let zeros = Tensor::zeros(&[2, 3, 64, 64]).unwrap();
        assert_ne!(d.score(&sat, &zeros, Mode::Eval).unwrap(), d.score(&sat, &map, Mode::Eval).unwrap());

        let small = image(&[2, 3, 32, 32], 11);
        assert!(matches!(d.score(&sat, &small, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn every_parameter_enumerated_once() {
        let g = small_generator(6, 12);
        let params = g.named_params();
        let mut names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        let mut ids: Vec<_> = params.iter().map(|(_, t)| t.id().unwrap()).collect();
        let count = names.len();
        names.sort_unstable();
        names.dedup();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(names.len(), count);
        assert_eq!(ids.len(), count);
        // 6 encoder convs + 4 encoder bn pairs + 2 encoder biases,
        // 5 decoder convs + 5 bn pairs, output conv + bias
        assert_eq!(count, 6 + 8 + 2 + 5 + 10 + 2);
    }
}
