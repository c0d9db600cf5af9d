use mapgan::gan::{
    discriminator_loss, generator_loss, AdamConfig, AdamState, Discriminator, DiscriminatorConfig, GanLoss, Generator,
    GeneratorConfig,
};
use mapgan::nn::Module;
use mapgan::{Graph, Mode, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameter count of the U-Net written out block by block.
fn closed_form_count(depth: usize, base: usize, image: usize) -> usize {
    let plan: Vec<usize> = (0..depth).map(|i| base << i.min(3)).collect();
    let mut total = 0;
    for i in 0..depth {
        let cin = if i == 0 { image } else { plan[i - 1] };
        let norm_or_bias = if i == 0 || i == depth - 1 { plan[i] } else { 2 * plan[i] };
        total += 16 * cin * plan[i] + norm_or_bias;
    }
    for j in 1..depth {
        let cin = if j == 1 { plan[depth - 1] } else { 2 * plan[depth - j] };
        let out = plan[depth - 1 - j];
        total += 16 * cin * out + 2 * out;
    }
    total + 16 * 2 * plan[0] * image + image
}

#[test]
fn default_generator_parameter_count() {
    let g = Generator::new(GeneratorConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(closed_form_count(8, 64, 3), 54_414_531);
    assert_eq!(g.param_count(), 54_414_531);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generator_parameter_count_matches_closed_form(depth in 2usize..7, base in 1usize..6, image in 1usize..4) {
        let cfg = GeneratorConfig { depth, base_channels: base, image_channels: image, ..GeneratorConfig::default() };
        let g = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        prop_assert_eq!(g.param_count(), closed_form_count(depth, base, image));
    }

    #[test]
    fn losses_ignore_score_order(seed in any::<u64>(), b in 1usize..4, p in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [b, 1, p, p];
        let n = b * p * p;
        let real: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fake: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let shuffled = |v: &[f32], rng: &mut ChaCha8Rng| {
            let mut s = v.to_vec();
            s.shuffle(rng);
            Tensor::new(&shape, s).unwrap()
        };
        let (real_p, fake_p) = (shuffled(&real, &mut rng), shuffled(&fake, &mut rng));
        let (real, fake) = (Tensor::new(&shape, real).unwrap(), Tensor::new(&shape, fake).unwrap());

        let losses = |r: &Tensor, f: &Tensor| -> [f32; 3] {
            let mut g = Graph::new();
            let (rv, fv) = (g.constant(r.clone()), g.constant(f.clone()));
            let d = discriminator_loss(&mut g, rv, fv).unwrap();
            let s = generator_loss(&mut g, fv, GanLoss::Saturating);
            let ns = generator_loss(&mut g, fv, GanLoss::NonSaturating);
            [g.value(d).item(), g.value(s).item(), g.value(ns).item()]
        };
        for (a, b) in losses(&real, &fake).into_iter().zip(losses(&real_p, &fake_p)) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }
}

fn discriminator_loss_value(d: &mut Discriminator, sat: &Tensor, real: &Tensor, fake: &Tensor) -> (f32, Graph) {
    let mut g = Graph::new();
    let s = g.constant(sat.clone());
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let real_scores = d.forward(&mut g, s, r, Mode::Train).unwrap();
    let fake_scores = d.forward(&mut g, s, f, Mode::Train).unwrap();
    let loss = discriminator_loss(&mut g, real_scores, fake_scores).unwrap();
    g.backward(loss).unwrap();
    (g.value(loss).item(), g)
}

#[test]
fn discriminator_step_descends_with_frozen_generator() {
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gcfg = GeneratorConfig { depth: 5, base_channels: 4, ..GeneratorConfig::default() };
        let mut gen = Generator::new(gcfg, &mut rng).unwrap();
        let dcfg = DiscriminatorConfig { base_channels: 4, ..DiscriminatorConfig::default() };
        let mut d = Discriminator::new(dcfg, &mut rng).unwrap();
        let mut opt = AdamState::new(AdamConfig::default(), &d).unwrap();

        let sat = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let real = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let fake = gen.translate(&sat, Mode::Train, &mut rng).unwrap();
        let g_before: Vec<Tensor> = gen.named_params().into_iter().map(|(_, t)| t.clone()).collect();

        d.zero_grad();
        let (before, graph) = discriminator_loss_value(&mut d, &sat, &real, &fake);
        d.collect_grads(&graph).unwrap();
        opt.step(&mut d).unwrap();
        let (after, _) = discriminator_loss_value(&mut d, &sat, &real, &fake);

        let g_after: Vec<Tensor> = gen.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        assert!(g_before.iter().zip(&g_after).all(|(a, b)| a.data() == b.data()));
        if after > before {
            failures.push((seed, before, after));
        }
    }
    assert!(failures.len() <= 1, "loss increased for {failures:?}");
}

#[test]
fn discriminator_uses_both_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DiscriminatorConfig { base_channels: 4, ..DiscriminatorConfig::default() };
    let mut d = Discriminator::new(cfg, &mut rng).unwrap();
    let sat = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.gen_range(-1.0..1.0)).unwrap();
    let map = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.gen_range(-1.0..1.0)).unwrap();
    let with_map = d.score(&sat, &map, Mode::Eval).unwrap();
    let without_map = d.score(&sat, &Tensor::zeros(&[1, 3, 32, 32]).unwrap(), Mode::Eval).unwrap();
    assert_ne!(with_map.data(), without_map.data());
}
