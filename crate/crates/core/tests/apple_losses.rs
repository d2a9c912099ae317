mod common;

use common::gradcheck::{tiny, worst_relative_error, Which};
use fairseg::apple::{
    combine_generator_loss, loss_discriminator, loss_fair, loss_generator, loss_seg, PerturbationGenerator,
    DICE_SMOOTH,
};
use fairseg::segmentor::LatentVars;
use fairseg_nn::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn scalar_loss(f: impl for<'g> Fn(&'g Graph) -> fairseg_nn::Var<'g>) -> f64 {
    let g = Graph::new();
    f(&g).item()
}

fn logits_of(probs: &[[f64; 2]]) -> Tensor {
    Tensor::new(&[probs.len(), 2], probs.iter().flat_map(|p| [p[0].ln(), p[1].ln()]).collect()).unwrap()
}

#[test]
fn discriminator_loss_hand_values() {
    let uniform = scalar_loss(|g| loss_discriminator(g.constant(Tensor::zeros(&[3, 2])), &[0, 1, 1]));
    assert!((uniform - 2f64.ln()).abs() < 1e-12);

    let hand = scalar_loss(|g| loss_discriminator(g.constant(logits_of(&[[0.9, 0.1], [0.2, 0.8]])), &[0, 1]));
    let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
    assert!((hand - expected).abs() < 1e-12);
    assert!((hand - 0.1643).abs() < 1e-4);

    let confident = Tensor::new(&[2, 2], vec![40.0, -40.0, -40.0, 40.0]).unwrap();
    assert!(scalar_loss(|g| loss_discriminator(g.constant(confident.clone()), &[0, 1])) < 1e-12);
}

#[test]
fn fairness_loss_hand_values() {
    let uniform = scalar_loss(|g| loss_fair(g.constant(Tensor::zeros(&[4, 2])), &[0, 1, 0, 1], 0.1));
    assert!((uniform - (-1.1 * 2f64.ln())).abs() < 1e-12);
    assert!((uniform + 0.7625).abs() < 1e-4);

    let logits = logits_of(&[[0.7, 0.3], [0.4, 0.6]]);
    let fair0 = scalar_loss(|g| loss_fair(g.constant(logits.clone()), &[0, 0], 0.0));
    let disc = scalar_loss(|g| loss_discriminator(g.constant(logits.clone()), &[0, 0]));
    assert_eq!(fair0, -disc);

    let confident = Tensor::new(&[2, 2], vec![40.0, -40.0, -40.0, 40.0]).unwrap();
    assert!(scalar_loss(|g| loss_fair(g.constant(confident.clone()), &[0, 1], 0.1)).abs() < 1e-12);
}

#[test]
fn generator_loss_arithmetic() {
    assert_eq!(combine_generator_loss(0.4, -0.7, 0.0), 0.4);
    assert!((combine_generator_loss(0.4, -0.7, 1.0) + 0.3).abs() < 1e-12);
    assert!((combine_generator_loss(0.4, -0.7, 5.0) + 3.1).abs() < 1e-12);
    let g = Graph::new();
    let v = loss_generator(g.constant(Tensor::scalar(0.4)), g.constant(Tensor::scalar(-0.7)), 5.0);
    assert!((v.item() + 3.1).abs() < 1e-12);
}

#[test]
fn seg_loss_closed_forms() {
    // 2 classes, 1 sample, 4x4 mask with 8 foreground pixels.
    let mask: Vec<usize> = (0..16).map(|i| usize::from(i < 8)).collect();
    let uniform = scalar_loss(|g| loss_seg(g.constant(Tensor::zeros(&[1, 2, 4, 4])), &mask));
    // p = 0.5 everywhere: per class I = 4, sum p = 8, sum y = 8
    let dice_c = (2.0 * 4.0 + DICE_SMOOTH) / (8.0 + 8.0 + DICE_SMOOTH);
    let expected = 0.5 * (2f64.ln() + (1.0 - dice_c));
    assert!((uniform - expected).abs() < 1e-12);

    let mut perfect = vec![0.0; 32];
    for (i, &m) in mask.iter().enumerate() {
        perfect[m * 16 + i] = 60.0;
    }
    let perfect = Tensor::new(&[1, 2, 4, 4], perfect).unwrap();
    assert!(scalar_loss(|g| loss_seg(g.constant(perfect.clone()), &mask)) < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seg_loss_is_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[2, 3, 3, 3], &mut rng).scale(5.0);
        let mask: Vec<usize> = (0..18).map(|_| rng.random_range(0..3)).collect();
        prop_assert!(scalar_loss(|g| loss_seg(g.constant(logits.clone()), &mask)) >= 0.0);
    }

    #[test]
    fn entropy_is_bounded(seed in any::<u64>(), k in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[3, k], &mut rng).scale(10.0);
        let h = scalar_loss(|g| g.constant(logits.clone()).softmax_entropy());
        prop_assert!(h >= -1e-12 && h <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn fair_plus_discriminator_is_negative_weighted_entropy(seed in any::<u64>(), alpha in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[5, 3], &mut rng).scale(3.0);
        let attrs: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let g = Graph::new();
        let z = g.constant(logits);
        let lhs = loss_fair(z, &attrs, alpha).item() + loss_discriminator(z, &attrs).item();
        let rhs = -alpha * z.softmax_entropy().item();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }
}

fn check_against_finite_differences(which: Which, wrt_generator: bool) {
    let (worst, checked) = worst_relative_error(which, wrt_generator);
    assert!(checked > 0);
    assert!(worst < 1e-4, "{which:?}: worst relative error {worst}");
}

#[test]
fn discriminator_loss_gradient_wrt_discriminator() {
    check_against_finite_differences(Which::Disc, false);
}

#[test]
fn seg_loss_gradient_wrt_generator() {
    check_against_finite_differences(Which::Seg, true);
}

#[test]
fn fair_loss_gradient_wrt_generator() {
    check_against_finite_differences(Which::Fair, true);
}

#[test]
fn generator_loss_gradient_wrt_generator() {
    check_against_finite_differences(Which::Gen, true);
}

#[test]
fn frozen_segmentor_receives_no_gradient() {
    let t = tiny();
    let g = Graph::new();
    let pg = t.gp.params().bind(&g, true);
    let ps = t.seg.params().bind(&g, true);
    let fo = LatentVars::constant(&g, &t.latent);
    let fp = t.gp.perturb(&pg, &fo).unwrap();
    let loss = loss_seg(t.seg.decode(&ps, &fp).unwrap(), &t.mask);
    let mut grads = g.backward(loss);
    assert!(ps.grads(&mut grads).iter().all(Option::is_none));
}

#[test]
fn zero_generator_is_identity() {
    let t = tiny();
    let gp = PerturbationGenerator::new(t.gp.config().clone(), 4, (2, 2), 9).unwrap();
    let g = Graph::new();
    let p = gp.params().bind(&g, false);
    let fo = LatentVars::constant(&g, &t.latent);
    let fp = gp.perturb(&p, &fo).unwrap();
    assert_eq!(fp.tensor.value().data(), t.latent.tensor.data());
    let base = t.seg.decode_embedding(&t.latent).unwrap();
    let pert = t.seg.decode_embedding(&fp.to_embedding()).unwrap();
    assert_eq!(base.data(), pert.data());
}

#[test]
fn perturbation_norm_is_generator_norm() {
    let t = tiny();
    let g = Graph::new();
    let p = t.gp.params().bind(&g, false);
    let fo = LatentVars::constant(&g, &t.latent);
    let fp = t.gp.perturb(&p, &fo).unwrap();
    let delta = t.gp.forward(&p, fo.tensor).unwrap();
    let diff: f64 = fp
        .tensor
        .value()
        .data()
        .iter()
        .zip(t.latent.tensor.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    assert!((diff.sqrt() - delta.value().sq_norm().sqrt()).abs() < 1e-12);
    assert!(delta.value().sq_norm() > 0.0);
}
