use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Tape;
use crate::gradcheck::{check_gradients, GradCheckConfig};

/// Plain-loop focal + dice on `[N,n,H,W]` logits, independent of the tape.
fn reference_level(logits: &Tensor<f64>, target: &LabelMap, w: &[f64], cfg: &LossConfig) -> f64 {
    let s = logits.shape();
    let (n, k, h, wd) = (s[0], s[1], s[2], s[3]);
    let mut focal = 0.0;
    let mut count = 0.0;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut ysum = vec![0.0; k];
    for b in 0..n {
        for y in 0..h {
            for x in 0..wd {
                let t = target.at(b, y, x);
                if t == IGNORE {
                    continue;
                }
                let z: Vec<f64> = (0..k).map(|c| logits.at(&[b, c, y, x])).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let tot: f64 = e.iter().sum();
                let p: Vec<f64> = e.iter().map(|v| v / tot).collect();
                let t = t as usize;
                focal += w[t] * (1.0 - p[t]).powf(cfg.gamma) * -p[t].ln();
                count += 1.0;
                for c in 0..k {
                    let yc = if c == t { 1.0 } else { 0.0 };
                    inter[c] += p[c] * yc;
                    psum[c] += if cfg.dice_squared { p[c] * p[c] } else { p[c] };
                    ysum[c] += yc;
                }
            }
        }
    }
    let dice: f64 = (0..k).map(|c| w[c] * (2.0 * inter[c] + cfg.dice_eps) / (psum[c] + ysum[c] + cfg.dice_eps)).sum();
    focal / count + 1.0 - dice
}

fn random_case(n: usize, k: usize, h: usize, w: usize, seed: u64, ignore_frac: f64) -> (Tensor<f64>, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::randn(&[n, k, h, w], &mut rng).unwrap();
    let labels = (0..n * h * w)
        .map(|_| if rng.random::<f64>() < ignore_frac { IGNORE } else { rng.random_range(0..k as u8) })
        .collect();
    (logits, LabelMap::new([n, h, w], labels).unwrap())
}

fn value<F>(f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>) -> Var<'t, f64>,
{
    let tape = Tape::new();
    f(&tape).value().item().unwrap()
}

#[test]
fn focal_gamma_zero_is_cross_entropy() {
    let (logits, target) = random_case(2, 5, 6, 7, 1, 0.2);
    let k = 5;
    let w = vec![1.0 / k as f64; k];
    let focal = value(|t| focal_loss(t.constant(logits.clone()), &target, &w, 0.0).unwrap()) * k as f64;
    let cfg = LossConfig { gamma: 0.0, ..LossConfig::default() };
    // reference focal term with unit weights is plain cross-entropy
    let ce_plus_dice = reference_level(&logits, &target, &[1.0; 5], &cfg);
    let dice = value(|t| dice_loss(t.constant(logits.clone()), &target, &[1.0; 5], 1.0, false).unwrap());
    assert!((focal - (ce_plus_dice - dice)).abs() < 1e-6);
}

#[test]
fn focal_single_pixel_closed_form() {
    let logits = Tensor::new(&[1, 2, 1, 1], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
    let target = LabelMap::single(1, 1, vec![0]).unwrap();
    let got = value(|t| focal_loss(t.constant(logits.clone()), &target, &[1.0, 1.0], 2.0).unwrap());
    assert!((got - 1.0536e-3).abs() < 1e-7, "{got}");
    assert!((got - 0.01 * -(0.9f64.ln())).abs() < 1e-15);

    let sure = Tensor::new(&[1, 2, 1, 1], vec![30.0, -30.0]).unwrap();
    assert!(value(|t| focal_loss(t.constant(sure.clone()), &target, &[1.0, 1.0], 2.0).unwrap()) < 1e-20);
}

#[test]
fn target_errors() {
    let logits = Tensor::<f64>::zeros(&[1, 2, 2, 2]).unwrap();
    let ignored = LabelMap::single(2, 2, vec![IGNORE; 4]).unwrap();
    let bad = LabelMap::single(2, 2, vec![0, 1, 2, 0]).unwrap();
    let tape = Tape::new();
    let x = tape.constant(logits);
    assert!(matches!(focal_loss(x, &ignored, &[0.5, 0.5], 2.0), Err(Error::UndefinedMean(_))));
    assert!(matches!(dice_loss(x, &ignored, &[0.5, 0.5], 1.0, false), Err(Error::UndefinedMean(_))));
    assert!(matches!(focal_loss(x, &bad, &[0.5, 0.5], 2.0), Err(Error::Data(_))));
    assert!(matches!(focal_loss(x, &ignored, &[1.0], 2.0), Err(Error::Dimension(_))));
}

fn onehot_probs(target: &LabelMap, k: usize) -> Tensor<f64> {
    let [n, h, w] = target.shape();
    Tensor::from_fn(&[n, k, h, w], |i| {
        let (b, rest) = (i / (k * h * w), i % (k * h * w));
        let (c, p) = (rest / (h * w), rest % (h * w));
        if target.data()[b * h * w + p] as usize == c {
            1.0
        } else {
            0.0
        }
    })
    .unwrap()
}

#[test]
fn dice_extremes() {
    let (_, target) = random_case(1, 3, 8, 8, 2, 0.0);
    let probs = onehot_probs(&target, 3);
    let w = [1.0 / 3.0; 3];
    let eps = 1.0;
    let perfect = value(|t| dice_loss_from_probs(t.constant(probs.clone()), &target, &w, eps, false).unwrap());
    let pixels = 64.0;
    assert!(perfect <= 2.0 * eps / (2.0 * pixels + eps));
    assert!(perfect.abs() < 1e-12);

    // every prediction shifted to the next class: no overlap
    let shifted = LabelMap::single(8, 8, target.data().iter().map(|&v| (v + 1) % 3).collect()).unwrap();
    let disjoint = onehot_probs(&shifted, 3);
    let loss = value(|t| dice_loss_from_probs(t.constant(disjoint.clone()), &target, &w, 1e-9, false).unwrap());
    assert!((loss - 1.0).abs() < 1e-9, "{loss}");
}

#[test]
fn dice_uniform_probabilities_balanced_target() {
    let target = LabelMap::single(2, 2, vec![0, 1, 1, 0]).unwrap();
    let probs = Tensor::full(&[1, 2, 2, 2], 0.5).unwrap();
    let w = [0.5, 0.5];
    // Σp = 2, Σy = 2, Σpy = 1 per class: dice = 2/4
    let linear = value(|t| dice_loss_from_probs(t.constant(probs.clone()), &target, &w, 0.0, false).unwrap());
    assert!((linear - 0.5).abs() < 1e-15);
    // Σp² = 1: dice = 2/3
    let squared = value(|t| dice_loss_from_probs(t.constant(probs.clone()), &target, &w, 0.0, true).unwrap());
    assert!((squared - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn combined_matches_scalar_reference() {
    let (_, target) = random_case(2, 4, 5, 6, 3, 0.15);
    let levels: Vec<Tensor<f64>> =
        (0..3).map(|i| Tensor::randn(&[2, 4, 5, 6], &mut ChaCha8Rng::seed_from_u64(10 + i)).unwrap()).collect();
    let state = update_class_weights(&[0.2, 0.5, 0.9, 0.7], 0.1).unwrap();
    for squared in [false, true] {
        let cfg = LossConfig { dice_squared: squared, ..LossConfig::default() };
        let got = value(|t| {
            let outs: Vec<_> = levels.iter().map(|l| t.constant(l.clone())).collect();
            combined_loss(&outs, &target, &state, &cfg).unwrap()
        });
        let per_level: Vec<f64> = levels.iter().map(|l| reference_level(l, &target, &state.weights, &cfg)).collect();
        let expected = per_level.iter().sum::<f64>() / 3.0;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }
}

#[test]
fn combined_identical_levels_and_level_count() {
    let (logits, target) = random_case(1, 3, 4, 4, 4, 0.0);
    let state = ClassWeightState::uniform(3, 0.1);
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let x = tape.constant(logits);
    let one = focal_loss(x, &target, &state.weights, 2.0)
        .unwrap()
        .add(dice_loss(x, &target, &state.weights, 1.0, false).unwrap())
        .unwrap();
    let all = combined_loss(&[x, x, x], &target, &state, &cfg).unwrap();
    assert!((one.value().item().unwrap() - all.value().item().unwrap()).abs() < 1e-15);
    assert!(matches!(combined_loss(&[x, x], &target, &state, &cfg), Err(Error::Contract(_))));
}

#[test]
fn class_weight_examples() {
    let s = update_class_weights(&[0.4, 0.9], 0.1).unwrap();
    assert!((s.weights[0] - 2.0 / 3.0).abs() < 1e-12 && (s.weights[1] - 1.0 / 3.0).abs() < 1e-12);
    let s = update_class_weights(&[0.0, 0.9], 0.1).unwrap();
    assert!((s.weights[0] - 10.0 / 11.0).abs() < 1e-12 && (s.weights[1] - 1.0 / 11.0).abs() < 1e-12);
    let s = update_class_weights(&[0.5; 4], 0.1).unwrap();
    assert!(s.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
    assert!(update_class_weights(&[0.5, 1.2], 0.1).is_err());
    assert!(update_class_weights(&[0.5, 0.2], 0.0).is_err());
}

#[test]
fn refresh_fills_absent_classes() {
    let start = ClassWeightState::uniform(3, 0.1);
    let s = start.refreshed(&[Some(0.2), None, Some(0.6)]).unwrap();
    assert_eq!(s.source_iou, Some(vec![0.2, 0.4, 0.6]));
    let s2 = s.refreshed(&[Some(0.3), None, Some(0.3)]).unwrap();
    assert_eq!(s2.source_iou, Some(vec![0.3, 0.4, 0.3]));
    // unchanged IoU gives an unchanged state
    assert_eq!(s2.refreshed(&[Some(0.3), Some(0.4), Some(0.3)]).unwrap(), s2);
}

proptest! {
    #[test]
    fn weights_normalized_monotone_and_equivariant(iou in prop::collection::vec(0.0f64..=1.0, 2..10), alpha in 0.01f64..1.0) {
        let s = update_class_weights(&iou, alpha).unwrap();
        prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.weights.iter().all(|&w| w > 0.0));
        for i in 0..iou.len() {
            for j in 0..iou.len() {
                if iou[i] < iou[j] {
                    prop_assert!(s.weights[i] >= s.weights[j]);
                }
            }
        }
        let mut rev = iou.clone();
        rev.reverse();
        let r = update_class_weights(&rev, alpha).unwrap();
        for (a, b) in s.weights.iter().zip(r.weights.iter().rev()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_is_scale_invariant(raw in prop::collection::vec(0.01f64..100.0, 1..10), c in 0.001f64..1000.0) {
        let scaled: Vec<f64> = raw.iter().map(|r| r * c).collect();
        for (a, b) in normalize_weights(&raw).iter().zip(normalize_weights(&scaled)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_bounded_and_monotone(seed in 0u64..1000, pixel in 0usize..24, bump in 0.01f64..3.0) {
        let (logits, target) = random_case(1, 3, 4, 6, seed, 0.1);
        let w = [0.2, 0.3, 0.5];
        let loss = |l: &Tensor<f64>| value(|t| dice_loss(t.constant(l.clone()), &target, &w, 1.0, false).unwrap());
        let before = loss(&logits);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&before));
        let label = target.data()[pixel];
        prop_assume!(label != IGNORE);
        let mut raised = logits.clone();
        raised.data_mut()[label as usize * 24 + pixel] += bump;
        prop_assert!(loss(&raised) <= before + 1e-12);
    }
}

fn fd_cfg() -> GradCheckConfig {
    GradCheckConfig::default()
}

#[test]
fn gradcheck_focal_two_class_four_pixels() {
    let (logits, target) = random_case(1, 2, 2, 2, 5, 0.0);
    let r = check_gradients(|_, v| focal_loss(v[0], &target, &[0.3, 0.7], 2.0), &[logits], &fd_cfg()).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn gradcheck_dice_and_combined() {
    let (logits, target) = random_case(2, 4, 6, 6, 6, 0.1);
    for squared in [false, true] {
        let r = check_gradients(
            |_, v| dice_loss(v[0], &target, &[0.1, 0.2, 0.3, 0.4], 1.0, squared),
            std::slice::from_ref(&logits),
            &fd_cfg(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
    let levels: Vec<Tensor<f64>> =
        (0..3).map(|i| Tensor::randn(&[2, 4, 6, 6], &mut ChaCha8Rng::seed_from_u64(20 + i)).unwrap()).collect();
    let state = update_class_weights(&[0.1, 0.5, 0.8, 0.3], 0.1).unwrap();
    let cfg = LossConfig::default();
    let r = check_gradients(|_, v| combined_loss(v, &target, &state, &cfg), &levels, &fd_cfg()).unwrap();
    assert!(r.passed, "{r:?}");
}
