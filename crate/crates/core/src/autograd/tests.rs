use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck::{check_gradients, finite_diff_check, GradCheckConfig};
use crate::tensor::Tensor;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Direct sliding-window cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: Conv2dGeom) -> Tensor<f64> {
    let [n, cin, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [cout, _, kh, kw] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let ho = (h + 2 * g.padding - ((kh - 1) * g.dilation + 1)) / g.stride + 1;
    let wo = (wd + 2 * g.padding - ((kw - 1) * g.dilation + 1)) / g.stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[ni, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out[((ni * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

fn conv_value(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: Conv2dGeom) -> crate::Result<Tensor<f64>> {
    let tape = Tape::new();
    let b = b.map(|b| tape.constant(b.clone()));
    Ok(tape.constant(x.clone()).conv2d(tape.constant(w.clone()), b, g)?.value())
}

#[test]
fn conv_pointwise_scales_input() {
    let x = randn(&[2, 1, 5, 5], 1);
    let w = t64(&[1, 1, 1, 1], &[2.0]);
    let b = t64(&[1], &[0.0]);
    let y = conv_value(&x, &w, Some(&b), Conv2dGeom::default()).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn conv_dilated_same_padding_shape() {
    let x = randn(&[1, 2, 16, 16], 2);
    let w = randn(&[3, 2, 3, 3], 3);
    let y = conv_value(&x, &w, None, Conv2dGeom::new(1, 2, 2)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 16, 16]);
}

#[test]
fn conv_ones_kernel_counts_window() {
    let x = Tensor::<f64>::ones(&[1, 1, 4, 4]).unwrap();
    let w = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
    let g = Conv2dGeom::new(1, 1, 1);
    let y = conv_value(&x, &w, None, g).unwrap();
    let oracle = naive_conv(&x, &w, None, g);
    assert_eq!(y.data(), oracle.data());
    let expected = [4., 6., 6., 4., 6., 9., 9., 6., 6., 9., 9., 6., 4., 6., 6., 4.];
    assert_eq!(y.data(), &expected);
}

#[test]
fn conv_matches_naive_loop() {
    for (i, g) in
        [Conv2dGeom::new(1, 0, 1), Conv2dGeom::new(2, 1, 1), Conv2dGeom::new(1, 2, 2), Conv2dGeom::new(3, 1, 2)]
            .into_iter()
            .enumerate()
    {
        let x = randn(&[2, 3, 9, 11], 10 + i as u64);
        let w = randn(&[4, 3, 3, 2], 20 + i as u64);
        let b = randn(&[4], 30 + i as u64);
        let y = conv_value(&x, &w, Some(&b), g).unwrap();
        let oracle = naive_conv(&x, &w, Some(&b), g);
        assert_eq!(y.shape(), oracle.shape());
        assert!(y.max_abs_diff(&oracle) < 1e-12, "{g:?}");
    }
}

#[test]
fn conv_errors() {
    let x = randn(&[1, 3, 4, 4], 1);
    let w = randn(&[2, 2, 3, 3], 2);
    assert!(matches!(conv_value(&x, &w, None, Conv2dGeom::default()), Err(Error::Dimension(_))));
    let w = randn(&[2, 3, 5, 5], 2);
    assert!(matches!(conv_value(&x, &w, None, Conv2dGeom::default()), Err(Error::Geometry(_))));
    assert!(conv_value(&x, &w, None, Conv2dGeom::new(1, 1, 1)).is_ok());
}

fn bn_value(x: &Tensor<f64>, eps: f64, training: bool) -> crate::Result<Tensor<f64>> {
    let c = x.shape()[1];
    let tape = Tape::new();
    let mut stats = RunningStats::new(c)?;
    let g = tape.constant(Tensor::ones(&[c])?);
    let b = tape.constant(Tensor::zeros(&[c])?);
    Ok(batch_norm(tape.constant(x.clone()), g, b, &mut stats, training, eps, 0.1)?.value())
}

#[test]
fn batch_norm_normalizes_channels() {
    let x = randn(&[4, 3, 5, 5], 7).map(|v| 3.0 * v + 2.0);
    let y = bn_value(&x, 1e-5, true).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> =
            (0..4).flat_map(|n| (0..25).map(move |i| (n, i))).map(|(n, i)| y.at(&[n, c, i / 5, i % 5])).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }
}

#[test]
fn batch_norm_hand_cases() {
    let y = bn_value(&t64(&[2, 1], &[1.0, 3.0]), 0.0, true).unwrap();
    assert_eq!(y.data(), &[-1.0, 1.0]);

    // Constant channel collapses to beta.
    let tape = Tape::new();
    let mut stats = RunningStats::new(1).unwrap();
    let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 4.0).unwrap());
    let g = tape.constant(t64(&[1], &[1.5]));
    let b = tape.constant(t64(&[1], &[0.25]));
    let y = batch_norm(x, g, b, &mut stats, true, 1e-5, 0.1).unwrap().value();
    assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    // running stats moved 10% toward the batch statistics (unbiased variance 0)
    assert_abs_diff_eq!(stats.mean.data()[0], 0.4, epsilon = 1e-12);
    assert_abs_diff_eq!(stats.var.data()[0], 0.9, epsilon = 1e-12);
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let tape = Tape::new();
    let mut stats = RunningStats { mean: t64(&[1], &[1.0]), var: t64(&[1], &[4.0]) };
    let x = tape.constant(t64(&[1, 1, 1, 2], &[3.0, -1.0]));
    let g = tape.constant(t64(&[1], &[1.0]));
    let b = tape.constant(t64(&[1], &[0.0]));
    let y = batch_norm(x, g, b, &mut stats, false, 0.0, 0.1).unwrap().value();
    assert_eq!(y.data(), &[1.0, -1.0]);
    assert_eq!(stats.mean.data(), &[1.0]);
}

#[test]
fn batch_norm_degenerate_batch() {
    let err = bn_value(&randn(&[1, 4, 1, 1], 3), 1e-5, true).unwrap_err();
    assert!(matches!(err, Error::DegenerateVariance(_)));
    assert!(bn_value(&randn(&[1, 4, 1, 1], 3), 1e-5, false).is_ok());
}

#[test]
fn activation_examples() {
    let tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::full(&[4], 0.7).unwrap()).softmax(0).unwrap().value();
    assert_eq!(s.data(), &[0.25; 4]);
    let s = tape.constant(t64(&[3], &[1.0, 2.0, 3.0])).softmax(0).unwrap().value();
    // e^k / (e + e^2 + e^3)
    let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
    for (k, v) in s.data().iter().enumerate() {
        assert_abs_diff_eq!(*v, ((k + 1) as f64).exp() / z, epsilon = 1e-15);
    }
    assert_abs_diff_eq!(s.data()[0], 0.09003, epsilon = 1e-5);
    assert_abs_diff_eq!(s.data()[1], 0.24473, epsilon = 1e-5);
    assert_abs_diff_eq!(s.data()[2], 0.66524, epsilon = 1e-5);
    assert_eq!(tape.constant(Tensor::scalar(0.0)).sigmoid().value().data(), &[0.5]);
    let r = tape.constant(t64(&[3], &[-1.0, 0.0, 2.0])).relu().value();
    assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    assert!(tape.constant(t64(&[3], &[1.0, 2.0, 3.0])).softmax(1).is_err());
}

#[test]
fn adaptive_pool_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64).unwrap());
    assert_eq!(x.adaptive_avg_pool2d(2, 2).unwrap().value().data(), &[2.5, 4.5, 10.5, 12.5]);
    assert_eq!(x.adaptive_avg_pool2d(1, 1).unwrap().value().data(), &[7.5]);
    let c = tape.constant(Tensor::full(&[2, 3, 7, 5], 1.25).unwrap());
    for (oh, ow) in [(1, 1), (3, 2), (7, 5), (7, 1), (1, 5)] {
        assert!(c.adaptive_avg_pool2d(oh, ow).unwrap().value().data().iter().all(|&v| v == 1.25));
    }
    assert!(matches!(x.adaptive_avg_pool2d(5, 1), Err(Error::Geometry(_))));
}

#[test]
fn bilinear_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
    let y = x.upsample_bilinear(4, 4).unwrap().value();
    assert_eq!(y.at(&[0, 0, 0, 0]), 0.0);
    assert_abs_diff_eq!(y.at(&[0, 0, 1, 1]), 0.75, epsilon = 1e-15);
    // Hand-evaluated half-pixel weights: source coordinates per output index
    // are (clamped) -0.25, 0.25, 0.75, 1.25.
    let src = [0.0, 0.25, 0.75, 1.0];
    for i in 0..4 {
        for j in 0..4 {
            assert_abs_diff_eq!(y.at(&[0, 0, i, j]), 2.0 * src[i] + src[j], epsilon = 1e-15);
        }
    }
    assert_eq!(x.upsample_bilinear(2, 2).unwrap().value().data(), x.value().data());
    let c = tape.constant(Tensor::full(&[1, 2, 3, 5], -2.0).unwrap());
    assert!(c.upsample_bilinear(7, 4).unwrap().value().data().iter().all(|&v| (v + 2.0).abs() < 1e-15));
}

#[test]
fn concat_and_matmul_examples() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(randn(&[1, 4, 8, 8], 1));
    let b = tape.constant(randn(&[1, 4, 8, 8], 2));
    let c = concat(&[a, b], 1).unwrap();
    assert_eq!(c.shape(), vec![1, 8, 8, 8]);
    assert_eq!(c.value().at(&[0, 5, 3, 2]), b.value().at(&[0, 1, 3, 2]));
    let bad = tape.constant(randn(&[1, 4, 8, 7], 3));
    assert!(matches!(concat(&[a, bad], 1), Err(Error::Dimension(_))));

    let m = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let n = tape.constant(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    assert_eq!(m.matmul(n).unwrap().value().data(), &[19.0, 22.0, 43.0, 50.0]);
    let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    assert_eq!(m.matmul(eye).unwrap().value().data(), m.value().data());
    assert!(m.matmul(tape.constant(randn(&[3, 2], 1))).is_err());
}

#[test]
fn backward_simple_cases() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(randn(&[2, 3], 4));
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);

    let tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]));
    let loss = x.mul(x).unwrap().sum_all();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    // A second call accumulates.
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0, 12.0]);
    tape.zero_grads();
    assert!(x.grad().is_none());

    assert!(matches!(x.backward(), Err(Error::Contract(_))));
}

#[test]
fn shared_node_accumulates_both_paths() {
    // y = exp(x) feeds two consumers: loss = sum(y * y) + sum(sigmoid(y))
    fn f<'t>(_: &'t Tape<f64>, x: Var<'t, f64>) -> crate::Result<Var<'t, f64>> {
        let y = x.exp();
        y.mul(y)?.sum_all().add(y.sigmoid().sum_all())
    }
    let report = finite_diff_check(f, &randn(&[5], 9), 1e-5, 1e-6).unwrap();
    assert!(report.passed, "{report:?}");
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[1], &[0.3]));
    f(&tape, x).unwrap().backward().unwrap();
    let y = 0.3f64.exp();
    let s = 1.0 / (1.0 + (-y).exp());
    assert_abs_diff_eq!(x.grad().unwrap().data()[0], (2.0 * y + s * (1.0 - s)) * y, epsilon = 1e-14);
}

#[test]
fn gradcheck_linear_is_exact() {
    let report = finite_diff_check(|_, x| Ok(x.sum_all()), &randn(&[2, 3, 4], 5), 1e-5, 1e-4).unwrap();
    assert!(report.passed);
    assert!(report.max_rel_error < 1e-9);
    assert!(report.deterministic);
}

#[test]
fn gradcheck_flags_wrong_backward_rule() {
    fn wrong_square<'t>(tape: &'t Tape<f64>, x: Var<'t, f64>) -> crate::Result<Var<'t, f64>> {
        let v = x.value();
        let y = v.map(|a| a * a);
        // claims d(x^2)/dx = x
        let var = tape.op(
            y,
            &[x],
            Box::new(move |g, _| {
                vec![Some(Tensor::new(v.shape(), v.data().iter().zip(g.data()).map(|(a, u)| a * u).collect()).unwrap())]
            }),
        );
        Ok(var.sum_all())
    }
    let report = finite_diff_check(wrong_square, &randn(&[4], 6), 1e-5, 1e-4).unwrap();
    assert!(!report.passed);
}

fn check(f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>, inputs: &[Tensor<f64>]) {
    let report = check_gradients(f, inputs, &GradCheckConfig::default()).unwrap();
    assert!(report.passed, "{report:?}");
}

/// Projects onto a fixed random direction so every output element matters.
fn project<'t>(y: Var<'t, f64>, seed: u64) -> crate::Result<Var<'t, f64>> {
    let w = y.tape().constant(randn(&y.shape(), seed));
    Ok(y.mul(w)?.sum_all())
}

#[test]
fn gradcheck_elementwise_and_broadcast() {
    let a = randn(&[2, 3, 4], 1);
    let b = randn(&[2, 1, 4], 2);
    check(|_, v| project(v[0].add(v[1])?, 3), &[a.clone(), b.clone()]);
    check(|_, v| project(v[0].sub(v[1])?, 3), &[a.clone(), b.clone()]);
    check(|_, v| project(v[0].mul(v[1])?, 3), &[a.clone(), b.clone()]);
    let pos = b.map(|v| v.abs() + 0.5);
    check(|_, v| project(v[0].div(v[1])?, 3), &[a.clone(), pos.clone()]);
    check(|_, v| project(v[0].exp(), 3), std::slice::from_ref(&a));
    check(|_, v| project(v[0].log(), 3), std::slice::from_ref(&pos));
    check(|_, v| project(v[0].sqrt(), 3), std::slice::from_ref(&pos));
    check(|_, v| project(v[0].powf(2.5), 3), std::slice::from_ref(&pos));
    check(|_, v| project(v[0].sigmoid(), 3), std::slice::from_ref(&a));
    check(|_, v| project(v[0].relu(), 3), std::slice::from_ref(&a));
    check(|_, v| project(v[0].mul_scalar(-1.5).add_scalar(2.0), 3), std::slice::from_ref(&a));
}

#[test]
fn gradcheck_reductions_and_layout() {
    let a = randn(&[2, 3, 4, 5], 11);
    check(|_, v| project(v[0].softmax(1)?, 1), std::slice::from_ref(&a));
    check(|_, v| project(v[0].log_softmax(3)?, 1), std::slice::from_ref(&a));
    check(|_, v| project(v[0].sum_axes(&[0, 2], true)?, 1), std::slice::from_ref(&a));
    check(|_, v| project(v[0].mean_axes(&[1, 3], false)?, 1), std::slice::from_ref(&a));
    check(|_, v| Ok(v[0].mean_all()), std::slice::from_ref(&a));
    check(|_, v| project(v[0].reshape(&[6, 20])?, 1), std::slice::from_ref(&a));
    check(|_, v| project(v[0].permute(&[2, 0, 3, 1])?, 1), std::slice::from_ref(&a));
    check(|_, v| project(v[0].transpose(1, 2)?, 1), std::slice::from_ref(&a));
    let b = randn(&[2, 5, 3], 12);
    let c = randn(&[2, 3, 4], 13);
    check(|_, v| project(v[0].matmul(v[1])?, 1), &[b, c]);
    let d = randn(&[2, 2, 4, 5], 14);
    check(|_, v| project(concat(&[v[0], v[1]], 1)?, 1), &[a, d]);
}

#[test]
fn gradcheck_spatial_ops() {
    let x = randn(&[2, 3, 8, 7], 21);
    for g in [Conv2dGeom::new(1, 1, 1), Conv2dGeom::new(2, 1, 1), Conv2dGeom::new(1, 2, 2), Conv2dGeom::new(1, 0, 1)] {
        let w = randn(&[4, 3, 3, 3], 22);
        let b = randn(&[4], 23);
        check(move |_, v| project(v[0].conv2d(v[1], Some(v[2]), g)?, 2), &[x.clone(), w, b]);
    }
    let w1 = randn(&[5, 3, 1, 1], 24);
    check(|_, v| project(v[0].conv2d(v[1], None, Conv2dGeom::default())?, 2), &[x.clone(), w1]);
    check(|_, v| project(v[0].max_pool2d(2, 2)?, 2), std::slice::from_ref(&x));
    check(|_, v| project(v[0].adaptive_avg_pool2d(3, 2)?, 2), std::slice::from_ref(&x));
    check(|_, v| project(v[0].adaptive_avg_pool2d(8, 1)?, 2), std::slice::from_ref(&x));
    check(|_, v| project(v[0].upsample_bilinear(16, 11)?, 2), std::slice::from_ref(&x));
    check(|_, v| project(v[0].upsample_bilinear(5, 3)?, 2), std::slice::from_ref(&x));
}

#[test]
fn gradcheck_batch_norm() {
    let x = randn(&[2, 3, 4, 4], 31);
    let g = randn(&[3], 32);
    let b = randn(&[3], 33);
    for training in [true, false] {
        check(
            move |_, v| {
                let mut stats = RunningStats { mean: randn(&[3], 34), var: randn(&[3], 35).map(|v| v.abs() + 0.5) };
                project(batch_norm(v[0], v[1], v[2], &mut stats, training, 1e-5, 0.1)?, 36)
            },
            &[x.clone(), g.clone(), b.clone()],
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_shape_formula(h in 1usize..12, w in 1usize..12, k in 1usize..4, stride in 1usize..4,
                          dilation in 1usize..3, padding in 0usize..3) {
        let x = Tensor::<f64>::ones(&[1, 2, h, w]).unwrap();
        let kw = Tensor::<f64>::ones(&[3, 2, k, k]).unwrap();
        let eff = (k - 1) * dilation + 1;
        let g = Conv2dGeom::new(stride, padding, dilation);
        match conv_value(&x, &kw, None, g) {
            Ok(y) => {
                prop_assert!(eff <= h + 2 * padding && eff <= w + 2 * padding);
                prop_assert_eq!(y.shape(), &[1, 3, (h + 2 * padding - eff) / stride + 1, (w + 2 * padding - eff) / stride + 1]);
            }
            Err(e) => {
                prop_assert!(matches!(e, Error::Geometry(_)));
                prop_assert!(eff > h + 2 * padding || eff > w + 2 * padding);
            }
        }
    }

    #[test]
    fn pool_and_upsample_shapes(h in 1usize..16, w in 1usize..16, oh in 1usize..16, ow in 1usize..16) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[2, 1, h, w]).unwrap());
        let up = x.upsample_bilinear(oh, ow).unwrap();
        prop_assert_eq!(up.shape(), vec![2, 1, oh, ow]);
        let pooled = x.adaptive_avg_pool2d(oh.min(h), ow.min(w)).unwrap();
        prop_assert_eq!(pooled.shape(), vec![2, 1, oh.min(h), ow.min(w)]);
    }

    #[test]
    fn conv_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x = randn(&[1, 2, 6, 6], seed);
        let y = randn(&[1, 2, 6, 6], seed + 1);
        let w = randn(&[3, 2, 3, 3], seed + 2);
        let g = Conv2dGeom::new(1, 2, 2);
        let mix = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv_value(&mix, &w, None, g).unwrap();
        let cx = conv_value(&x, &w, None, g).unwrap();
        let cy = conv_value(&y, &w, None, g).unwrap();
        let rhs = Tensor::new(cx.shape(), cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }

    #[test]
    fn softmax_normalizes(seed in 0u64..1000, axis in 0usize..3) {
        let tape = Tape::<f64>::new();
        let x = randn(&[3, 4, 5], seed).map(|v| 10.0 * v);
        let s = tape.constant(x.clone()).softmax(axis).unwrap();
        let sums = s.sum_axes(&[axis], false).unwrap().value();
        prop_assert!(sums.data().iter().all(|v| (v - 1.0).abs() <= 1e-6));
        let sig = tape.constant(x.map(|v| v / 4.0)).sigmoid().value();
        prop_assert!(sig.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
