use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_inputs, Tolerance};
use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, wd) = x.dims4("x").unwrap();
    let (cout, _, kh, kw) = w.dims4("w").unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((s * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((s * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
    let y = conv(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), 1, 0);
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_zero_kernel_annihilates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 3, 5, 5], &mut rng);
    let y = conv(&x, &Tensor::zeros(&[4, 3, 3, 3]), &Tensor::zeros(&[4]), 1, 1);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let got = conv(&x, &w, &b, stride, pad);
        let want = naive_conv(&x, &w, b.data(), stride, pad);
        for (g, e) in got.data().iter().zip(&want) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }
}

#[test]
fn conv_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let w = tape.constant(Tensor::zeros(&[3, 4, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let msg = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
    assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[3, 4, 3, 3]"), "{msg}");
}

fn bn(x: &Tensor, gamma: &[f64], beta: &[f64], mode: BnMode, stats: &mut RunningStats) -> Tensor {
    let c = gamma.len();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::new(&[c], gamma.to_vec()).unwrap());
    let b = tape.constant(Tensor::new(&[c], beta.to_vec()).unwrap());
    let y = tape.batchnorm2d(xv, g, b, stats, mode, BN_EPS).unwrap();
    tape.value(y).clone()
}

fn channel_moments(t: &Tensor) -> Vec<(f64, f64)> {
    let (n, c, h, w) = t.dims4("t").unwrap();
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|s| t.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            (m, v)
        })
        .collect()
}

#[test]
fn batchnorm_standardized_input_is_fixed_point() {
    let raw = Tensor::new(&[2, 1, 1, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let y = bn(&raw, &[1.0], &[0.0], BnMode::Train, &mut RunningStats::new(1));
    let k = 1.0 / (1.0 + BN_EPS).sqrt();
    for (a, b) in y.data().iter().zip(raw.data()) {
        assert!((a - b * k).abs() < 1e-15);
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batchnorm_zero_gamma_outputs_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 2, 4, 4], &mut rng);
    let y = bn(&x, &[0.0, 0.0], &[0.7, -0.2], BnMode::Train, &mut RunningStats::new(2));
    for (i, v) in y.data().iter().enumerate() {
        let ch = (i / 16) % 2;
        assert_eq!(*v, [0.7, -0.2][ch]);
    }
}

#[test]
fn batchnorm_train_output_has_zero_mean_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn(&[4, 3, 5, 5], |_| rng.random_range(-3.0..7.0));
    let y = bn(&x, &[1.0; 3], &[0.0; 3], BnMode::Train, &mut RunningStats::new(3));
    for (ch, ((m, v), (_, vin))) in channel_moments(&y).into_iter().zip(channel_moments(&x)).enumerate() {
        assert!(m.abs() < 1e-8, "channel {ch} mean {m}");
        // variance shrinks by var / (var + eps)
        assert!((v - vin / (vin + BN_EPS)).abs() < 1e-8, "channel {ch} var {v}");
    }
}

#[test]
fn batchnorm_running_stats_follow_momentum_and_drive_eval() {
    let x = Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut stats = RunningStats::new(1);
    bn(&x, &[1.0], &[0.0], BnMode::Train, &mut stats);
    assert!((stats.mean[0] - 0.25).abs() < 1e-15);
    // unbiased variance of 1..4 is 5/3
    assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    let frozen = stats.clone();
    let y = bn(&x, &[2.0], &[1.0], BnMode::Eval, &mut stats);
    assert_eq!(stats, frozen);
    let is = 1.0 / (frozen.var[0] + BN_EPS).sqrt();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - (2.0 * (b - frozen.mean[0]) * is + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_rejects_single_value_batches_in_train_mode() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let mut stats = RunningStats::new(2);
    assert!(tape.batchnorm2d(x, g, b, &mut stats, BnMode::Train, BN_EPS).is_err());
    assert!(tape.batchnorm2d(x, g, b, &mut stats, BnMode::Eval, BN_EPS).is_ok());
}

#[test]
fn elementwise_and_pooling_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);

    let c = tape.constant(Tensor::full(&[1, 2, 6, 6], 3.25));
    let p = tape.maxpool2d(c, 2, 2).unwrap();
    assert_eq!(tape.value(p).shape(), &[1, 2, 3, 3]);
    assert!(tape.value(p).data().iter().all(|&v| v == 3.25));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 7, 5], &mut rng);
    let xv = tape.constant(x.clone());
    let a = tape.adaptive_avgpool2d(xv, 1, 1).unwrap();
    for (plane, got) in tape.value(a).data().iter().enumerate() {
        let want: f64 = x.data()[plane * 35..(plane + 1) * 35].iter().sum::<f64>() / 35.0;
        assert!((got - want).abs() < 1e-14);
    }
}

#[test]
fn maxpool_ties_route_gradient_to_first_index() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0).with_grad());
    let p = tape.maxpool2d(x, 2, 2).unwrap();
    let l = tape.mean_all(p).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn adaptive_pool_handles_uneven_bins() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 1, 5], |i| i as f64));
    let p = tape.adaptive_avgpool2d(x, 1, 2).unwrap();
    // bins [0, 3) and [2, 5)
    assert_eq!(tape.value(p).data(), &[1.0, 3.0]);
}

#[test]
fn mse_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let tv = tape.constant(t.clone());
    let same = tape.mse_loss(tv, tv).unwrap();
    assert_eq!(tape.value(same).item(), 0.0);
    let shifted = tape.constant(Tensor::new(&[3, 4], t.data().iter().map(|v| v + 2.0).collect()).unwrap());
    let four = tape.mse_loss(shifted, tv).unwrap();
    assert!((tape.value(four).item() - 4.0).abs() < 1e-12);
    let p = random(&[3, 4], &mut rng);
    let pv = tape.constant(p.clone());
    let l = tape.mse_loss(pv, tv).unwrap();
    let oracle = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0;
    assert!((tape.value(l).item() - oracle).abs() < 1e-12);

    let e = tape.constant(Tensor::zeros(&[0]));
    assert!(tape.mse_loss(e, e).is_err());
    let other = tape.constant(Tensor::zeros(&[4, 3]));
    assert!(tape.mse_loss(other, tv).is_err());
}

#[test]
fn add_rejects_mismatched_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul_elem(a, b).is_err());
}

#[test]
fn backward_of_mean_spreads_evenly() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn(&[2, 5], |i| i as f64).with_grad());
    let m = tape.mean_all(x).unwrap();
    tape.backward(m).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.1));
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3]).with_grad());
    let y = tape.relu(x);
    assert!(tape.backward(y).is_err());
}

#[test]
fn shared_subexpression_gradients_sum() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1], vec![3.0]).unwrap().with_grad());
    let sq = tape.mul_elem(x, x).unwrap();
    let l = tape.mean_all(sq).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn repeated_backward_into_accumulates_until_zeroed() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParamSet::new();
    params.insert("w", random(&[3, 2], &mut rng).with_grad());
    params.insert("b", random(&[2], &mut rng).with_grad());
    let x = random(&[4, 3], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let w = tape.param(&params, "w").unwrap();
    let b = tape.param(&params, "b").unwrap();
    let y = tape.linear(xv, w, b).unwrap();
    let s = tape.sigmoid(y);
    let l = tape.mean_all(s).unwrap();
    tape.backward_into(l, &mut params).unwrap();
    let once: Vec<f64> = params.get("w").unwrap().grad().unwrap().to_vec();
    tape.backward_into(l, &mut params).unwrap();
    let twice = params.get("w").unwrap().grad().unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
    params.zero_grad();
    assert!(params.get("w").unwrap().grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn forward_and_gradients_are_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 2, 6, 6], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng).with_grad();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.leaf(w);
        let bv = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
        let c = tape.cab(y, 1e-4).unwrap();
        let l = tape.mean_all(c).unwrap();
        tape.backward(l).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        (bits(tape.value(c).data()), bits(tape.grad(wv).unwrap()))
    };
    assert_eq!(run(), run());
}

#[test]
fn tiny_network_gradients_match_finite_differences() {
    // loss = mse(sigmoid(x W + b), t)
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[4, 3], &mut rng);
    let t = random(&[4, 2], &mut rng);
    let inputs = vec![random(&[3, 2], &mut rng), random(&[2], &mut rng)];
    let report = check_inputs(&inputs, Tolerance::default(), |tape, v| {
        let xv = tape.constant(x.clone());
        let tv = tape.constant(t.clone());
        let y = tape.linear(xv, v[0], v[1])?;
        let s = tape.sigmoid(y);
        tape.mse_loss(s, tv)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn each_op_passes_a_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tol = Tolerance::default();
    let checks: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>)> = vec![
        (
            "conv2d",
            vec![random(&[2, 2, 4, 4], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                let s = t.sigmoid(y);
                t.mean_all(s)
            }),
        ),
        (
            "batchnorm2d",
            vec![random(&[2, 2, 3, 3], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)],
            Box::new(|t, v| {
                let mut stats = RunningStats::new(2);
                let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Train, BN_EPS)?;
                let s = t.sigmoid(y);
                t.mean_all(s)
            }),
        ),
        (
            "cab",
            vec![random(&[1, 2, 3, 3], &mut rng)],
            Box::new(|t, v| {
                let y = t.cab(v[0], 1e-4)?;
                let s = t.sigmoid(y);
                t.mean_all(s)
            }),
        ),
        (
            "channel_pool+gate",
            vec![random(&[2, 3, 4, 4], &mut rng), random(&[1, 2, 3, 3], &mut rng), random(&[1], &mut rng)],
            Box::new(|t, v| {
                let pooled = t.channel_pool(v[0])?;
                let logits = t.conv2d(pooled, v[1], v[2], 1, 1)?;
                let gate = t.sigmoid(logits);
                let out = t.gate(v[0], gate)?;
                let s = t.sigmoid(out);
                t.mean_all(s)
            }),
        ),
        (
            "maxpool+relu+linear",
            vec![random(&[2, 1, 4, 4], &mut rng), random(&[4, 3], &mut rng), random(&[3], &mut rng)],
            Box::new(|t, v| {
                let p = t.maxpool2d(v[0], 2, 2)?;
                let r = t.relu(p);
                let f = t.reshape(r, &[2, 4])?;
                let y = t.linear(f, v[1], v[2])?;
                let s = t.sigmoid(y);
                t.mean_all(s)
            }),
        ),
        (
            "scale+recip+clamp",
            vec![Tensor::from_fn(&[5], |i| 0.5 + i as f64 * 0.3)],
            Box::new(|t, v| {
                let s = t.scale(v[0], 1.7);
                let c = t.clamp_min(s, 1.0);
                let r = t.recip(c)?;
                t.mean_all(r)
            }),
        ),
    ];
    for (name, inputs, f) in checks {
        let report = check_inputs(&inputs, tol, |t, v| f(t, v)).unwrap();
        assert!(report.passed(), "{name}: {report:?}");
    }
}
