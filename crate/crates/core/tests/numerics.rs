use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2me::numerics::{
    grad_check, irfft2, rfft2, softmax_channels, ComplexSpectrum, GradCheckOptions, OpKind, Parameter, Tape, Tensor,
};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn param(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Parameter<f64> {
    Parameter::new(name, random(shape, rng))
}

/// Random linear functional of `y`, so that every output coordinate carries
/// a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, y: s2me::numerics::Var, seed: u64) -> s2me::numerics::Result<s2me::numerics::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.leaf(random(&shape, &mut rng));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn check(
    name: &str,
    params: Vec<Parameter<f64>>,
    f: impl FnMut(&mut Tape<f64>, &[s2me::numerics::Var]) -> s2me::numerics::Result<s2me::numerics::Var>,
) {
    let report = grad_check(f, &params, &GradCheckOptions::f64()).unwrap();
    assert!(report.passed(), "{name}: {report:?}");
}

const SHAPES: [[usize; 4]; 3] = [[1, 2, 4, 4], [2, 3, 6, 8], [1, 1, 8, 6]];

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, s) in SHAPES.iter().enumerate() {
        for (k, pad, stride) in [(3, 1, 1), (1, 0, 1), (3, 1, 2)] {
            if (s[2] + 2 * pad - k) % stride != 0 || (s[3] + 2 * pad - k) % stride != 0 {
                continue;
            }
            let params = vec![
                param("x", s, &mut rng),
                param("w", &[3, s[1], k, k], &mut rng),
                param("b", &[3], &mut rng),
            ];
            check("conv2d", params, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), pad, stride)?;
                probe(t, y, i as u64)
            });
        }
    }
}

#[test]
fn conv2d_then_sum_on_5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![param("x", &[1, 1, 5, 5], &mut rng), param("w", &[1, 1, 3, 3], &mut rng)];
    check("conv2d-sum", params, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 1)?;
        Ok(t.sum(y))
    });
}

#[test]
fn pooling_upsampling_relu_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (i, s) in SHAPES.iter().enumerate() {
        check("max_pool2", vec![param("x", s, &mut rng)], |t, v| {
            let y = t.max_pool2(v[0])?;
            probe(t, y, i as u64)
        });
        check("upsample2", vec![param("x", s, &mut rng)], |t, v| {
            let y = t.upsample2(v[0])?;
            probe(t, y, i as u64)
        });
        check("relu", vec![param("x", s, &mut rng)], |t, v| {
            let y = t.relu(v[0]);
            probe(t, y, i as u64)
        });
        let other = [s[0], 2, s[2], s[3]];
        check(
            "concat",
            vec![param("a", s, &mut rng), param("b", &other, &mut rng)],
            |t, v| {
                let y = t.concat(&[v[0], v[1]])?;
                probe(t, y, i as u64)
            },
        );
    }
}

#[test]
fn normalization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (i, s) in SHAPES.iter().enumerate() {
        let c = s[1];
        let mk = |rng: &mut ChaCha8Rng| {
            vec![
                param("x", s, rng),
                Parameter::new("gamma", Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5))),
                param("beta", &[c], rng),
            ]
        };
        check("batch_norm_train", mk(&mut rng), |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, i as u64)
        });
        check("instance_norm", mk(&mut rng), |t, v| {
            let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, i as u64)
        });
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        check("batch_norm_eval", mk(&mut rng), |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            probe(t, y, i as u64)
        });
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (i, s) in SHAPES.iter().enumerate() {
        let pair = |rng: &mut ChaCha8Rng| vec![param("a", s, rng), param("b", s, rng)];
        check("add", pair(&mut rng), |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, i as u64)
        });
        check("sub", pair(&mut rng), |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, i as u64)
        });
        check("mul", pair(&mut rng), |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, i as u64)
        });
        check("scale+add_scalar", vec![param("a", s, &mut rng)], |t, v| {
            let y = t.scale(v[0], -2.5);
            let y = t.add_scalar(y, 0.3);
            probe(t, y, i as u64)
        });
        let positive = Parameter::new("a", Tensor::from_fn(s, |_| rng.gen_range(0.2..2.0)));
        check("log", vec![positive], |t, v| {
            let y = t.log(v[0])?;
            probe(t, y, i as u64)
        });
        check("mean", vec![param("a", s, &mut rng)], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        });
        let multi = [s[0], s[1].max(2), s[2], s[3]];
        check("softmax", vec![param("a", &multi, &mut rng)], |t, v| {
            let y = t.softmax_channels(v[0])?;
            probe(t, y, i as u64)
        });
    }
}

#[test]
fn spectral_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (i, s) in [[1, 1, 4, 4], [2, 2, 5, 6], [1, 3, 6, 7]].iter().enumerate() {
        check("rfft2", vec![param("x", s, &mut rng)], |t, v| {
            let y = t.rfft2(v[0])?;
            probe(t, y, i as u64)
        });
        let half = [s[0], 2 * s[1], s[2], s[3] / 2 + 1];
        let w = s[3];
        check("irfft2", vec![param("spec", &half, &mut rng)], |t, v| {
            let y = t.irfft2(v[0], w)?;
            probe(t, y, i as u64)
        });
    }
}

#[test]
fn loss_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for s in [[1, 2, 4, 4], [2, 2, 3, 5], [2, 3, 4, 2]].iter() {
        let pixels = s[0] * s[2] * s[3];
        let c = s[1] as u8;
        let targets: Vec<u8> = (0..pixels).map(|_| rng.gen_range(0..c)).collect();
        let masked: Vec<u8> = (0..pixels).map(|_| rng.gen_range(0..=c)).collect();
        check("cross_entropy", vec![param("l", s, &mut rng)], |t, v| {
            t.cross_entropy(v[0], &targets, None)
        });
        check("cross_entropy_masked", vec![param("l", s, &mut rng)], |t, v| {
            t.cross_entropy(v[0], &masked, Some(c))
        });
        check("soft_dice", vec![param("l", s, &mut rng)], |t, v| {
            let p = t.softmax_channels(v[0])?;
            t.soft_dice(p, &targets, 1e-5)
        });
    }
}

#[test]
fn injected_conv_fault_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = [1, 2, 4, 4];
    let params = vec![param("x", &s, &mut rng), param("w", &[2, 2, 3, 3], &mut rng)];
    let report = grad_check(
        |t, v| {
            t.inject_fault(OpKind::Conv2d);
            let y = t.conv2d(v[0], v[1], None, 1, 1)?;
            probe(t, y, 0)
        },
        &params,
        &GradCheckOptions::f64(),
    )
    .unwrap();
    assert!(!report.passed());
}

#[test]
fn fft_constant_image_has_only_dc() {
    let c = 0.75f64;
    let t = Tensor::full(&[1, 1, 4, 6], c);
    let s = rfft2(&t).unwrap();
    assert!((s.real.data()[0] - c * 24.0).abs() < 1e-12);
    for i in 1..s.real.len() {
        assert!(s.real.data()[i].abs() < 1e-12 && s.imag.data()[i].abs() < 1e-12);
    }
}

#[test]
fn irfft2_of_dc_and_zero_spectra() {
    let (h, w) = (4, 6);
    let mut re = Tensor::<f64>::zeros(&[1, 1, h, w / 2 + 1]);
    re.data_mut()[0] = (h * w) as f64;
    let im = Tensor::zeros(re.shape());
    let spec = ComplexSpectrum::new(re, im.clone()).unwrap();
    let x = irfft2(&spec, w).unwrap();
    assert!(x.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    let zero = ComplexSpectrum::new(im.clone(), im).unwrap();
    assert!(irfft2(&zero, w).unwrap().data().iter().all(|&v| v == 0.0));
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn fft_roundtrip_and_parseval_all_small_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for h in 2..=16 {
        for w in 2..=16 {
            let x = Tensor::<f32>::from_fn(&[1, 2, h, w], |_| rng.gen_range(-1.0..1.0));
            let s = rfft2(&x).unwrap();
            let back = irfft2(&s, w).unwrap();
            let norm: f64 = x.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let err: f64 = x
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err / norm < 1e-4, "roundtrip {h}x{w}: {}", err / norm);
            let energy = s.energy(w);
            let sumsq: f64 = x.data().iter().map(|v| (*v as f64).powi(2)).sum();
            assert!(rel(energy, (h * w) as f64 * sumsq) < 1e-4, "parseval {h}x{w}");
        }
    }
}

#[test]
fn spectrum_roundtrip_from_real_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (h, w) in [(8, 8), (5, 7), (6, 9)] {
        let x = Tensor::<f64>::from_fn(&[2, 1, h, w], |_| rng.gen_range(-1.0..1.0));
        let s = rfft2(&x).unwrap();
        let s2 = rfft2(&irfft2(&s, w).unwrap()).unwrap();
        assert!(s.real.max_abs_diff(&s2.real) < 1e-10);
        assert!(s.imag.max_abs_diff(&s2.imag) < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_normalized_and_shift_invariant(
        vals in prop::collection::vec(-30.0f32..30.0, 3 * 4),
        shift in prop::collection::vec(-50.0f32..50.0, 4),
    ) {
        let x = Tensor::new(vec![1, 3, 2, 2], vals).unwrap();
        let p = softmax_channels(&x).unwrap();
        for i in 0..4 {
            let s: f32 = (0..3).map(|c| p.data()[c * 4 + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!((0..3).all(|c| p.data()[c * 4 + i] >= 0.0));
        }
        let shifted = Tensor::from_fn(&[1, 3, 2, 2], |j| x.data()[j] + shift[j % 4]);
        let q = softmax_channels(&shifted).unwrap();
        prop_assert!(p.max_abs_diff(&q) < 1e-5);
    }

    #[test]
    fn conv2d_is_linear(
        seed in 0u64..1000,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 2, 6, 5], &mut rng);
        let y = random(&[1, 2, 6, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let conv = |input: Tensor<f64>| {
            let mut t = Tape::new();
            let xi = t.leaf(input);
            let wi = t.leaf(w.clone());
            let o = t.conv2d(xi, wi, None, 1, 1).unwrap();
            t.value(o).clone()
        };
        let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv(mix);
        let cx = conv(x);
        let cy = conv(y);
        let rhs = Tensor::from_fn(cx.shape(), |i| a * cx.data()[i] + b * cy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }
}
