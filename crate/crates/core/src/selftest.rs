//! Built-in release checks: gradient fidelity, fusion algebra, FFT contracts,
//! metric oracles, loss hand values and schedules.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{confusion_metrics, hausdorff};
use crate::fusion::{self, entropy_map, entropy_weights, fuse_entropy, fuse_equal, EntropyMap};
use crate::labels::{LabelMap, UNLABELED};
use crate::losses::{
    ensemble_loss, hybrid_loss, lambda_rampup, mutual_teaching_loss, partial_cross_entropy, BranchOutputs, LossWeights,
    Mixing,
};
use crate::models::{BranchModel, Mode, ModelConfig, ModelKind};
use crate::numerics::{
    grad_check, irfft2, rfft2, GradCheckOptions, NumericsError, OpKind, Parameter, Tape, Tensor, Var,
};
use crate::trainer::poly_lr;

/// Options shared by all checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Deliberately corrupt the backward rule of one op.
    pub fault: Option<OpKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type CheckFn = fn(&SelftestOptions) -> Result<String, String>;

pub struct Check {
    pub name: &'static str,
    run: CheckFn,
}

pub fn checks() -> Vec<Check> {
    let list: [(&'static str, CheckFn); 26] = [
        ("grad/conv2d", grad_conv2d),
        ("grad/max_pool2", |o| {
            grad_unary(o, OpKind::MaxPool2, |t, x| t.max_pool2(x))
        }),
        ("grad/upsample2", |o| {
            grad_unary(o, OpKind::Upsample2, |t, x| t.upsample2(x))
        }),
        ("grad/relu", |o| grad_unary(o, OpKind::Relu, |t, x| Ok(t.relu(x)))),
        ("grad/concat", grad_concat),
        ("grad/norm", grad_norm),
        ("grad/add", |o| grad_binary(o, OpKind::Add, |t, a, b| t.add(a, b))),
        ("grad/sub", |o| grad_binary(o, OpKind::Sub, |t, a, b| t.sub(a, b))),
        ("grad/mul", |o| grad_binary(o, OpKind::Mul, |t, a, b| t.mul(a, b))),
        ("grad/scale", |o| {
            grad_unary(o, OpKind::Scale, |t, x| Ok(t.scale(x, -2.5)))
        }),
        ("grad/add_scalar", |o| {
            grad_unary(o, OpKind::AddScalar, |t, x| Ok(t.add_scalar(x, 0.3)))
        }),
        ("grad/log", grad_log),
        ("grad/sum", |o| grad_reduce(o, OpKind::Sum, |t, x| t.sum(x))),
        ("grad/mean", |o| grad_reduce(o, OpKind::Mean, |t, x| t.mean(x))),
        ("grad/softmax", |o| {
            grad_unary(o, OpKind::Softmax, |t, x| t.softmax_channels(x))
        }),
        ("grad/fft", grad_fft),
        ("grad/losses", grad_losses),
        ("grad/hybrid_loss", grad_hybrid),
        ("grad/models", grad_models),
        ("fusion/algebra", fusion_algebra),
        ("fusion/oracle", fusion_oracle),
        ("fft/contracts", fft_contracts),
        ("metrics/oracles", metric_oracles),
        ("losses/hand_values", loss_hand_values),
        ("losses/pce_mask", pce_mask),
        ("schedules", schedules),
    ];
    list.into_iter().map(|(name, run)| Check { name, run }).collect()
}

/// Runs every check whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>, opts: &SelftestOptions) -> Vec<CheckOutcome> {
    checks()
        .into_iter()
        .filter(|c| filter.map_or(true, |f| c.name.contains(f)))
        .map(|c| {
            let start = Instant::now();
            let result = (c.run)(opts);
            let seconds = start.elapsed().as_secs_f64();
            let (passed, detail) = match result {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome {
                name: c.name.to_string(),
                passed,
                detail,
                seconds,
            }
        })
        .collect()
}

const SHAPES: [[usize; 4]; 3] = [[1, 2, 4, 4], [2, 3, 6, 8], [1, 1, 8, 6]];

type Res<T> = Result<T, NumericsError>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn param(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Parameter<f64> {
    Parameter::new(name, random(shape, rng))
}

/// Random linear functional, so every output coordinate gets its own
/// upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Res<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = random(&tape.shape(y).to_vec(), &mut rng);
    let w = tape.leaf(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Finite-difference check of `f` in the 64-bit shadow mode.
fn check_grad(
    label: &str,
    opts: &SelftestOptions,
    params: Vec<Parameter<f64>>,
    mut f: impl FnMut(&mut Tape<f64>, &[Var]) -> Res<Var>,
) -> Result<f64, String> {
    let fault = opts.fault;
    let report = grad_check(
        |t, v| {
            if let Some(op) = fault {
                t.inject_fault(op);
            }
            f(t, v)
        },
        &params,
        &GradCheckOptions::f64(),
    )
    .map_err(|e| format!("{label}: {e}"))?;
    if report.passed() {
        Ok(report.max_rel_err())
    } else {
        let w = report.worst.expect("failed report has an offender");
        Err(format!(
            "{label}: gradient mismatch on `{}`[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.2e}",
            w.param, w.index, w.analytic, w.numeric, w.rel_err
        ))
    }
}

fn summary(errs: &[f64]) -> String {
    format!(
        "{} cases, max rel err {:.2e}",
        errs.len(),
        errs.iter().cloned().fold(0.0, f64::max)
    )
}

fn grad_conv2d(o: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut errs = Vec::new();
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
            errs.push(check_grad("conv2d", o, params, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), pad, stride)?;
                probe(t, y, i as u64)
            })?);
        }
    }
    Ok(summary(&errs))
}

fn grad_unary(o: &SelftestOptions, op: OpKind, f: fn(&mut Tape<f64>, Var) -> Res<Var>) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2 + op as u64);
    let mut errs = Vec::new();
    for (i, s) in SHAPES.iter().enumerate() {
        let shape = [s[0], s[1].max(2), s[2], s[3]];
        errs.push(check_grad(op.name(), o, vec![param("x", &shape, &mut rng)], |t, v| {
            let y = f(t, v[0])?;
            probe(t, y, i as u64)
        })?);
    }
    Ok(summary(&errs))
}

fn grad_binary(o: &SelftestOptions, op: OpKind, f: fn(&mut Tape<f64>, Var, Var) -> Res<Var>) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(30 + op as u64);
    let mut errs = Vec::new();
    for (i, s) in SHAPES.iter().enumerate() {
        let params = vec![param("a", s, &mut rng), param("b", s, &mut rng)];
        errs.push(check_grad(op.name(), o, params, |t, v| {
            let y = f(t, v[0], v[1])?;
            probe(t, y, i as u64)
        })?);
    }
    Ok(summary(&errs))
}

fn grad_reduce(o: &SelftestOptions, op: OpKind, f: fn(&mut Tape<f64>, Var) -> Var) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(60 + op as u64);
    let mut errs = Vec::new();
    for s in SHAPES.iter() {
        errs.push(check_grad(op.name(), o, vec![param("x", s, &mut rng)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(f(t, sq))
        })?);
    }
    Ok(summary(&errs))
}

fn grad_concat(o: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut errs = Vec::new();
    for (i, s) in SHAPES.iter().enumerate() {
        let other = [s[0], 2, s[2], s[3]];
        let params = vec![param("a", s, &mut rng), param("b", &other, &mut rng)];
        errs.push(check_grad("concat", o, params, |t, v| {
            let y = t.concat(&[v[0], v[1]])?;
            probe(t, y, i as u64)
        })?);
    }
    Ok(summary(&errs))
}

fn grad_norm(o: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut errs = Vec::new();
    for (i, s) in SHAPES.iter().enumerate() {
        let c = s[1];
        let mut mk = || {
            vec![
                param("x", s, &mut rng),
                Parameter::new("gamma", Tensor::from_fn(&[c], |_| 1.0 + 0.4 * ((i + c) as f64).sin())),
                param("beta", &[c], &mut ChaCha8Rng::seed_from_u64(i as u64)),
            ]
        };
        errs.push(check_grad("norm (batch, train)", o, mk(), |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, i as u64)
        })?);
        errs.push(check_grad("norm (instance)", o, mk(), |t, v| {
            let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, i as u64)
        })?);
        let mean: Vec<f64> = (0..c).map(|k| 0.1 * k as f64).collect();
        let var: Vec<f64> = (0..c).map(|k| 0.5 + 0.25 * k as f64).collect();
        errs.push(check_grad("norm (batch, eval)", o, mk(), |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            probe(t, y, i as u64)
        })?);
    }
    Ok(summary(&errs))
}

fn grad_log(o: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut errs = Vec::new();
    for (i, s) in SHAPES.iter().enumerate() {
        let x = Parameter::new("x", Tensor::from_fn(s, |_| rng.gen_range(0.2..2.0)));
        errs.push(check_grad("log", o, vec![x], |t, v| {
            let y = t.log(v[0])?;
            probe(t, y, i as u64)
        })?);
    }
    Ok(summary(&errs))
}

fn grad_fft(o: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut errs = Vec::new();
    for (i, s) in [[1, 1, 4, 4], [2, 2, 5, 6], [1, 3, 6, 7]].iter().enumerate() {
        errs.push(check_grad("rfft2", o, vec![param("x", s, &mut rng)], |t, v| {
            let y = t.rfft2(v[0])?;
            probe(t, y, i as u64)
        })?);
        let half = [s[0], 2 * s[1], s[2], s[3] / 2 + 1];
        let w = s[3];
        errs.push(check_grad(
            "irfft2",
            o,
            vec![param("spec", &half, &mut rng)],
            |t, v| {
                let y = t.irfft2(v[0], w)?;
                probe(t, y, i as u64)
            },
        )?);
    }
    Ok(summary(&errs))
}

fn grad_losses(o: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut errs = Vec::new();
    for s in [[1, 2, 4, 4], [2, 2, 3, 5], [2, 3, 4, 2]].iter() {
        let pixels = s[0] * s[2] * s[3];
        let c = s[1] as u8;
        let targets: Vec<u8> = (0..pixels).map(|_| rng.gen_range(0..c)).collect();
        let masked: Vec<u8> = (0..pixels).map(|_| rng.gen_range(0..=c)).collect();
        errs.push(check_grad(
            "cross_entropy",
            o,
            vec![param("l", s, &mut rng)],
            |t, v| t.cross_entropy(v[0], &targets, None),
        )?);
        errs.push(check_grad(
            "cross_entropy (masked)",
            o,
            vec![param("l", s, &mut rng)],
            |t, v| t.cross_entropy(v[0], &masked, Some(c)),
        )?);
        errs.push(check_grad("soft_dice", o, vec![param("l", s, &mut rng)], |t, v| {
            let p = t.softmax_channels(v[0])?;
            t.soft_dice(p, &targets, 1e-5)
        })?);
    }
    Ok(summary(&errs))
}

fn loss_err(e: crate::losses::LossError) -> NumericsError {
    NumericsError::Invalid(e.to_string())
}

/// Full objective with the pseudo labels of the unperturbed point held
/// fixed; an argmax flip inside a finite-difference step is not a gradient.
fn grad_hybrid(o: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut errs = Vec::new();
    for (n, h, w) in [(1, 4, 4), (2, 3, 5), (2, 6, 2)] {
        let la = random(&[n, 2, h, w], &mut rng).map(|v| 2.0 * v);
        let lb = random(&[n, 2, h, w], &mut rng).map(|v| 2.0 * v);
        let scrib: Vec<u8> = (0..n * h * w)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    rng.gen_range(0..2)
                } else {
                    UNLABELED
                }
            })
            .collect();
        let scrib = LabelMap::new(n, h, w, scrib).map_err(|e| e.to_string())?;
        let weights = LossWeights::new(1.7, 0.9);
        let mut tape = Tape::<f64>::new();
        let (va, vb) = (tape.leaf(la.clone()), tape.leaf(lb.clone()));
        let oa = BranchOutputs::from_logits(&mut tape, va).map_err(|e| e.to_string())?;
        let ob = BranchOutputs::from_logits(&mut tape, vb).map_err(|e| e.to_string())?;
        let reference = hybrid_loss(&mut tape, oa, ob, &scrib, weights, Mixing::Entropy).map_err(|e| e.to_string())?;
        let labels = reference.prediction;
        let params = vec![Parameter::new("logits_spa", la), Parameter::new("logits_spe", lb)];
        errs.push(check_grad("hybrid_loss", o, params, |t, v| {
            let a = BranchOutputs::from_logits(t, v[0]).map_err(loss_err)?;
            let b = BranchOutputs::from_logits(t, v[1]).map_err(loss_err)?;
            let pa = partial_cross_entropy(t, a.logits, &scrib).map_err(loss_err)?;
            let pb = partial_cross_entropy(t, b.logits, &scrib).map_err(loss_err)?;
            let mt = mutual_teaching_loss(t, a, b, &labels.y_spa, &labels.y_spe).map_err(loss_err)?;
            let el = ensemble_loss(t, a, b, &labels.y_fused).map_err(loss_err)?;
            let s = t.add(pa, pb)?;
            let mt = t.scale(mt, weights.lambda_mt);
            let el = t.scale(el, weights.lambda_el);
            let s = t.add(s, mt)?;
            t.add(s, el)
        })?);
    }
    Ok(summary(&errs))
}

fn grad_models(o: &SelftestOptions) -> Result<String, String> {
    let mut errs = Vec::new();
    for (kind, seed) in [(ModelKind::Unet, 11), (ModelKind::Ynet, 12)] {
        let mut model = BranchModel::build(ModelConfig::new(kind, 4, 2), seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 3, 8, 8], &mut rng);
        let params: Vec<Parameter<f64>> = model
            .store
            .params
            .iter()
            .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
            .collect();
        let label = format!("{kind} forward");
        errs.push(check_grad(&label, o, params, |t, v| {
            let xv = t.leaf(x.clone());
            let y = model
                .forward(t, v, xv, Mode::Train)
                .map_err(|e| NumericsError::Invalid(e.to_string()))?;
            probe(t, y, seed)
        })?);
    }
    Ok(summary(&errs))
}

fn fusion_algebra(_: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pixel = |q: f32| Tensor::new(vec![1, 2, 1, 1], vec![q, 1.0 - q]).expect("pixel shape");
    let fused = |a: &Tensor<f32>, b: &Tensor<f32>| -> Result<Tensor<f32>, String> {
        let (ha, hb) = (
            entropy_map(a).map_err(|e| e.to_string())?,
            entropy_map(b).map_err(|e| e.to_string())?,
        );
        fuse_entropy(a, b, &ha, &hb).map_err(|e| e.to_string())
    };
    const CASES: usize = 10_000;
    for i in 0..CASES {
        let (ha, hb) = (rng.gen_range(0.0f32..0.7), rng.gen_range(0.0f32..0.7));
        let (wa, wb) = entropy_weights(ha, hb);
        if ((wa + wb) - 1.0).abs() > 1e-6 {
            return Err(format!("case {i}: weights sum to {}", wa + wb));
        }
        let (a, b) = (pixel(rng.gen_range(0.0..=1.0)), pixel(rng.gen_range(0.0..=1.0)));
        let e = EntropyMap {
            values: Tensor::new(vec![1, 1, 1], vec![ha]).expect("entropy shape"),
        };
        let f = fuse_entropy(&a, &b, &e, &e).map_err(|e| e.to_string())?;
        let m = fuse_equal(&a, &b).map_err(|e| e.to_string())?;
        if f.max_abs_diff(&m) > 1e-6 {
            return Err(format!("case {i}: equal entropies do not give the mean"));
        }
        if fused(&a, &b)? != fused(&b, &a)? {
            return Err(format!("case {i}: fusion is not swap symmetric"));
        }
        let hot = pixel(if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let hb = entropy_map(&b).map_err(|e| e.to_string())?.values.data()[0];
        if hb > 0.0 && (fused(&hot, &b)? != hot || fused(&b, &hot)? != hot) {
            return Err(format!("case {i}: zero-entropy branch does not dominate"));
        }
    }
    Ok(format!("{CASES} cases"))
}

fn fusion_oracle(_: &SelftestOptions) -> Result<String, String> {
    let s = fusion::oracle::score(&fusion::oracle::cases(3), 200).map_err(|e| e.to_string())?;
    if s.entropy > s.equal && s.entropy > s.random {
        Ok(format!(
            "accuracy entropy {:.3}, equal {:.3}, random {:.3}",
            s.entropy, s.equal, s.random
        ))
    } else {
        Err(format!("entropy fusion does not win: {s:?}"))
    }
}

fn fft_contracts(_: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for h in 2..=16 {
        for w in 2..=16 {
            let x = Tensor::<f32>::from_fn(&[1, 2, h, w], |_| rng.gen_range(-1.0..1.0));
            let s = rfft2(&x).map_err(|e| e.to_string())?;
            let back = irfft2(&s, w).map_err(|e| e.to_string())?;
            let sumsq: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
            let err: f64 = x
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            let roundtrip = (err / sumsq).sqrt();
            let parseval = (s.energy(w) - (h * w) as f64 * sumsq).abs() / ((h * w) as f64 * sumsq);
            worst = worst.max(roundtrip).max(parseval);
            if roundtrip >= 1e-4 || parseval >= 1e-4 {
                return Err(format!("{h}x{w}: roundtrip {roundtrip:.2e}, parseval {parseval:.2e}"));
            }
        }
    }
    Ok(format!("225 sizes, worst relative error {worst:.2e}"))
}

fn brute_hd(a: &[u8], b: &[u8], h: usize, w: usize) -> f64 {
    let edge = |m: &[u8]| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if m[y * w + x] != 1 {
                    continue;
                }
                let bg = |yy: i64, xx: i64| {
                    yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 || m[yy as usize * w + xx as usize] != 1
                };
                let (yi, xi) = (y as i64, x as i64);
                if bg(yi - 1, xi) || bg(yi + 1, xi) || bg(yi, xi - 1) || bg(yi, xi + 1) {
                    out.push((y as f64, x as f64));
                }
            }
        }
        out
    };
    let (ea, eb) = (edge(a), edge(b));
    match (ea.is_empty(), eb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((h * h + w * w) as f64).sqrt(),
        _ => {}
    }
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| {
        p.iter()
            .map(|u| {
                q.iter()
                    .map(|v| (u.0 - v.0).hypot(u.1 - v.1))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(&ea, &eb).max(directed(&eb, &ea))
}

fn metric_oracles(_: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut count = 0;
    for h in 1..=12 {
        for w in 1..=12 {
            for _ in 0..10 {
                let mut map = || {
                    let mut m = vec![0u8; h * w];
                    for _ in 0..rng.gen_range(0..=6) {
                        m[rng.gen_range(0..h * w)] = 1;
                    }
                    m
                };
                let (a, b) = (map(), map());
                let got = hausdorff(&a, &b, h, w, 100.0).map_err(|e| e.to_string())?;
                let want = brute_hd(&a, &b, h, w);
                if (got - want).abs() > 1e-9 {
                    return Err(format!("{h}x{w}: hausdorff {got} vs all-pairs {want}"));
                }
                let (dsc, iou, _) = confusion_metrics(&a, &b).map_err(|e| e.to_string())?;
                if (dsc - 2.0 * iou / (1.0 + iou)).abs() > 1e-9 {
                    return Err(format!("{h}x{w}: dsc {dsc} inconsistent with iou {iou}"));
                }
                count += 1;
            }
        }
    }
    let gt: Vec<u8> = (0..16).map(|i| (i < 8) as u8).collect();
    let pred: Vec<u8> = (0..16).map(|i| (4..12).contains(&i) as u8).collect();
    let got = confusion_metrics(&pred, &gt).map_err(|e| e.to_string())?;
    if got != (0.5, 1.0 / 3.0, 0.5) {
        return Err(format!("worked confusion example gives {got:?}"));
    }
    Ok(format!("{count} random instances"))
}

fn single_pixel_logits(tape: &mut Tape<f32>, p0: f64) -> Var {
    tape.leaf(Tensor::new(vec![1, 2, 1, 1], vec![(p0 / (1.0 - p0)).ln() as f32, 0.0]).expect("pixel shape"))
}

fn loss_hand_values(o: &SelftestOptions) -> Result<String, String> {
    let lm = |v: &[u8]| LabelMap::new(1, 1, v.len(), v.to_vec()).expect("label shape");
    let mut t = Tape::<f32>::new();
    if let Some(op) = o.fault {
        t.inject_fault(op);
    }
    let e = |x: crate::losses::LossError| x.to_string();
    let check = |name: &str, got: f64, want: f64| -> Result<(), String> {
        if (got - want).abs() > 1e-5 {
            Err(format!("{name}: {got} vs {want}"))
        } else {
            Ok(())
        }
    };
    let l = t.leaf(Tensor::zeros(&[1, 2, 1, 1]));
    let v = partial_cross_entropy(&mut t, l, &lm(&[1])).map_err(e)?;
    check("pCE", t.value(v).item() as f64, 2f64.ln())?;

    let l = t.leaf(Tensor::new(vec![1, 2, 1, 2], vec![(9f32).ln(), 0.0, 0.0, 0.0]).expect("shape"));
    let v = crate::losses::cross_entropy(&mut t, l, &lm(&[0, 1])).map_err(e)?;
    check("CE", t.value(v).item() as f64, 0.399254)?;

    let p = t.leaf(Tensor::full(&[1, 2, 1, 4], 0.5));
    let v = crate::losses::dice_loss(&mut t, p, &lm(&[1, 1, 0, 0])).map_err(e)?;
    check("Dice", t.value(v).item() as f64, 0.5)?;

    let (a, b) = (single_pixel_logits(&mut t, 0.9), single_pixel_logits(&mut t, 0.5));
    let oa = BranchOutputs::from_logits(&mut t, a).map_err(e)?;
    let ob = BranchOutputs::from_logits(&mut t, b).map_err(e)?;
    let h = hybrid_loss(&mut t, oa, ob, &lm(&[0]), LossWeights::new(5.0, 5.0), Mixing::Entropy).map_err(e)?;
    // CE + Dice of one pixel with p(class 0) = p against label 0.
    let sup = |p: f64| -p.ln() + 1.0 - ((2.0 * p + 1e-5) / (p + 1.0 + 1e-5) + 1e-5 / (1.0 - p + 1e-5)) / 2.0;
    let term = sup(0.9) + sup(0.5);
    let scrib = -(0.9f64).ln() - (0.5f64).ln();
    check("hybrid", h.values.total, scrib + 10.0 * term)?;
    Ok("pCE, CE, Dice and hybrid within 1e-5".into())
}

fn pce_mask(o: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for case in 0..100 {
        let (n, h, w) = (rng.gen_range(1..4), rng.gen_range(2..10), rng.gen_range(2..10));
        let logits = Tensor::<f32>::from_fn(&[n, 2, h, w], |_| rng.gen_range(-4.0..4.0));
        let scrib: Vec<u8> = (0..n * h * w)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    rng.gen_range(0..2)
                } else {
                    UNLABELED
                }
            })
            .collect();
        let mask = LabelMap::new(n, h, w, scrib).map_err(|e| e.to_string())?;
        let mut t = Tape::<f32>::new();
        if let Some(op) = o.fault {
            t.inject_fault(op);
        }
        let l = t.leaf(logits);
        let loss = partial_cross_entropy(&mut t, l, &mask).map_err(|e| e.to_string())?;
        let g = t
            .backward(loss)
            .map_err(|e| e.to_string())?
            .get_or_zeros(l, &[n, 2, h, w]);
        let hw = h * w;
        for (i, &s) in mask.data().iter().enumerate() {
            let (b, p) = (i / hw, i % hw);
            if s == UNLABELED && (g.data()[2 * b * hw + p] != 0.0 || g.data()[(2 * b + 1) * hw + p] != 0.0) {
                return Err(format!("case {case}: nonzero gradient at unlabeled pixel {i}"));
            }
        }
    }
    Ok("100 random cases".into())
}

fn schedules(_: &SelftestOptions) -> Result<String, String> {
    let lr = [
        poly_lr(0, 3000, 0.03, 0.9),
        poly_lr(1500, 3000, 0.03, 0.9),
        poly_lr(3000, 3000, 0.03, 0.9),
    ];
    for (got, want) in lr.iter().zip([0.03, 0.016077, 0.0]) {
        if (got - want).abs() > 1e-6 {
            return Err(format!("poly lr {got} vs {want}"));
        }
    }
    if (lambda_rampup(2500, 2500, 5.0) - 5.0).abs() > 1e-9 {
        return Err("ramp does not reach lambda_max".into());
    }
    let ramp: Vec<f64> = (0..100).map(|k| lambda_rampup(k * 5000 / 99, 2500, 5.0)).collect();
    if ramp.windows(2).any(|p| p[1] < p[0]) {
        return Err("ramp is not monotone".into());
    }
    Ok("poly lr and ramp".into())
}
