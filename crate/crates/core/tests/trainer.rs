use std::path::Path;

use s2me::data::{generate_synthetic_dataset, Dataset, GenConfig};
use s2me::labels::UNLABELED;
use s2me::losses::{hybrid_loss, BranchOutputs, LossWeights, Mixing};
use s2me::models::{Mode, ModelKind};
use s2me::numerics::Tape;
use s2me::trainer::{
    load_selected, read_meta, train, LogRecord, LossTerm, Selection, TrainConfig, TrainError, Trainer,
};

fn dataset() -> Dataset {
    generate_synthetic_dataset(&GenConfig::new(12, 4, 4, 32, 3)).unwrap()
}

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.iterations = 6;
    c.batch_size = 2;
    c.ramp_iters = 4;
    c.eval_every = 3;
    c.base_width = 4;
    c.depth = 2;
    c.seed = 7;
    c
}

fn run_to_file(cfg: &TrainConfig, d: &Dataset, dir: &Path) -> Vec<LogRecord> {
    let mut log = Vec::new();
    let out = train(cfg.clone(), d, Some(&mut log), Some(&dir.join("ckpt.s2tf"))).unwrap();
    let lines: Vec<LogRecord> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, out.log);
    lines
}

#[test]
fn identical_runs_give_identical_logs_and_checkpoint_bytes() {
    let d = dataset();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let la = run_to_file(&tiny(), &d, a.path());
    let lb = run_to_file(&tiny(), &d, b.path());
    assert_eq!(la, lb);
    for f in ["ckpt.s2tf", "ckpt.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    let mut other = tiny();
    other.seed = 8;
    assert_ne!(train(other, &d, None, None).unwrap().log, la);
}

#[test]
fn resumed_run_matches_unbroken_run() {
    let d = dataset();
    let cfg = tiny();
    let full = train(cfg.clone(), &d, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.s2tf");
    let mut first = Trainer::new(cfg.clone()).unwrap();
    let mut log = first.run(&d.train, &d.val, 4, None, Some(&path)).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(&path, &cfg, false).unwrap();
    assert_eq!(resumed.iteration(), 4);
    log.extend(resumed.run(&d.train, &d.val, cfg.iterations, None, None).unwrap());
    assert_eq!(log.len(), full.log.len());
    for (a, b) in log.iter().zip(&full.log) {
        assert_eq!(a.iter, b.iter);
        assert!((a.loss_total - b.loss_total).abs() <= 1e-6, "{a:?} vs {b:?}");
        assert_eq!(a.val_dsc.is_some(), b.val_dsc.is_some());
    }
    assert_eq!(resumed.snapshot(), full.trainer.snapshot());
    assert_eq!(resumed.best_val_dsc(), full.trainer.best_val_dsc());
}

#[test]
fn resume_guards_config_and_architecture() {
    let d = dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.s2tf");
    let mut t = Trainer::new(tiny()).unwrap();
    t.run(&d.train, &d.val, 2, None, Some(&path)).unwrap();

    let mut changed = tiny();
    changed.lr0 = 0.01;
    assert!(matches!(
        Trainer::resume(&path, &changed, false),
        Err(TrainError::ConfigMismatch { .. })
    ));
    assert_eq!(Trainer::resume(&path, &changed, true).unwrap().iteration(), 2);

    let mut kind = tiny();
    kind.model_spe = ModelKind::Unet;
    assert!(Trainer::resume(&path, &kind, false).is_err());
    assert!(matches!(
        Trainer::resume(&path, &kind, true),
        Err(TrainError::Checkpoint(_))
    ));

    assert!(t.save(Path::new("")).is_err());
    assert!(Trainer::resume(&dir.path().join("missing.s2tf"), &tiny(), false).is_err());
}

#[test]
fn checkpoint_selects_best_or_last() {
    let d = dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.s2tf");
    let mut cfg = tiny();
    cfg.eval_every = 2;
    let out = train(cfg.clone(), &d, None, Some(&path)).unwrap();
    let meta = read_meta(&path).unwrap();
    assert_eq!(meta.iteration, 6);
    assert_eq!(meta.best_val_dsc, out.trainer.best_val_dsc());
    let best = out.log.iter().filter_map(|r| r.val_dsc).fold(f64::MIN, f64::max);
    assert_eq!(meta.best_val_dsc, Some(best));

    let (_, mut spa, _) = load_selected(&path).unwrap();
    let mut probe = Trainer::new(cfg.clone()).unwrap();
    probe.spa.store = spa.store.clone();
    assert!((probe.validate(&d.val).unwrap() - best).abs() < 1e-6);
    assert_eq!(
        spa.predict(&s2me::data::Batch::from_samples(&d.val).unwrap().images)
            .is_ok(),
        true
    );

    cfg.selection = Selection::Last;
    let last = train(cfg, &d, None, Some(&path)).unwrap();
    let (_, spa, _) = load_selected(&path).unwrap();
    assert_eq!(spa.store, last.trainer.spa.store);
}

#[test]
fn lambda_reaches_max_at_ramp_end_and_lr_decays() {
    let d = dataset();
    let out = train(tiny(), &d, None, None).unwrap();
    let at = out.log.iter().find(|r| r.iter == 4).unwrap();
    assert!((at.lambda - 5.0).abs() < 1e-9);
    assert!((out.log[0].lr - 0.03).abs() < 1e-12);
    assert!(out
        .log
        .windows(2)
        .all(|w| w[1].lr < w[0].lr && w[1].lambda >= w[0].lambda));
    for r in &out.log {
        assert!(
            (r.loss_total - (r.loss_scrib + r.lambda * (r.loss_mt + r.loss_el))).abs() < 1e-4 * r.loss_total.max(1.0)
        );
    }
}

#[test]
fn scribble_only_gradients_vanish_off_scribble_for_both_branches() {
    let d = dataset();
    let mut t = Trainer::new(tiny()).unwrap();
    let batch = s2me::data::Batch::from_samples(&d.train[..3]).unwrap();
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(batch.images.clone());
    let pa = t.spa.store.bind(&mut tape);
    let pe = t.spe.store.bind(&mut tape);
    let la = t.spa.forward(&mut tape, &pa, x, Mode::Train).unwrap();
    let le = t.spe.forward(&mut tape, &pe, x, Mode::Train).unwrap();
    let oa = BranchOutputs::from_logits(&mut tape, la).unwrap();
    let oe = BranchOutputs::from_logits(&mut tape, le).unwrap();
    let h = hybrid_loss(
        &mut tape,
        oa,
        oe,
        &batch.scribbles,
        LossWeights::zero(),
        Mixing::Entropy,
    )
    .unwrap();
    let grads = tape.backward(h.total).unwrap();
    let (n, _, hh, ww) = tape.value(la).dims4("logits").unwrap();
    let hw = hh * ww;
    for logits in [la, le] {
        let g = grads.get(logits).unwrap();
        for b in 0..n {
            for i in 0..hw {
                if batch.scribbles.data()[b * hw + i] == UNLABELED {
                    assert_eq!(g.data()[b * 2 * hw + i], 0.0);
                    assert_eq!(g.data()[(b * 2 + 1) * hw + i], 0.0);
                }
            }
        }
    }
}

#[test]
fn scribble_loss_falls_during_training() {
    let d = generate_synthetic_dataset(&GenConfig::new(40, 4, 0, 32, 5)).unwrap();
    let mut cfg = tiny();
    cfg.iterations = 60;
    cfg.batch_size = 4;
    cfg.eval_every = 60;
    cfg.loss_terms = vec![LossTerm::Scrib];
    let out = train(cfg, &d, None, None).unwrap();
    let mean = |rs: &[LogRecord]| rs.iter().map(|r| r.loss_scrib).sum::<f64>() / rs.len() as f64;
    let (first, last) = (mean(&out.log[..6]), mean(&out.log[54..]));
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn huge_learning_rate_skips_non_finite_steps() {
    let d = dataset();
    let mut cfg = tiny();
    cfg.lr0 = 1e30;
    let out = train(cfg, &d, None, None).unwrap();
    assert!(out.trainer.skipped_steps() > 0);
    assert!(out.log.iter().all(|r| r.loss_total.is_finite()));
}

#[test]
fn non_finite_loss_aborts_and_keeps_a_checkpoint() {
    let d = dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("boom.s2tf");
    // The weighted consistency terms overflow single precision.
    let mut cfg = tiny();
    cfg.lambda_max = 1e300;
    let err = train(cfg, &d, None, Some(&path)).err().expect("non-finite loss");
    let TrainError::NonFiniteLoss { iter } = err else {
        panic!("{err}")
    };
    assert_eq!(iter, 0);
    let meta = read_meta(&path).unwrap();
    assert_eq!(meta.iteration, iter);
}

#[test]
fn config_file_roundtrip_and_overrides() {
    let mut c =
        TrainConfig::from_kv("iterations = 10\n# comment\nfusion = random  # trailing\nloss_terms = el,scrib").unwrap();
    assert_eq!(c.iterations, 10);
    assert_eq!(c.loss_terms, vec![LossTerm::Scrib, LossTerm::El]);
    c.apply_override("model_spe=unet").unwrap();
    assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    assert!(c.apply_override("model_spe").is_err());
    assert!(TrainConfig::from_kv("lr0 = 0").is_err());
    assert!(TrainConfig::from_kv("poly_power = -1").is_err());
}
