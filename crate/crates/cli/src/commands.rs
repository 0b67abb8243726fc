use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2me::data::{generate_synthetic_dataset, tensor_file, Batch, Corruption, DataError, Dataset, GenConfig, Split};
use s2me::eval::{aggregate, evaluate_dataset, write_csv, write_json, MetricsRecord, SampleMetrics};
use s2me::fusion::{entropy_map, fuse_entropy, fuse_equal, fuse_random, pseudo_label};
use s2me::labels::FOREGROUND;
use s2me::numerics::{OpKind, Tensor};
use s2me::selftest::{self, SelftestOptions};
use s2me::trainer::{
    apply_settings, cells, evaluate_selected, load_selected, Grid, Method, TrainConfig, TrainError, Trainer,
};

use crate::report::{self, CellResult};
use crate::{AblateArgs, ConfigArgs, EvalArgs, Failure, FuseArgs, GenDataArgs, SelftestArgs, TrainArgs};

pub const CHECKPOINT: &str = "checkpoint.s2tf";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) | TrainError::ConfigMismatch { .. } => Failure::usage(e),
        other => Failure::runtime(other),
    }
}

fn data_failure(e: DataError) -> Failure {
    match e {
        DataError::Invalid(_) => Failure::usage(e),
        other => Failure::runtime(other),
    }
}

/// Creates `dir`, which must be empty unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::usage(anyhow!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        let nonempty = std::fs::read_dir(dir)
            .with_context(|| dir.display().to_string())
            .map_err(Failure::runtime)?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(Failure::usage(anyhow!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::runtime)
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Dataset::load(dir)
        .with_context(|| format!("loading dataset {}", dir.display()))
        .map_err(Failure::runtime)
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    s.parse().map_err(Failure::usage)
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

pub fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    if !(a.max_fraction > 0.0 && a.max_fraction <= 1.0) {
        return Err(Failure::usage(anyhow!(
            "--max-fraction {} outside (0, 1]",
            a.max_fraction
        )));
    }
    let mut cfg = GenConfig::new(a.train, a.val, a.test, a.size, a.seed);
    cfg.scribble.max_fraction = a.max_fraction;
    let dataset = generate_synthetic_dataset(&cfg).map_err(data_failure)?;
    prepare_out(&a.out, a.force)?;
    dataset.save(&a.out).map_err(Failure::runtime)?;
    let st = dataset.stats();
    println!(
        "wrote {} samples ({} train / {} val / {} test, {}x{}) to {}",
        st.samples,
        a.train,
        a.val,
        a.test,
        a.size,
        a.size,
        a.out.display()
    );
    println!(
        "foreground fraction: mean {:.3}, min {:.3}, max {:.3}",
        st.fg_fraction_mean, st.fg_fraction_min, st.fg_fraction_max
    );
    println!(
        "labeled fraction: mean {:.4}, max {:.4}; samples without foreground strokes: {}",
        st.labeled_fraction_mean, st.labeled_fraction_max, st.flagged
    );
    Ok(())
}

fn kv_map(c: &TrainConfig) -> HashMap<String, String> {
    c.to_kv()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Config file, then method preset, then explicit overrides. An override
/// that changes a key pinned by the preset is an error.
pub fn build_config(args: &ConfigArgs, method: Option<&str>, fusion: Option<&str>) -> Result<TrainConfig, Failure> {
    let mut base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::usage)?;
            TrainConfig::from_kv(&text).map_err(train_failure)?
        }
        None => TrainConfig::default(),
    };
    let preset = match method {
        Some(m) => m.parse::<Method>().map_err(train_failure)?.settings(),
        None => Vec::new(),
    };
    apply_settings(&mut base, &preset).map_err(train_failure)?;
    let mut overrides: Vec<(String, String)> = Vec::new();
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(anyhow!("override `{kv}` is not KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(f) = fusion {
        overrides.push(("fusion".into(), f.to_string()));
    }
    let mut config = base.clone();
    apply_settings(&mut config, &overrides).map_err(train_failure)?;
    let (before, after) = (kv_map(&base), kv_map(&config));
    let clashes: Vec<String> = preset
        .iter()
        .filter(|(k, _)| before.get(*k) != after.get(*k))
        .map(|(k, _)| format!("{k}: preset `{}` vs override `{}`", before[*k], after[*k]))
        .collect();
    if !clashes.is_empty() {
        return Err(Failure::usage(anyhow!(
            "method {} conflicts with overrides: {}",
            method.unwrap_or_default(),
            clashes.join("; ")
        )));
    }
    config.validate().map_err(train_failure)?;
    Ok(config)
}

fn seeds(args: &ConfigArgs, config: &TrainConfig) -> Vec<u64> {
    if args.seed.is_empty() {
        vec![config.seed]
    } else {
        args.seed.clone()
    }
}

fn check_splits(d: &Dataset) -> Result<(), Failure> {
    if d.train.is_empty() || d.val.is_empty() {
        return Err(Failure::usage(anyhow!("dataset needs nonempty train and val splits")));
    }
    Ok(())
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>, Failure> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| path.display().to_string())
        .map_err(Failure::runtime)?;
    Ok(BufWriter::new(file))
}

/// Trains one seed into `dir`, resuming from its checkpoint when asked.
fn train_seed(config: &TrainConfig, d: &Dataset, dir: &Path, resume: bool, force: bool) -> Result<Trainer, Failure> {
    let ckpt = dir.join(CHECKPOINT);
    let resuming = resume && ckpt.exists();
    if resuming {
        std::fs::create_dir_all(dir).map_err(Failure::runtime)?;
    } else {
        prepare_out(dir, force)?;
    }
    let mut trainer = if resuming {
        let t = Trainer::resume(&ckpt, config, force).map_err(train_failure)?;
        log::info!("resuming seed {} at iteration {}", config.seed, t.iteration());
        t
    } else {
        Trainer::new(config.clone()).map_err(train_failure)?
    };
    std::fs::write(dir.join(CONFIG_FILE), config.to_kv()).map_err(Failure::runtime)?;
    let mut log = open_log(&dir.join(TRAIN_LOG), resuming)?;
    let total = config.iterations;
    trainer
        .run(&d.train, &d.val, total, Some(&mut log), Some(&ckpt))
        .map_err(train_failure)?;
    log.flush().map_err(Failure::runtime)?;
    Ok(trainer)
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let config = build_config(&a.cfg, a.method.as_deref(), a.fusion.as_deref())?;
    let d = load_dataset(&a.data)?;
    check_splits(&d)?;
    if a.resume {
        std::fs::create_dir_all(&a.out).map_err(Failure::runtime)?;
    } else {
        prepare_out(&a.out, a.force)?;
    }
    for seed in seeds(&a.cfg, &config) {
        let mut cfg = config.clone();
        cfg.seed = seed;
        let dir = seed_dir(&a.out, seed);
        let t = train_seed(&cfg, &d, &dir, a.resume, a.force)?;
        println!(
            "seed {seed}: {} iterations, best val dsc {} at iteration {}, checkpoint {}",
            t.iteration(),
            t.best_val_dsc().map_or("n/a".into(), |v| format!("{v:.6}")),
            t.best_iteration().map_or("n/a".into(), |v| v.to_string()),
            dir.join(CHECKPOINT).display()
        );
    }
    Ok(())
}

fn discover_seeds(run: &Path) -> Result<Vec<u64>, Failure> {
    let entries = std::fs::read_dir(run)
        .with_context(|| format!("reading run directory {}", run.display()))
        .map_err(Failure::runtime)?;
    let mut out: Vec<u64> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("seed-")?.parse().ok())
        .collect();
    out.sort_unstable();
    if out.is_empty() {
        return Err(Failure::runtime(anyhow!(
            "no seed-N checkpoints under {}",
            run.display()
        )));
    }
    Ok(out)
}

fn parse_corruption(s: &str) -> Result<(Corruption, u8), Failure> {
    let (kind, sev) = s
        .split_once(':')
        .ok_or_else(|| Failure::usage(anyhow!("--corrupt expects KIND:SEVERITY, got `{s}`")))?;
    let kind: Corruption = kind.parse().map_err(Failure::usage)?;
    let sev: u8 = sev
        .parse()
        .ok()
        .filter(|v| (1..=3).contains(v))
        .ok_or_else(|| Failure::usage(anyhow!("severity `{sev}` must be 1, 2 or 3")))?;
    Ok((kind, sev))
}

fn fmt_metrics(m: &SampleMetrics) -> String {
    format!(
        "dsc {:.6}  iou {:.6}  prec {:.6}  hd {:.4}",
        m.dsc, m.iou, m.precision, m.hd
    )
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let split = parse_split(&a.split)?;
    if !(a.percentile > 0.0 && a.percentile <= 100.0) {
        return Err(Failure::usage(anyhow!(
            "--percentile {} outside (0, 100]",
            a.percentile
        )));
    }
    let mut d = load_dataset(&a.data)?;
    let mut dataset_label = format!("synthetic-{}", split.name());
    if let Some(spec) = &a.corrupt {
        let (kind, sev) = parse_corruption(spec)?;
        d = d.corrupted(split, kind, sev, d.manifest.seed).map_err(data_failure)?;
        dataset_label = format!("{dataset_label}-{kind}:{sev}");
    }
    let samples = d.split(split);
    if samples.is_empty() {
        return Err(Failure::usage(anyhow!("split {} is empty", split.name())));
    }
    let seeds = if a.seed.is_empty() {
        discover_seeds(&a.run)?
    } else {
        a.seed.clone()
    };
    let method = a.method.clone().unwrap_or_else(|| {
        a.run
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "run".into())
    });
    let mut records = Vec::new();
    for seed in seeds {
        let ckpt = seed_dir(&a.run, seed).join(CHECKPOINT);
        if !ckpt.exists() {
            return Err(Failure::runtime(anyhow!(
                "missing checkpoint for seed {seed}: {}",
                ckpt.display()
            )));
        }
        let (meta, spa, spe) = load_selected(&ckpt).map_err(train_failure)?;
        let mut model = if a.spectral { spe } else { spa };
        let rec = evaluate_dataset(&mut model, samples, &method, &dataset_label, seed, a.percentile)
            .map_err(Failure::runtime)?;
        println!(
            "seed {seed} ({} iterations, best val dsc {}): {}",
            meta.iteration,
            meta.best_val_dsc.map_or("n/a".into(), |v| format!("{v:.6}")),
            fmt_metrics(&rec.mean)
        );
        records.push(rec);
    }
    for agg in aggregate(&records) {
        println!(
            "{} on {} over {} seed(s): dsc {:.4}±{:.4}  iou {:.4}±{:.4}  prec {:.4}±{:.4}  hd {:.3}±{:.3}",
            agg.method,
            agg.dataset,
            agg.seeds.len(),
            agg.mean.dsc,
            agg.std.dsc,
            agg.mean.iou,
            agg.std.iou,
            agg.mean.precision,
            agg.std.precision,
            agg.mean.hd,
            agg.std.hd
        );
    }
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    std::fs::create_dir_all(&out).map_err(Failure::runtime)?;
    let stem = match &a.corrupt {
        Some(c) => format!("metrics-{}-{}", split.name(), c.replace(':', "")),
        None => format!("metrics-{}", split.name()),
    };
    write_csv(&out.join(format!("{stem}.csv")), &records).map_err(Failure::runtime)?;
    write_json(&out.join(format!("{stem}.json")), &records).map_err(Failure::runtime)?;
    println!("wrote {}", out.join(format!("{stem}.csv")).display());
    Ok(())
}

fn dsc_against(labels: &[u8], gt: &[u8]) -> f64 {
    s2me::eval::confusion_metrics(labels, gt)
        .map(|m| m.0)
        .unwrap_or(f64::NAN)
}

fn disagreement(a: &[u8], b: &[u8]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len().max(1) as f64
}

pub fn fuse(a: FuseArgs) -> Result<(), Failure> {
    let split = parse_split(&a.split)?;
    let d = load_dataset(&a.data)?;
    let samples = d.split(split);
    let sample = samples.get(a.index).ok_or_else(|| {
        Failure::usage(anyhow!(
            "index {} out of range for {} ({} samples)",
            a.index,
            split.name(),
            samples.len()
        ))
    })?;
    let ckpt = seed_dir(&a.run, a.seed).join(CHECKPOINT);
    if !ckpt.exists() {
        return Err(Failure::runtime(anyhow!(
            "missing checkpoint for seed {}: {}",
            a.seed,
            ckpt.display()
        )));
    }
    prepare_out(&a.out, a.force)?;
    let (_, mut spa, mut spe) = load_selected(&ckpt).map_err(train_failure)?;
    let batch = Batch::from_samples(std::slice::from_ref(sample)).map_err(Failure::runtime)?;
    let rt = |e: s2me::fusion::FusionError| Failure::runtime(e);
    let p_spa = spa.predict(&batch.images).map_err(Failure::runtime)?;
    let p_spe = spe.predict(&batch.images).map_err(Failure::runtime)?;
    let (h_spa, h_spe) = (entropy_map(&p_spa).map_err(rt)?, entropy_map(&p_spe).map_err(rt)?);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    rng.set_stream(a.index as u64);
    let (random, alphas) = fuse_random(&p_spa, &p_spe, &mut rng).map_err(rt)?;
    let fused = [
        ("entropy", fuse_entropy(&p_spa, &p_spe, &h_spa, &h_spe).map_err(rt)?),
        ("equal", fuse_equal(&p_spa, &p_spe).map_err(rt)?),
        ("random", random),
    ];
    let gt = batch.masks.data();
    let y_spa = pseudo_label(&p_spa).map_err(rt)?;
    let y_spe = pseudo_label(&p_spe).map_err(rt)?;
    let mut entries: Vec<(String, Tensor<f32>)> = vec![
        ("image".into(), sample.image.clone()),
        ("mask".into(), batch.masks.to_tensor()),
        ("p_spa".into(), p_spa.clone()),
        ("p_spe".into(), p_spe.clone()),
        ("h_spa".into(), h_spa.values.clone()),
        ("h_spe".into(), h_spe.values.clone()),
        ("label_spa".into(), y_spa.to_tensor()),
        ("label_spe".into(), y_spe.to_tensor()),
    ];
    println!(
        "sample {} of {} (foreground {} px)",
        sample.id,
        split.name(),
        batch.masks.count(FOREGROUND)
    );
    println!(
        "mean entropy: spatial {:.4}, spectral {:.4}; spatial more confident on {:.1}% of pixels",
        h_spa.values.sum() as f64 / h_spa.values.len() as f64,
        h_spe.values.sum() as f64 / h_spe.values.len() as f64,
        100.0
            * h_spa
                .values
                .data()
                .iter()
                .zip(h_spe.values.data())
                .filter(|(a, b)| a < b)
                .count() as f64
            / h_spa.values.len() as f64
    );
    println!("spatial  dsc {:.4}", dsc_against(y_spa.data(), gt));
    println!("spectral dsc {:.4}", dsc_against(y_spe.data(), gt));
    let entropy_labels = pseudo_label(&fused[0].1).map_err(rt)?;
    for (name, p) in &fused {
        let y = pseudo_label(p).map_err(rt)?;
        let extra = if *name == "random" {
            format!(" (alpha {:.3})", alphas[0])
        } else {
            String::new()
        };
        println!(
            "{name:<8} dsc {:.4}, differs from entropy fusion on {:.2}% of pixels{extra}",
            dsc_against(y.data(), gt),
            100.0 * disagreement(y.data(), entropy_labels.data())
        );
        entries.push((format!("fused_{name}"), p.clone()));
        entries.push((format!("label_{name}"), y.to_tensor()));
    }
    let path = a.out.join("fuse.s2tf");
    tensor_file::write(&path, &entries).map_err(Failure::runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let grids: Vec<Grid> = match a.grid.as_str() {
        "all" => Grid::ALL.to_vec(),
        g => vec![g.parse().map_err(train_failure)?],
    };
    let split = parse_split(&a.split)?;
    let base = build_config(&a.cfg, None, None)?;
    let seed_list = seeds(&a.cfg, &base);
    let d = load_dataset(&a.data)?;
    check_splits(&d)?;
    if d.split(split).is_empty() {
        return Err(Failure::usage(anyhow!("split {} is empty", split.name())));
    }
    prepare_out(&a.out, a.force)?;
    let dataset_label = format!("synthetic-{}", split.name());

    // Identical configurations (e.g. the full method in every grid) train once.
    let mut done: HashMap<String, Result<MetricsRecord, String>> = HashMap::new();
    let mut markdown = String::from("# Ablation results\n\n");
    markdown += &format!(
        "Mean ± standard deviation over seeds {:?} on the {} split; each seed's score is the mean over samples.\n\n",
        seed_list,
        split.name()
    );
    let mut all_records = Vec::new();
    let mut failed_cells = 0;
    for grid in grids {
        let mut results = Vec::new();
        for cell in cells(grid) {
            let mut res = CellResult {
                cell: cell.clone(),
                records: Vec::new(),
                failures: Vec::new(),
            };
            let label = format!("{}/{}", grid.name(), cell.label);
            for &seed in &seed_list {
                let outcome = match cell.config(&base) {
                    Err(e) => Err(e.to_string()),
                    Ok(mut cfg) => {
                        cfg.seed = seed;
                        let key = cfg.hash();
                        if let Some(prev) = done.get(&key) {
                            prev.clone()
                        } else {
                            let dir = seed_dir(&a.out.join(grid.name()).join(cell.label.replace('+', "-")), seed);
                            log::info!("training {label} seed {seed}");
                            let r = train_seed(&cfg, &d, &dir, false, a.force)
                                .map_err(|e| match e {
                                    Failure::Usage(e) | Failure::Runtime(e) => format!("{e:#}"),
                                })
                                .and_then(|t| {
                                    evaluate_selected(&t, d.split(split), &label, &dataset_label, a.percentile)
                                        .map_err(|e| e.to_string())
                                });
                            done.insert(key, r.clone());
                            r
                        }
                    }
                };
                match outcome {
                    Ok(mut rec) => {
                        rec.method = label.clone();
                        println!("{label} seed {seed}: {}", fmt_metrics(&rec.mean));
                        res.records.push(rec);
                    }
                    Err(e) => {
                        log::error!("{label} seed {seed} failed: {e}");
                        res.failures.push((seed, e));
                    }
                }
            }
            if res.records.is_empty() {
                failed_cells += 1;
            }
            all_records.extend(res.records.iter().cloned());
            results.push(res);
        }
        markdown += &report::markdown(grid, &results, seed_list.len());
    }
    write_csv(&a.out.join("results.csv"), &all_records).map_err(Failure::runtime)?;
    write_json(&a.out.join("results.json"), &all_records).map_err(Failure::runtime)?;
    std::fs::write(a.out.join("report.md"), &markdown).map_err(Failure::runtime)?;
    print!("{markdown}");
    if failed_cells > 0 {
        return Err(Failure::runtime(anyhow!(
            "{failed_cells} grid cell(s) failed; see report.md"
        )));
    }
    Ok(())
}

pub fn selftest(a: SelftestArgs) -> Result<(), Failure> {
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::usage(anyhow!("unknown op `{name}`")))?),
        None => None,
    };
    let outcomes = selftest::run(a.filter.as_deref(), &SelftestOptions { fault });
    if outcomes.is_empty() {
        return Err(Failure::usage(anyhow!(
            "no check matches `{}`",
            a.filter.unwrap_or_default()
        )));
    }
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<20} {:>7.2}s  {}", o.name, o.seconds, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        return Err(Failure::runtime(anyhow!("{failed} self-check(s) failed")));
    }
    Ok(())
}
