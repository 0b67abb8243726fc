use std::path::Path;
use std::process::{Command, Output};

const TINY: &str =
    "--set iterations=6 --set batch_size=2 --set ramp_iters=4 --set eval_every=3 --set base_width=4 --set depth=2";

fn s2me(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2me"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn gen(dir: &Path, out: &str) {
    ok(&s2me(
        dir,
        &[
            "gen-data", "--out", out, "--size", "32", "--train", "8", "--val", "3", "--test", "3", "--seed", "4",
        ],
    ));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible_and_validates_size() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "a");
    gen(tmp.path(), "b");
    let a = tree(&tmp.path().join("a"));
    assert_eq!(a.iter().filter(|(n, _)| n.ends_with(".s2tf")).count(), 14);
    assert_eq!(a, tree(&tmp.path().join("b")));

    let small = s2me(tmp.path(), &["gen-data", "--out", "c", "--size", "20"]);
    assert_eq!(small.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&small.stderr).contains("20"));
    let again = s2me(tmp.path(), &["gen-data", "--out", "a", "--size", "32"]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn train_eval_and_fuse_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen(dir, "data");
    let mut args = vec![
        "train",
        "--data",
        "data",
        "--out",
        "run",
        "--method",
        "scrib-pce",
        "--seed",
        "1,2",
    ];
    args.extend(TINY.split_whitespace());
    ok(&s2me(dir, &args));
    for seed in [1, 2] {
        let seed_dir = dir.join(format!("run/seed-{seed}"));
        let config = std::fs::read_to_string(seed_dir.join("config.txt")).unwrap();
        assert!(config.contains("loss_terms = scrib\n"), "{config}");
        assert!(config.contains(&format!("seed = {seed}\n")));
        assert_eq!(
            std::fs::read_to_string(seed_dir.join("train_log.jsonl"))
                .unwrap()
                .lines()
                .count(),
            6
        );
    }

    ok(&s2me(
        dir,
        &["eval", "--data", "data", "--run", "run", "--split", "val"],
    ));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run/metrics-val.json")).unwrap()).unwrap();
    for (i, seed) in [1, 2].iter().enumerate() {
        let meta: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join(format!("run/seed-{seed}/checkpoint.json"))).unwrap(),
        )
        .unwrap();
        let best = meta["best_val_dsc"].as_f64().unwrap();
        let got = metrics["records"][i]["mean"]["dsc"].as_f64().unwrap();
        assert!((best - got).abs() <= 1e-6, "seed {seed}: {best} vs {got}");
    }

    let fused = ok(&s2me(
        dir,
        &[
            "fuse", "--data", "data", "--run", "run", "--out", "fz", "--split", "test", "--index", "2",
        ],
    ));
    assert!(fused.contains("entropy") && fused.contains("random"));
    assert!(dir.join("fz/fuse.s2tf").exists());

    let missing = s2me(dir, &["eval", "--data", "data", "--run", "run", "--seed", "9"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("seed 9"));
}

#[test]
fn preset_clash_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "data");
    let out = s2me(
        tmp.path(),
        &[
            "train",
            "--data",
            "data",
            "--out",
            "run",
            "--method",
            "scrib-pce",
            "--set",
            "loss_terms=scrib,mt",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss_terms"));
    let bad = s2me(
        tmp.path(),
        &["train", "--data", "data", "--out", "run", "--set", "nonsense=1"],
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn single_seed_ablation_reports_zero_spread() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "data");
    let mut args = vec!["ablate", "--data", "data", "--out", "ab", "--grid", "fusion"];
    args.extend(TINY.split_whitespace());
    let stdout = ok(&s2me(tmp.path(), &args));
    assert!(stdout.contains("| Entropy | Pixel |"));
    let report = std::fs::read_to_string(tmp.path().join("ab/report.md")).unwrap();
    let rows: Vec<&str> = report
        .lines()
        .filter(|l| l.starts_with("| Random") || l.starts_with("| Equal") || l.starts_with("| Entropy"))
        .collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert!(r.matches("±0.000").count() == 2, "{r}");
    }
    let csv = std::fs::read_to_string(tmp.path().join("ab/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn selftest_passes_and_detects_injected_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&s2me(tmp.path(), &["selftest", "--filter", "fusion"]));
    assert!(out.contains("2 passed, 0 failed"));
    let faulty = s2me(
        tmp.path(),
        &["selftest", "--filter", "grad/conv2d", "--inject-fault", "conv2d"],
    );
    assert_eq!(faulty.status.code(), Some(2));
    let text = String::from_utf8_lossy(&faulty.stdout);
    assert!(text.contains("FAIL") && text.contains("conv2d"), "{text}");
    let unknown = s2me(tmp.path(), &["selftest", "--inject-fault", "bogus"]);
    assert_eq!(unknown.status.code(), Some(1));
}
