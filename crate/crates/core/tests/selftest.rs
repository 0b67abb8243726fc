use s2me::numerics::OpKind;
use s2me::selftest::{checks, run, SelftestOptions};

#[test]
fn full_suite_passes_quickly() {
    let start = std::time::Instant::now();
    let out = run(None, &SelftestOptions::default());
    assert_eq!(out.len(), checks().len());
    for c in &out {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn injected_fault_fails_and_names_the_op() {
    for op in [OpKind::Conv2d, OpKind::Softmax, OpKind::Irfft2] {
        let opts = SelftestOptions { fault: Some(op) };
        let out = run(Some("grad/"), &opts);
        let failed: Vec<_> = out.iter().filter(|c| !c.passed).collect();
        assert!(!failed.is_empty(), "{op} fault undetected");
        assert!(failed.iter().any(|c| c.detail.contains(op.name())), "{op}: {failed:?}");
    }
}

#[test]
fn filter_runs_only_matching_checks() {
    let out = run(Some("fusion"), &SelftestOptions::default());
    assert_eq!(out.len(), 2);
    assert!(out.iter().all(|c| c.name.starts_with("fusion/") && c.passed));
}
