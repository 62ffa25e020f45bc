use std::path::Path;
use std::process::{Command, Output};

use hdphmm::cli::{DecodeSummary, EvaluationReport, VbFitFile};
use hdphmm::data::{load_counts, CountFormat};
use hdphmm::gibbs::GibbsState;
use hdphmm::report::{read_json, Manifest};

fn hdphmm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdphmm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = hdphmm(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

const SMALL_SIM: &str = r#"{"n_cells": 8, "n_bins": 300, "n_states": 15, "seed": 11,
    "spatial": {"arena_radius": 60, "jitter": 5}}"#;

fn simulate_small(dir: &Path) {
    write(dir, "sim.json", SMALL_SIM);
    ok(&["simulate", "--config", "sim.json"], dir);
}

#[test]
fn simulate_default_config_shape_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "sim.json", "{}");
    ok(&["simulate", "--config", "sim.json", "--out", "a"], dir.path());
    ok(&["simulate", "--config", "sim.json", "--out", "b"], dir.path());
    let counts = load_counts(dir.path().join("a/counts.csv"), CountFormat::Csv).unwrap();
    assert_eq!((counts.n_cells(), counts.n_bins()), (30, 1000));
    for f in ["counts.csv", "truth.json", "manifest.json"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
    let m: Manifest = read_json(dir.path().join("a/manifest.json")).unwrap();
    assert_eq!(m.command, "simulate");
    assert_eq!(m.config["alpha0"], 4.0);
    assert_eq!(m.config["gamma"], 8.0);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    ok(&["simulate", "--config", "sim.json", "--seed", "12", "--out", "s12"], dir.path());
    assert_ne!(read(dir.path().join("counts.csv")), read(dir.path().join("s12/counts.csv")));
    let m: Manifest = read_json(dir.path().join("s12/manifest.json")).unwrap();
    assert_eq!(m.seed, 12);
}

#[test]
fn validation_and_io_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "zero.json", r#"{"n_bins": 0}"#);
    assert_eq!(hdphmm(&["simulate", "--config", "zero.json"], dir.path()).status.code(), Some(2));
    write(dir.path(), "typo.json", r#"{"n_bin": 10}"#);
    let out = hdphmm(&["simulate", "--config", "typo.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_bin"));
    assert_eq!(hdphmm(&["simulate", "--config", "missing.json"], dir.path()).status.code(), Some(4));
    write(dir.path(), "fit.json", r#"{"counts": "nope.csv", "method": "vb"}"#);
    assert_eq!(hdphmm(&["fit", "--config", "fit.json"], dir.path()).status.code(), Some(4));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    write(dir.path(), "fit.json", r#"{"counts": "counts.csv", "method": "gibbs"}"#);
    let out = hdphmm(&["fit", "--config", "fit.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown variant"));
}

#[test]
fn vb_fit_writes_monotone_elbo() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    write(
        dir.path(),
        "fit.json",
        r#"{"counts": "counts.csv", "method": "vb", "t_train": 250, "vb": {"n_states": 15, "tol": 0}}"#,
    );
    ok(&["fit", "--config", "fit.json", "--out", "fit"], dir.path());
    let text = std::fs::read_to_string(dir.path().join("fit/elbo.csv")).unwrap();
    let elbo: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(elbo.len(), 101);
    assert!(elbo.windows(2).all(|w| w[1] >= w[0] - 1e-8));
    let f: VbFitFile = read_json(dir.path().join("fit/vb_fit.json")).unwrap();
    assert_eq!(f.sweeps, 100);
    assert_eq!(f.factors.rate_a.cols(), 15);
}

#[test]
fn mcmc_fit_keeps_last_samples_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    write(
        dir.path(),
        "fit.json",
        r#"{"counts": "counts.csv", "method": "mcmc-hmc", "t_train": 250, "gibbs": {"n_states": 15, "n_iters": 300}}"#,
    );
    ok(&["fit", "--config", "fit.json", "--out", "a"], dir.path());
    ok(&["fit", "--config", "fit.json", "--out", "b"], dir.path());
    let snaps: Vec<GibbsState> = read_json(dir.path().join("a/snapshots.json")).unwrap();
    assert_eq!(snaps.len(), 50);
    assert_eq!(snaps[0].iteration, 251);
    assert_eq!(snaps[49].iteration, 300);
    let trace = std::fs::read_to_string(dir.path().join("a/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 301);
    assert!(trace.starts_with("iter,loglik,n_states,n_states_95,alpha0,gamma\n"));
    for f in ["trace.csv", "snapshots.json", "manifest.json"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn parallel_chains_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    write(
        dir.path(),
        "fit.json",
        r#"{"counts": "counts.csv", "method": "hmm-mcmc", "gibbs": {"n_states": 5, "n_iters": 20}}"#,
    );
    ok(&["fit", "--config", "fit.json", "--chains", "3", "--out", "a"], dir.path());
    ok(&["fit", "--config", "fit.json", "--chains", "3", "--out", "b"], dir.path());
    for k in 0..3 {
        let f = format!("chain_{k:03}/trace.csv");
        let a = read(dir.path().join("a").join(&f));
        assert_eq!(a, read(dir.path().join("b").join(&f)));
        // Finite chains leave the gamma column empty.
        assert!(String::from_utf8(a).unwrap().lines().nth(1).unwrap().ends_with(','));
    }
    assert_ne!(
        read(dir.path().join("a/chain_000/trace.csv")),
        read(dir.path().join("a/chain_001/trace.csv"))
    );
}

#[test]
fn evaluate_reports_bits_per_spike_and_recovery() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    write(
        dir.path(),
        "fit.json",
        r#"{"counts": "counts.csv", "method": "vb", "t_train": 240, "vb": {"n_states": 15}}"#,
    );
    ok(&["fit", "--config", "fit.json", "--out", "fit"], dir.path());
    write(
        dir.path(),
        "eval.json",
        r#"{"fit_dir": "fit", "truth": "truth.json", "positions": "positions.csv", "vb_draws": 10}"#,
    );
    ok(&["evaluate", "--config", "eval.json", "--out", "ev"], dir.path());
    let text = std::fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap();
    let report: EvaluationReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.test, (240, 300));
    let bps = report.metrics.bits_per_spike.unwrap();
    assert!(bps.is_finite() && bps > 0.0, "{bps}");
    let rec = report.recovery.as_ref().unwrap();
    assert!((0.0..=1.0).contains(&rec.matched_fraction));
    assert!(report.metrics.mi_bits.unwrap() > 0.0);
    // The report survives a serialization round trip.
    let again = serde_json::to_string_pretty(&report).unwrap();
    assert_eq!(serde_json::from_str::<EvaluationReport>(&again).unwrap(), report);
}

#[test]
fn decode_with_true_parameters_is_within_the_jitter_bound() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "sim.json",
        r#"{"n_cells": 40, "n_bins": 2000, "n_states": 30, "seed": 5,
            "spatial": {"arena_radius": 60, "jitter": 5}}"#,
    );
    ok(&["simulate", "--config", "sim.json"], dir.path());
    write(
        dir.path(),
        "decode.json",
        r#"{"truth": "truth.json", "counts": "counts.csv", "positions": "positions.csv",
            "t_train": 1800, "angle_mean": "circular"}"#,
    );
    ok(&["decode", "--config", "decode.json", "--out", "dec"], dir.path());
    let s: DecodeSummary = read_json(dir.path().join("dec/decode_summary.json")).unwrap();
    assert_eq!(s.n_bins, 200);
    assert!(s.mean_cm.is_finite() && s.sd_cm.is_finite());
    // With the state known, each decoded point is its state's mean location,
    // so the error is the jitter norm: mean σ√(π/2) ≈ 1.25σ. Allow 2σ.
    assert!(s.mean_cm <= 2.0 * 5.0, "{}", s.mean_cm);
    let traj = std::fs::read_to_string(dir.path().join("dec/trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,r_true,theta_true,r_hat,theta_hat,err_cm\n"));
    assert_eq!(traj.lines().count(), 201);
}

#[test]
fn decode_rejects_an_empty_test_range() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    write(
        dir.path(),
        "decode.json",
        r#"{"truth": "truth.json", "counts": "counts.csv", "positions": "positions.csv", "t_train": 200, "t_test": 0}"#,
    );
    let out = hdphmm(&["decode", "--config", "decode.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    write(
        dir.path(),
        "decode2.json",
        r#"{"truth": "truth.json", "counts": "counts.csv", "positions": "positions.csv", "t_train": 300}"#,
    );
    assert_eq!(hdphmm(&["decode", "--config", "decode2.json"], dir.path()).status.code(), Some(2));
}

#[test]
fn decode_from_a_fit_directory() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path());
    write(
        dir.path(),
        "fit.json",
        r#"{"counts": "counts.csv", "method": "mcmc-eb", "t_train": 250, "n_keep": 5, "gibbs": {"n_states": 15, "n_iters": 40}}"#,
    );
    ok(&["fit", "--config", "fit.json", "--out", "fit"], dir.path());
    write(dir.path(), "decode.json", r#"{"fit_dir": "fit", "positions": "positions.csv"}"#);
    ok(&["decode", "--config", "decode.json", "--out", "dec"], dir.path());
    let s: DecodeSummary = read_json(dir.path().join("dec/decode_summary.json")).unwrap();
    assert_eq!(s.n_bins, 50);
    assert!(s.mean_cm.is_finite() && s.sd_cm.is_finite());
}
