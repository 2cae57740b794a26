use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use pilotwave::experiment::{run_preset, ExperimentConfig, Scale, Study, MANIFEST_NAME};
use pilotwave::fitting::FITS_HEADER;
use pilotwave::metrics::H_SERIES_HEADER;
use pilotwave::Error;

fn small(preset: &str, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(preset, Scale::Desk).unwrap();
    c.n = 300;
    c.t_end = 2.0 * PI;
    c.record_step = PI / 4.0;
    c.points_per_cell = 4;
    c.bootstrap_replicates = 10;
    c.output = out.to_path_buf();
    c
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn relaxation_run_writes_fits_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("fig7", tmp.path());
    cfg.couplings = vec![1.05, 1.8];
    cfg.presets = 2;
    cfg.modes = vec![6];
    cfg.snapshot_every = 4;
    let report = run_preset(&cfg).unwrap();
    assert_eq!(report.runs.len(), 4);
    assert_eq!(report.aggregates.len(), 2);
    for a in &report.aggregates {
        assert_eq!(a.aggregate.fits.len(), 2);
        assert!(a.aggregate.std_tau >= 0.0 && a.aggregate.std_r >= 0.0);
    }
    // Mode sets are shared across couplings.
    assert_eq!(report.runs[0].mode_seed, report.runs[2].mode_seed);
    assert_ne!(report.runs[0].mode_seed, report.runs[1].mode_seed);

    let fits = read(tmp.path(), "fits.csv");
    let mut lines = fits.lines();
    assert_eq!(lines.next(), Some(FITS_HEADER));
    assert_eq!(lines.count(), 4);
    assert_eq!(read(tmp.path(), "aggregates.csv").lines().count(), 3);

    let run = &report.runs[0].dir;
    let h = read(tmp.path(), &format!("{}/h_series.csv", run.display()));
    assert_eq!(h.lines().next(), Some(H_SERIES_HEADER));
    assert_eq!(h.lines().count(), 1 + 9);
    for i in [0, 4, 8] {
        let snap = read(tmp.path(), &format!("{}/snapshots_t{i}.csv", run.display()));
        assert_eq!(snap.lines().next(), Some("id,x_a,x_b"));
        assert_eq!(snap.lines().count(), 301);
        let grid = read(tmp.path(), &format!("{}/psi2_grid_t{i}.csv", run.display()));
        assert_eq!(grid.lines().count(), 16);
        assert!(grid.lines().all(|l| l.split(',').count() == 16));
        assert_eq!(read(tmp.path(), &format!("{}/rho_grid_t{i}.csv", run.display())).lines().count(), 16);
    }
    assert!(!tmp.path().join(run).join("snapshots_t1.csv").exists());

    let manifest = read(tmp.path(), MANIFEST_NAME);
    assert!(manifest.contains("# status: complete"));
    assert!(manifest.contains("k = 1.05, 1.8"));
    for f in &report.files {
        assert!(manifest.contains(&format!("# file: {}", f.display())));
    }
}

#[test]
fn compare_run_has_both_methods() {
    let tmp = tempfile::tempdir().unwrap();
    let report = run_preset(&small("fig1", tmp.path())).unwrap();
    let run = &report.runs[0];
    let ftm = run.ftm.as_ref().unwrap();
    let bt = run.backtracking.as_ref().unwrap();
    assert_eq!(ftm.times, bt.times);
    assert_eq!(run.ftm_se.len(), 9);
    assert_eq!(run.backtracking_se.len(), 9);
    assert!(run.fit.is_some() && run.backtracking_fit.is_some());
    let h = read(tmp.path(), &format!("{}/h_series.csv", run.dir.display()));
    assert_eq!(h.lines().filter(|l| l.contains(",FTM,")).count(), 9);
    assert_eq!(h.lines().filter(|l| l.contains(",backtracking,")).count(), 9);
    assert_eq!(read(tmp.path(), "fits.csv").lines().count(), 2);
    assert_eq!(read(tmp.path(), "fits_backtracking.csv").lines().count(), 2);
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = small("fig1", a.path());
    ca.workers = 1;
    let mut cb = small("fig1", b.path());
    cb.workers = 3;
    let ra = run_preset(&ca).unwrap();
    let rb = run_preset(&cb).unwrap();
    assert_eq!(ra.files, rb.files);
    for f in &ra.files {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn seed_changes_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cb = small("fig2", b.path());
    cb.seed = 2;
    cb.presets = 1;
    let mut ca = small("fig2", a.path());
    ca.presets = 1;
    let ra = run_preset(&ca).unwrap();
    let rb = run_preset(&cb).unwrap();
    assert_ne!(ra.runs[0].mode_seed, rb.runs[0].mode_seed);
    assert_ne!(read(a.path(), "fits.csv"), read(b.path(), "fits.csv"));
}

#[test]
fn spread_study_writes_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("fig4", tmp.path());
    cfg.couplings = vec![0.1];
    cfg.presets = 1;
    cfg.t_end = PI;
    assert_eq!(cfg.study, Study::Spread);
    let report = run_preset(&cfg).unwrap();
    let s = report.runs[0].spread.as_ref().unwrap();
    assert!((0.0..=1.0).contains(&s.mean_score));
    assert!(s.mean_path_length > 0.0);
    let dir = report.runs[0].dir.display().to_string();
    assert_eq!(read(tmp.path(), &format!("{dir}/spread.csv")).lines().count(), 1 + 125);
    assert_eq!(read(tmp.path(), &format!("{dir}/traces.csv")).lines().count(), 1 + 5 * 41);
    assert_eq!(read(tmp.path(), "spread_summary.csv").lines().count(), 2);
}

#[test]
fn failure_is_stage_tagged_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("fig2", tmp.path());
    cfg.presets = 2;
    cfg.max_steps = 1;
    cfg.rejection_ceiling = 0.0;
    let err = run_preset(&cfg).unwrap_err();
    match &err {
        Error::Stage { stage, source } => {
            assert!(stage.starts_with("evolve"), "{stage}");
            assert!(matches!(**source, Error::RejectionCeiling { .. }));
        }
        other => panic!("unexpected error {other:?}"),
    }
    let manifest = read(tmp.path(), MANIFEST_NAME);
    assert!(manifest.contains("# status: failed: evolve"), "{manifest}");
    // The mode set of the failing run was already persisted.
    assert!(manifest.contains("# file: runs/M24_k0.1_p0/mode_set.txt"));
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("fig7", tmp.path());
    cfg.couplings.clear();
    match run_preset(&cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "config"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(!tmp.path().join(MANIFEST_NAME).exists());
}
