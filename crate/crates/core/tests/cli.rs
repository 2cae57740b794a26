use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pilotwave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pilotwave"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.txt");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

const SMALL: &str = "preset = fig1\nn = 200\nt_end = pi\nrecord_step = pi/4\npoints_per_cell = 4\nbootstrap_replicates = 5\n";

#[test]
fn list_presets() {
    let o = pilotwave(&["list-presets"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().next().unwrap().starts_with("fig1"));
}

#[test]
fn run_then_replay_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    let o = pilotwave(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = out.join("manifest.txt");
    assert!(fs::read_to_string(&manifest).unwrap().contains("workers = 2"));

    let o = pilotwave(&["replay", "--manifest", manifest.to_str().unwrap(), "--workers", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("replay matches"));
    assert!(out.join("replay/fits.csv").exists());

    // A tampered output is reported and the exit code is nonzero.
    fs::write(out.join("fits.csv"), "tampered\n").unwrap();
    let replay_dir = tmp.path().join("again");
    let o = pilotwave(&[
        "replay",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        replay_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("differs: fits.csv"));
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    let o = pilotwave(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "42"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("\nseed = 42\n"));
    assert!(manifest.contains("\nn = 200\n"));
}

#[test]
fn preset_flag_with_config_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "n = 100\nt_end = pi/2\nrecord_step = pi/4\nbootstrap_replicates = 0\nmodes = 3\n");
    let out = tmp.path().join("run");
    let o = pilotwave(&["run", "--preset", "fig3", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("\npreset = fig3\n") && manifest.contains("\nk = 1.8\n"));
    assert!(out.join("runs/M3_k1.8_p2/h_series.csv").exists());
}

#[test]
fn bad_config_fails_with_stage_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "preset = fig7\nfrobnicate = 3\n");
    let o = pilotwave(&["run", "--config", &cfg]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("config:") && err.contains("line 2") && err.contains("frobnicate"), "{err}");

    let cfg = write_config(tmp.path(), "preset = fig7\nk =\n");
    let o = pilotwave(&["run", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("k-sweep list is empty"));

    let o = pilotwave(&["run", "--preset", "fig9"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown preset"));

    let o = pilotwave(&["run"]);
    assert!(!o.status.success());
}
