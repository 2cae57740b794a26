//! Named presets, flat key = value configs, the run pipeline and manifests.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};

use crate::diagnostics::{spread_test, trace_trajectories, traces_csv, TRACE_CENTERS};
use crate::dynamics::{IntegratorConfig, Verification};
use crate::ensemble::{
    evolve_points, sample_equilibrium, sample_initial, EnsembleSpec, GaussianSpec, Region, SnapshotSet,
    DEFAULT_REJECTION_CEILING,
};
use crate::fitting::{aggregate, fit_series, fits_csv, FitAggregate, FitRow, RelaxationFit, MIN_POINTS};
use crate::metrics::{
    backtrack_series, backtrack_snapshots, bootstrap_backtracking, bootstrap_ftm, coarse_rho, h_series_csv,
    h_series_ftm_table, psi2_table, CoarseGrid, HSeries, InitialDensity, Psi2Table,
};
use crate::wavefunction::{ModeSet, OscillatorModel, WaveFunction, DEFAULT_N_MAX};
use crate::{Error, Result};

pub use crate::dynamics::default_record_times;

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const PRESET_NAMES: [&str; 7] = ["fig1", "fig2", "fig3", "fig4", "fig5", "fig6", "fig7"];

/// One-line summary of a preset.
pub fn describe_preset(name: &str) -> &'static str {
    match name {
        "fig1" => "FTM vs backtracking H-function, M=9, k=0.5, t in [0, 2pi]",
        "fig2" => "relaxation with snapshots at 0, 5pi, 10pi, M=24, k=0.1",
        "fig3" => "relaxation with snapshots at 0, 5pi, 10pi, M=24, k=1.8",
        "fig4" => "spread and trajectory traces, M=20, k in {0.1, 0.9, 1.1, 1.8}",
        "fig5" => "long runs to 100pi, M in {4, 12, 20}, k in {0.5, 1.8}",
        "fig6" => "k-sweep 0.00 to 1.00 over [0, 12pi] with decay fits",
        "fig7" => "k-sweep 1.05 to 1.80 over [0, 12pi] with decay fits",
        _ => "",
    }
}

/// What a run computes for each (M, k, preset) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    /// FTM and backtracking H̄ series side by side.
    Compare,
    /// FTM H̄ series, decay fits and cross-preset aggregates.
    Relaxation,
    /// Neighbour-set spread test and trajectory traces.
    Spread,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Compare => "compare",
            Study::Relaxation => "relaxation",
            Study::Spread => "spread",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "compare" => Some(Study::Compare),
            "relaxation" => Some(Study::Relaxation),
            "spread" => Some(Study::Spread),
            _ => None,
        }
    }
}

/// Initial ensemble distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initial {
    /// The truncated Gaussian of the config.
    Gaussian,
    /// m|Ψ(·, 0)|² restricted to the box.
    Equilibrium,
}

impl Initial {
    pub fn name(self) -> &'static str {
        match self {
            Initial::Gaussian => "gaussian",
            Initial::Equilibrium => "equilibrium",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Scale::Desk),
            "paper" => Some(Scale::Paper),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: String,
    pub scale: Scale,
    pub study: Study,
    /// Mode counts M; every entry is run.
    pub modes: Vec<usize>,
    pub n_max: u32,
    pub omega: f64,
    pub mass: f64,
    /// Coupling constants k; every entry is run.
    pub couplings: Vec<f64>,
    /// Ensemble size N.
    pub n: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub subsamples: usize,
    pub region: Region,
    pub t_end: f64,
    pub record_step: f64,
    pub tol_start: f64,
    pub tol_floor: f64,
    pub delta: f64,
    pub max_steps: usize,
    pub verification: Verification,
    pub gaussian: GaussianSpec,
    pub initial: Initial,
    /// Random-phase repetitions per (M, k).
    pub presets: usize,
    pub seed: u64,
    /// Worker threads; 0 uses rayon's default.
    pub workers: usize,
    pub output: PathBuf,
    pub rejection_ceiling: f64,
    pub psi2_min_mass: f64,
    /// 0 disables the bootstrap.
    pub bootstrap_replicates: usize,
    /// Backtracking lattice points per cell (a perfect square).
    pub points_per_cell: usize,
    /// Write snapshot and grid CSVs at every n-th record time; 0 writes none.
    pub snapshot_every: usize,
    pub spread_half_width: f64,
}

/// k values `from, from + step, …, to` rounded to two decimals.
fn k_range(from: f64, to: f64, step: f64) -> Vec<f64> {
    let count = ((to - from) / step).round() as usize;
    (0..=count)
        .map(|i| ((from + i as f64 * step) * 100.0).round() / 100.0)
        .collect()
}

impl ExperimentConfig {
    /// Desk-scale defaults for a single relaxation run.
    pub fn base() -> Self {
        Self {
            preset: "custom".into(),
            scale: Scale::Desk,
            study: Study::Relaxation,
            modes: vec![12],
            n_max: DEFAULT_N_MAX,
            omega: 1.0,
            mass: 1.0,
            couplings: vec![0.5],
            n: 20_000,
            grid_rows: 16,
            grid_cols: 16,
            subsamples: 8,
            region: Region::DEFAULT,
            t_end: 12.0 * PI,
            record_step: PI / 4.0,
            tol_start: IntegratorConfig::DEFAULT_TOL_START,
            tol_floor: IntegratorConfig::DEFAULT_TOL_FLOOR,
            delta: IntegratorConfig::DEFAULT_DELTA,
            max_steps: IntegratorConfig::DEFAULT_MAX_STEPS,
            verification: Verification::PerInterval,
            gaussian: GaussianSpec::default(),
            initial: Initial::Gaussian,
            presets: 3,
            seed: 1,
            workers: 0,
            output: PathBuf::from("runs/custom"),
            rejection_ceiling: DEFAULT_REJECTION_CEILING,
            psi2_min_mass: 0.75,
            bootstrap_replicates: 200,
            points_per_cell: 64,
            snapshot_every: 0,
            spread_half_width: crate::diagnostics::DEFAULT_HALF_WIDTH,
        }
    }

    /// One of [`PRESET_NAMES`] at the given scale.
    pub fn preset(name: &str, scale: Scale) -> Result<Self> {
        let paper = scale == Scale::Paper;
        let mut c = Self::base();
        c.preset = name.to_string();
        c.scale = scale;
        c.output = PathBuf::from(format!("runs/{name}"));
        if paper {
            c.n = 230_400;
            c.presets = 10;
        }
        match name {
            "fig1" => {
                c.study = Study::Compare;
                c.modes = vec![9];
                c.couplings = vec![0.5];
                c.t_end = 2.0 * PI;
                c.presets = 1;
            }
            "fig2" | "fig3" => {
                c.modes = vec![24];
                c.couplings = vec![if name == "fig2" { 0.1 } else { 1.8 }];
                c.t_end = 10.0 * PI;
                c.snapshot_every = 20;
            }
            "fig4" => {
                c.study = Study::Spread;
                c.modes = vec![20];
                c.couplings = vec![0.1, 0.9, 1.1, 1.8];
                c.t_end = 10.0 * PI;
                c.presets = if paper { 1 } else { 3 };
                c.bootstrap_replicates = 0;
            }
            "fig5" => {
                c.modes = vec![4, 12, 20];
                c.couplings = vec![0.5, 1.8];
                c.t_end = 100.0 * PI;
                c.record_step = 2.0 * PI;
                c.presets = 3;
            }
            "fig6" | "fig7" => {
                let (from, to) = if name == "fig6" { (0.0, 1.0) } else { (1.05, 1.8) };
                c.couplings = if paper {
                    k_range(from, to, 0.05)
                } else if name == "fig6" {
                    vec![0.0, 0.5, 1.0]
                } else {
                    vec![1.05, 1.4, 1.8]
                };
                c.modes = if paper { vec![12, 15, 18] } else { vec![12] };
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        }
        Ok(c)
    }

    pub fn grid(&self) -> Result<CoarseGrid> {
        CoarseGrid::new(self.region, self.grid_rows, self.grid_cols, self.subsamples)
    }

    pub fn record_times(&self) -> Result<Vec<f64>> {
        default_record_times(self.t_end, self.record_step)
    }

    pub fn integrator(&self) -> Result<IntegratorConfig> {
        Ok(IntegratorConfig {
            tol_start: self.tol_start,
            tol_floor: self.tol_floor,
            delta: self.delta,
            record_times: self.record_times()?,
            max_steps: self.max_steps,
            verification: self.verification,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.modes.is_empty() {
            return bad("mode count list is empty".into());
        }
        if self.couplings.is_empty() {
            return bad("k-sweep list is empty".into());
        }
        let available = (self.n_max as usize + 1).pow(2);
        if let Some(m) = self.modes.iter().find(|&&m| m == 0 || m > available) {
            return bad(format!("M = {m} outside 1..={available} for n_max {}", self.n_max));
        }
        for &k in &self.couplings {
            OscillatorModel::new(self.mass, self.omega, k)?;
        }
        if self.n == 0 {
            return bad("N must be positive".into());
        }
        if self.presets == 0 {
            return bad("preset count must be positive".into());
        }
        self.grid()?;
        self.integrator()?.validate()?;
        self.gaussian.validate()?;
        if !(0.0..=1.0).contains(&self.rejection_ceiling) {
            return bad(format!("rejection_ceiling {} outside [0, 1]", self.rejection_ceiling));
        }
        if !(0.0..=1.0).contains(&self.psi2_min_mass) {
            return bad(format!("psi2_min_mass {} outside [0, 1]", self.psi2_min_mass));
        }
        if self.bootstrap_replicates == 1 {
            return bad("bootstrap_replicates must be 0 or at least 2".into());
        }
        let side = (self.points_per_cell as f64).sqrt().round() as usize;
        if self.points_per_cell == 0 || side * side != self.points_per_cell {
            return bad(format!("points_per_cell {} is not a perfect square", self.points_per_cell));
        }
        if !(self.spread_half_width > 0.0 && self.spread_half_width.is_finite()) {
            return bad(format!("spread_half_width must be positive, got {}", self.spread_half_width));
        }
        Ok(())
    }

    /// The config as `key = value` lines, readable by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let list = |xs: Vec<String>| xs.join(", ");
        let r = &self.region;
        let g = &self.gaussian;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        kv("scale", self.scale.name().into());
        kv("study", self.study.name().into());
        kv("modes", list(self.modes.iter().map(|m| m.to_string()).collect()));
        kv("n_max", self.n_max.to_string());
        kv("omega", self.omega.to_string());
        kv("mass", self.mass.to_string());
        kv("k", list(self.couplings.iter().map(|k| k.to_string()).collect()));
        kv("n", self.n.to_string());
        kv("grid_rows", self.grid_rows.to_string());
        kv("grid_cols", self.grid_cols.to_string());
        kv("subsamples", self.subsamples.to_string());
        kv("box", format!("{}, {}, {}, {}", r.a_min, r.a_max, r.b_min, r.b_max));
        kv("t_end", self.t_end.to_string());
        kv("record_step", self.record_step.to_string());
        kv("tol_start", self.tol_start.to_string());
        kv("tol_floor", self.tol_floor.to_string());
        kv("delta", self.delta.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv(
            "verification",
            match self.verification {
                Verification::PerInterval => "per-interval",
                Verification::WholeRun => "whole-run",
            }
            .into(),
        );
        kv("mean_a", g.mean_a.to_string());
        kv("mean_b", g.mean_b.to_string());
        kv("sigma_a", g.sigma_a.to_string());
        kv("sigma_b", g.sigma_b.to_string());
        kv("correlation", g.correlation.to_string());
        kv("initial", self.initial.name().into());
        kv("presets", self.presets.to_string());
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        kv("output", self.output.display().to_string());
        kv("rejection_ceiling", self.rejection_ceiling.to_string());
        kv("psi2_min_mass", self.psi2_min_mass.to_string());
        kv("bootstrap_replicates", self.bootstrap_replicates.to_string());
        kv("points_per_cell", self.points_per_cell.to_string());
        kv("snapshot_every", self.snapshot_every.to_string());
        kv("spread_half_width", self.spread_half_width.to_string());
        out
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` key (with
    /// optional `scale`) selects the starting values, other keys override them.
    /// Unknown and repeated keys are errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        Self::parse_onto(None, text, path)
    }

    /// As [`ExperimentConfig::parse`], but keys apply on top of `start` when given.
    pub fn parse_onto(start: Option<Self>, text: &str, path: &Path) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(parse_error(path, i + 1, format!("expected key = value, got {line:?}")));
            };
            let (k, v) = (k.trim(), v.trim());
            if entries.iter().any(|e| e.1 == k) {
                return Err(parse_error(path, i + 1, format!("repeated key {k:?}")));
            }
            entries.push((i + 1, k, v));
        }
        let find = |key: &str| entries.iter().find(|e| e.1 == key);
        let scale = match find("scale") {
            Some(&(line, _, v)) => {
                Scale::parse(v).ok_or_else(|| parse_error(path, line, format!("unknown scale {v:?}")))?
            }
            None => Scale::Desk,
        };
        let mut cfg = match (start, find("preset")) {
            (Some(start), _) => start,
            (None, Some(&(_, _, "custom")) | None) => Self {
                scale,
                ..Self::base()
            },
            (None, Some(&(line, _, v))) => Self::preset(v, scale).map_err(|e| parse_error(path, line, e.to_string()))?,
        };
        for &(line, key, value) in &entries {
            cfg.set(key, value).map_err(|msg| parse_error(path, line, msg))?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let g = &mut self.gaussian;
        match key {
            "preset" => self.preset = value.to_string(),
            "scale" => self.scale = Scale::parse(value).ok_or(format!("unknown scale {value:?}"))?,
            "study" => self.study = Study::parse(value).ok_or(format!("unknown study {value:?}"))?,
            "modes" => self.modes = parse_list(value, parse_int)?,
            "n_max" => self.n_max = parse_int(value)?,
            "omega" => self.omega = parse_real(value)?,
            "mass" => self.mass = parse_real(value)?,
            "k" => self.couplings = parse_list(value, parse_real)?,
            "n" => self.n = parse_int(value)?,
            "grid_rows" => self.grid_rows = parse_int(value)?,
            "grid_cols" => self.grid_cols = parse_int(value)?,
            "subsamples" => self.subsamples = parse_int(value)?,
            "box" => {
                let v: Vec<f64> = parse_list(value, parse_real)?;
                let [a_min, a_max, b_min, b_max] = v[..] else {
                    return Err(format!("box needs 4 values, got {}", v.len()));
                };
                self.region = Region {
                    a_min,
                    a_max,
                    b_min,
                    b_max,
                };
            }
            "t_end" => self.t_end = parse_real(value)?,
            "record_step" => self.record_step = parse_real(value)?,
            "tol_start" => self.tol_start = parse_real(value)?,
            "tol_floor" => self.tol_floor = parse_real(value)?,
            "delta" => self.delta = parse_real(value)?,
            "max_steps" => self.max_steps = parse_int(value)?,
            "verification" => {
                self.verification = match value {
                    "per-interval" => Verification::PerInterval,
                    "whole-run" => Verification::WholeRun,
                    _ => return Err(format!("unknown verification {value:?}")),
                }
            }
            "mean_a" => g.mean_a = parse_real(value)?,
            "mean_b" => g.mean_b = parse_real(value)?,
            "sigma_a" => g.sigma_a = parse_real(value)?,
            "sigma_b" => g.sigma_b = parse_real(value)?,
            "correlation" => g.correlation = parse_real(value)?,
            "initial" => {
                self.initial = match value {
                    "gaussian" => Initial::Gaussian,
                    "equilibrium" => Initial::Equilibrium,
                    _ => return Err(format!("unknown initial distribution {value:?}")),
                }
            }
            "presets" => self.presets = parse_int(value)?,
            "seed" => self.seed = parse_int(value)?,
            "workers" => self.workers = parse_int(value)?,
            "output" => self.output = PathBuf::from(value),
            "rejection_ceiling" => self.rejection_ceiling = parse_real(value)?,
            "psi2_min_mass" => self.psi2_min_mass = parse_real(value)?,
            "bootstrap_replicates" => self.bootstrap_replicates = parse_int(value)?,
            "points_per_cell" => self.points_per_cell = parse_int(value)?,
            "snapshot_every" => self.snapshot_every = parse_int(value)?,
            "spread_half_width" => self.spread_half_width = parse_real(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Seed of the mode set for preset `p` with M modes. Independent of k, so
    /// a sweep compares couplings on the same mode sets.
    pub fn mode_seed(&self, m: usize, p: usize) -> u64 {
        derive_seed(self.seed, &[1, m as u64, p as u64])
    }

    /// Seed of the initial ensemble for preset `p`.
    pub fn ensemble_seed(&self, p: usize) -> u64 {
        derive_seed(self.seed, &[2, p as u64])
    }

    fn bootstrap_seed(&self, m: usize, k: f64, p: usize) -> u64 {
        derive_seed(self.seed, &[3, m as u64, k.to_bits(), p as u64])
    }
}

fn parse_error(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

fn parse_int<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("expected a non-negative integer, got {s:?}"))
}

/// A real number, optionally as a multiple of π: `12pi`, `pi/4`, `2.5pi/3`.
pub fn parse_real(s: &str) -> std::result::Result<f64, String> {
    let err = || format!("expected a number, got {s:?}");
    let (num, den) = match s.split_once('/') {
        Some((a, b)) => (a.trim(), b.trim().parse::<f64>().map_err(|_| err())?),
        None => (s.trim(), 1.0),
    };
    let value = match num.strip_suffix("pi") {
        Some("") => PI,
        Some(c) => c.trim().parse::<f64>().map_err(|_| err())? * PI,
        None => num.parse::<f64>().map_err(|_| err())?,
    };
    let v = value / den;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(err())
    }
}

fn parse_list<T>(s: &str, item: fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| item(x.trim())).collect()
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 chain over the base seed and the tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |h, &t| mix(h ^ t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpreadSummary {
    pub mean_score: f64,
    pub mean_path_length: f64,
    pub mean_visited_cells: f64,
    pub rejected: usize,
}

/// Results for one (M, k, preset) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub m: usize,
    pub k: f64,
    pub preset: usize,
    pub mode_seed: u64,
    /// Relative to the output directory.
    pub dir: PathBuf,
    pub rejected: usize,
    pub ftm: Option<HSeries>,
    /// Bootstrap standard error per time; empty when disabled.
    pub ftm_se: Vec<f64>,
    pub fit: Option<RelaxationFit>,
    pub backtracking: Option<HSeries>,
    pub backtracking_se: Vec<f64>,
    pub backtracking_fit: Option<RelaxationFit>,
    pub spread: Option<SpreadSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRecord {
    pub m: usize,
    pub k: f64,
    pub aggregate: FitAggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<AggregateRecord>,
    /// Every file written apart from the manifest, relative to `out_dir`.
    pub files: Vec<PathBuf>,
    pub wall_time: f64,
}

impl RunReport {
    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join(MANIFEST_NAME)
    }
}

struct Writer {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn write(&mut self, rel: impl AsRef<Path>, contents: &str) -> Result<()> {
        let rel = rel.as_ref();
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(rel.to_path_buf());
        Ok(())
    }
}

/// Runs the configured study and writes its outputs and manifest to
/// `cfg.output`. On failure the manifest records the completed runs and the
/// failing stage.
pub fn run_preset(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    if cfg.scale == Scale::Paper {
        warn!(
            "paper scale: N = {}, {} presets, {} couplings; expect a very long run",
            cfg.n,
            cfg.presets,
            cfg.couplings.len()
        );
    }
    let started = Instant::now();
    let mut writer = Writer {
        root: cfg.output.clone(),
        files: Vec::new(),
    };
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e).in_stage("persist"))?;
    let mut runs = Vec::new();
    let mut aggregates = Vec::new();

    let result = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")).in_stage("config"))
            .and_then(|pool| pool.install(|| pipeline(cfg, &mut writer, &mut runs, &mut aggregates)))
    } else {
        pipeline(cfg, &mut writer, &mut runs, &mut aggregates)
    };
    let wall_time = started.elapsed().as_secs_f64();
    let status = match &result {
        Ok(()) => "complete".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    let manifest = manifest_text(cfg, &status, wall_time, &runs, &writer.files);
    let path = cfg.output.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e).in_stage("persist"))?;
    result?;
    Ok(RunReport {
        out_dir: cfg.output.clone(),
        runs,
        aggregates,
        files: writer.files,
        wall_time,
    })
}

fn manifest_text(cfg: &ExperimentConfig, status: &str, wall_time: f64, runs: &[RunRecord], files: &[PathBuf]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# pilotwave run manifest");
    let _ = writeln!(out, "# version: {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "# status: {status}");
    let _ = writeln!(out, "# wall_time_s: {wall_time:.3}");
    for r in runs {
        let _ = writeln!(
            out,
            "# run: {} M={} k={} preset={} mode_seed={} ensemble_seed={} rejected={}",
            r.dir.display(),
            r.m,
            r.k,
            r.preset,
            r.mode_seed,
            cfg.ensemble_seed(r.preset),
            r.rejected
        );
    }
    for f in files {
        let _ = writeln!(out, "# file: {}", f.display());
    }
    out.push_str(&cfg.to_text());
    out
}

fn pipeline(
    cfg: &ExperimentConfig,
    writer: &mut Writer,
    runs: &mut Vec<RunRecord>,
    aggregates: &mut Vec<AggregateRecord>,
) -> Result<()> {
    let grid = cfg.grid()?;
    let integrator = cfg.integrator()?;
    let mut fit_rows = Vec::new();
    let mut bt_rows = Vec::new();
    let mut spread_rows = String::from("M,k,preset_seed,mean_score,mean_path_length,mean_visited_cells,rejected\n");
    for &m in &cfg.modes {
        for &k in &cfg.couplings {
            for p in 0..cfg.presets {
                let tag = format!("M={m} k={k} preset {p}");
                let record = run_one(cfg, &grid, &integrator, m, k, p, writer, &tag)?;
                if let Some(fit) = &record.fit {
                    fit_rows.push(FitRow {
                        m,
                        k,
                        preset_seed: record.mode_seed,
                        fit: fit.clone(),
                    });
                }
                if let Some(fit) = &record.backtracking_fit {
                    bt_rows.push(FitRow {
                        m,
                        k,
                        preset_seed: record.mode_seed,
                        fit: fit.clone(),
                    });
                }
                if let Some(s) = &record.spread {
                    let _ = writeln!(
                        spread_rows,
                        "{m},{k},{},{},{},{},{}",
                        record.mode_seed, s.mean_score, s.mean_path_length, s.mean_visited_cells, s.rejected
                    );
                }
                runs.push(record);
            }
            let group: Vec<&RunRecord> = runs.iter().filter(|r| r.m == m && r.k == k).collect();
            let fits: Vec<RelaxationFit> = group.iter().filter_map(|r| r.fit.clone()).collect();
            if fits.len() >= 2 {
                let h0s: Vec<f64> = group.iter().filter_map(|r| r.ftm.as_ref().map(|s| s.values[0])).collect();
                let agg = aggregate(&fits, &h0s).map_err(|e| e.in_stage(format!("aggregate M={m} k={k}")))?;
                info!(
                    "M={m} k={k}: mean tau {:.4} (std {:.4}), residue fraction {:.4}",
                    agg.mean_tau, agg.std_tau, agg.residue_fraction
                );
                aggregates.push(AggregateRecord { m, k, aggregate: agg });
            }
        }
    }
    let persist = |e: Error| e.in_stage("persist");
    match cfg.study {
        Study::Relaxation | Study::Compare => {
            writer.write("fits.csv", &fits_csv(&fit_rows)).map_err(persist)?;
            if cfg.study == Study::Compare {
                writer.write("fits_backtracking.csv", &fits_csv(&bt_rows)).map_err(persist)?;
            }
            if !aggregates.is_empty() {
                let mut out = String::from("M,k,presets,mean_tau,std_tau,mean_R,std_R,mean_H0,residue_fraction\n");
                for a in aggregates.iter() {
                    let g = &a.aggregate;
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{},{}",
                        a.m,
                        a.k,
                        g.fits.len(),
                        g.mean_tau,
                        g.std_tau,
                        g.mean_r,
                        g.std_r,
                        g.mean_h0,
                        g.residue_fraction
                    );
                }
                writer.write("aggregates.csv", &out).map_err(persist)?;
            }
        }
        Study::Spread => writer.write("spread_summary.csv", &spread_rows).map_err(persist)?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    cfg: &ExperimentConfig,
    grid: &CoarseGrid,
    integrator: &IntegratorConfig,
    m: usize,
    k: f64,
    p: usize,
    writer: &mut Writer,
    tag: &str,
) -> Result<RunRecord> {
    let stage = |name: &str| {
        let s = format!("{name} [{tag}]");
        move |e: Error| e.in_stage(s)
    };
    info!("{tag}: start");
    let mode_seed = cfg.mode_seed(m, p);
    let dir = PathBuf::from(format!("runs/M{m}_k{k}_p{p}"));
    let model = OscillatorModel::new(cfg.mass, cfg.omega, k).map_err(stage("setup"))?;
    let modes = ModeSet::sample(m, cfg.n_max, mode_seed).map_err(stage("setup"))?;
    writer.write(dir.join("mode_set.txt"), &modes.to_text()).map_err(stage("persist"))?;
    let wf = WaveFunction::new(model, modes).map_err(stage("setup"))?;
    let mut record = RunRecord {
        m,
        k,
        preset: p,
        mode_seed,
        dir: dir.clone(),
        rejected: 0,
        ftm: None,
        ftm_se: Vec::new(),
        fit: None,
        backtracking: None,
        backtracking_se: Vec::new(),
        backtracking_fit: None,
        spread: None,
    };

    if cfg.study == Study::Spread {
        let test = spread_test(&wf, integrator, &TRACE_CENTERS, cfg.spread_half_width, cfg.t_end, &cfg.region)
            .map_err(stage("spread"))?;
        let traces = trace_trajectories(&wf, integrator, &TRACE_CENTERS, cfg.t_end, grid).map_err(stage("traces"))?;
        writer.write(dir.join("spread.csv"), &test.csv()).map_err(stage("persist"))?;
        writer.write(dir.join("traces.csv"), &traces_csv(&wf, &traces)).map_err(stage("persist"))?;
        let n = traces.len() as f64;
        record.rejected = test.rejected + traces.iter().filter(|t| !t.trajectory.verdict.is_accepted()).count();
        record.spread = Some(SpreadSummary {
            mean_score: test.mean_score(),
            mean_path_length: traces.iter().map(|t| t.path_length).sum::<f64>() / n,
            mean_visited_cells: traces.iter().map(|t| t.visited_cells as f64).sum::<f64>() / n,
            rejected: record.rejected,
        });
        info!("{tag}: spread score {:.4}", test.mean_score());
        return Ok(record);
    }

    let seed = cfg.ensemble_seed(p);
    let points = match cfg.initial {
        Initial::Gaussian => sample_initial(&EnsembleSpec {
            n: cfg.n,
            gaussian: cfg.gaussian,
            region: cfg.region,
            seed,
        }),
        Initial::Equilibrium => sample_equilibrium(&wf, 0.0, &cfg.region, cfg.n, seed),
    }
    .map_err(stage("sample"))?;
    let snapshots = evolve_points(&points, &wf, integrator, &cfg.region, cfg.rejection_ceiling).map_err(stage("evolve"))?;
    record.rejected = snapshots.rejected_count;
    let psi2 = psi2_table(&wf, &snapshots.times, grid, cfg.psi2_min_mass).map_err(stage("coarse-grain"))?;
    write_snapshots(cfg, &snapshots, &psi2, grid, &dir, writer).map_err(stage("persist"))?;

    let ftm = h_series_ftm_table(&snapshots, &psi2, grid).map_err(stage("h-series"))?;
    let bseed = cfg.bootstrap_seed(m, k, p);
    if cfg.bootstrap_replicates > 0 {
        record.ftm_se =
            bootstrap_ftm(&snapshots, &psi2, grid, cfg.bootstrap_replicates, bseed).map_err(stage("bootstrap"))?;
    }
    drop(snapshots);
    let fits = ftm.len() >= MIN_POINTS;
    if fits {
        record.fit = Some(fit_series(&ftm).map_err(stage("fit"))?);
    } else {
        warn!("{tag}: {} record times, fewer than {MIN_POINTS}; no decay fit", ftm.len());
    }

    if cfg.study == Study::Compare {
        let rho0 = match cfg.initial {
            Initial::Gaussian => InitialDensity::truncated_gaussian(cfg.gaussian, cfg.region),
            Initial::Equilibrium => Ok(InitialDensity::Equilibrium),
        }
        .map_err(stage("backtracking"))?;
        let snaps = backtrack_snapshots(&wf, &rho0, grid, &psi2.times, integrator, cfg.points_per_cell)
            .map_err(stage("backtracking"))?;
        let series = backtrack_series(&snaps, &psi2, grid).map_err(stage("backtracking"))?;
        if cfg.bootstrap_replicates > 0 {
            record.backtracking_se = bootstrap_backtracking(&snaps, &psi2, grid, cfg.bootstrap_replicates, bseed)
                .map_err(stage("bootstrap"))?;
        }
        if fits {
            record.backtracking_fit = Some(fit_series(&series).map_err(stage("fit"))?);
        }
        record.backtracking = Some(series);
    }

    let mut all: Vec<&HSeries> = vec![&ftm];
    all.extend(record.backtracking.as_ref());
    writer.write(dir.join("h_series.csv"), &h_series_csv(&all)).map_err(stage("persist"))?;
    if cfg.bootstrap_replicates > 0 {
        let mut out = String::from("time,method,se\n");
        for (series, se) in [(Some(&ftm), &record.ftm_se), (record.backtracking.as_ref(), &record.backtracking_se)] {
            if let Some(series) = series {
                for (t, s) in series.times.iter().zip(se) {
                    let _ = writeln!(out, "{t},{},{s}", series.method);
                }
            }
        }
        writer.write(dir.join("h_bootstrap.csv"), &out).map_err(stage("persist"))?;
    }
    info!(
        "{tag}: H(0) = {:.4}, H(end) = {:.4}, rejected {}",
        ftm.values[0],
        ftm.values[ftm.len() - 1],
        record.rejected
    );
    record.ftm = Some(ftm);
    Ok(record)
}

fn write_snapshots(
    cfg: &ExperimentConfig,
    snapshots: &SnapshotSet,
    psi2: &Psi2Table,
    grid: &CoarseGrid,
    dir: &Path,
    writer: &mut Writer,
) -> Result<()> {
    if cfg.snapshot_every == 0 {
        return Ok(());
    }
    for i in (0..snapshots.times.len()).step_by(cfg.snapshot_every) {
        writer.write(dir.join(format!("snapshots_t{i}.csv")), &snapshots.csv(i))?;
        let rho = coarse_rho(&snapshots.positions[i], grid)?;
        writer.write(dir.join(format!("rho_grid_t{i}.csv")), &rho.cells.to_csv())?;
        writer.write(dir.join(format!("psi2_grid_t{i}.csv")), &psi2.cells[i].to_csv())?;
    }
    Ok(())
}

/// Outcome of re-running a manifest into a fresh directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub report: RunReport,
    /// Files whose bytes differ from the original run, or that are missing.
    pub mismatches: Vec<PathBuf>,
}

/// Re-runs the config recorded in a manifest into `out` and compares every
/// written file with the original. `workers` overrides the recorded count.
pub fn replay(manifest: &Path, out: &Path, workers: Option<usize>) -> Result<ReplayReport> {
    let mut cfg = ExperimentConfig::read(manifest).map_err(|e| e.in_stage("replay"))?;
    let original = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    cfg.output = out.to_path_buf();
    if let Some(w) = workers {
        cfg.workers = w;
    }
    let report = run_preset(&cfg)?;
    let mut mismatches = Vec::new();
    for f in &report.files {
        let same = match (fs::read(original.join(f)), fs::read(out.join(f))) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        if !same {
            mismatches.push(f.clone());
        }
    }
    Ok(ReplayReport { report, mismatches })
}
