//! Initial nonequilibrium ensembles and their forward evolution.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dynamics::{integrate_verified, IntegratorConfig, Trajectory};
use crate::error::{Error, Result};
use crate::wavefunction::WaveFunction;

/// Rejected fraction above which an ensemble is considered untrustworthy.
pub const DEFAULT_REJECTION_CEILING: f64 = 0.01;

/// Redraw-truncation below this acceptance rate is treated as a bad spec.
pub const MIN_TRUNCATION_ACCEPTANCE: f64 = 0.1;

/// Axis-aligned rectangle in (x_a, x_b).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl Region {
    pub const DEFAULT: Region = Region {
        a_min: -5.0,
        a_max: 5.0,
        b_min: -5.0,
        b_max: 5.0,
    };

    pub fn new(a_min: f64, a_max: f64, b_min: f64, b_max: f64) -> Result<Self> {
        let region = Self {
            a_min,
            a_max,
            b_min,
            b_max,
        };
        region.validate()?;
        Ok(region)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.a_min, self.a_max, self.b_min, self.b_max]
            .iter()
            .all(|v| v.is_finite())
            && self.a_max > self.a_min
            && self.b_max > self.b_min;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate region {self:?}")))
        }
    }

    /// Half-open on the upper edges so that grid cells tile the region.
    pub fn contains(&self, xa: f64, xb: f64) -> bool {
        xa >= self.a_min && xa < self.a_max && xb >= self.b_min && xb < self.b_max
    }

    pub fn width(&self) -> f64 {
        self.a_max - self.a_min
    }

    pub fn height(&self) -> f64 {
        self.b_max - self.b_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

impl Default for Region {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Bivariate Gaussian in (x_a, x_b).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub mean_a: f64,
    pub mean_b: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub correlation: f64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self {
            mean_a: 0.0,
            mean_b: 0.0,
            sigma_a: 1.0,
            sigma_b: 1.0,
            correlation: 0.0,
        }
    }
}

impl GaussianSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_a.is_finite() && self.mean_b.is_finite()) {
            return Err(Error::Config("Gaussian mean must be finite".into()));
        }
        if !(self.sigma_a > 0.0 && self.sigma_b > 0.0)
            || !(self.sigma_a.is_finite() && self.sigma_b.is_finite())
        {
            return Err(Error::Config(format!(
                "Gaussian widths must be positive, got {} and {}",
                self.sigma_a, self.sigma_b
            )));
        }
        if !(self.correlation.abs() < 1.0) {
            return Err(Error::Config(format!(
                "correlation must lie in (-1, 1), got {}",
                self.correlation
            )));
        }
        Ok(())
    }

    /// Untruncated density at (x_a, x_b).
    pub fn pdf(&self, xa: f64, xb: f64) -> f64 {
        let r = self.correlation;
        let u = (xa - self.mean_a) / self.sigma_a;
        let v = (xb - self.mean_b) / self.sigma_b;
        let det = 1.0 - r * r;
        let q = (u * u - 2.0 * r * u * v + v * v) / det;
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * self.sigma_a * self.sigma_b * det.sqrt())
    }

    /// Probability mass inside `region`, by a 1000×1000 midpoint rule.
    pub fn mass_in(&self, region: &Region) -> f64 {
        const SIDE: usize = 1000;
        let ha = region.width() / SIDE as f64;
        let hb = region.height() / SIDE as f64;
        let mut total = 0.0;
        for i in 0..SIDE {
            let xa = region.a_min + (i as f64 + 0.5) * ha;
            for j in 0..SIDE {
                total += self.pdf(xa, region.b_min + (j as f64 + 0.5) * hb);
            }
        }
        total * ha * hb
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let r = self.correlation;
        (
            self.mean_a + self.sigma_a * z1,
            self.mean_b + self.sigma_b * (r * z1 + (1.0 - r * r).sqrt() * z2),
        )
    }
}

/// Parameters of the initial nonequilibrium ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub n: usize,
    pub gaussian: GaussianSpec,
    pub region: Region,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            gaussian: GaussianSpec::default(),
            region: Region::DEFAULT,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("ensemble size must be positive".into()));
        }
        self.gaussian.validate()?;
        self.region.validate()
    }
}

/// Outcome of truncated sampling, with the number of draws it took.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialSample {
    pub points: Vec<(f64, f64)>,
    pub draws: usize,
}

impl InitialSample {
    pub fn redraw_fraction(&self) -> f64 {
        (self.draws - self.points.len()) as f64 / self.draws as f64
    }
}

/// N draws of the Gaussian truncated to the region by redrawing.
pub fn sample_initial(spec: &EnsembleSpec) -> Result<Vec<(f64, f64)>> {
    sample_initial_counted(spec).map(|s| s.points)
}

pub fn sample_initial_counted(spec: &EnsembleSpec) -> Result<InitialSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Past this many draws the acceptance rate is certainly below the minimum.
    let budget = (spec.n as f64 / MIN_TRUNCATION_ACCEPTANCE).ceil() as usize + 1000;
    let mut points = Vec::with_capacity(spec.n);
    let mut draws = 0;
    while points.len() < spec.n {
        if draws >= budget {
            return Err(Error::Sampling(format!(
                "truncation acceptance {:.3} below {MIN_TRUNCATION_ACCEPTANCE}",
                points.len() as f64 / draws as f64
            )));
        }
        draws += 1;
        let (xa, xb) = spec.gaussian.draw(&mut rng);
        if spec.region.contains(xa, xb) {
            points.push((xa, xb));
        }
    }
    Ok(InitialSample { points, draws })
}

/// N draws from m|Ψ(·, t)|² restricted to the region, by rejection against a
/// constant envelope.
///
/// The envelope is 1.25 × the maximum over a 512×512 grid. If a draw ever
/// exceeds it, sampling restarts from the same seed with the envelope doubled,
/// so the result stays a deterministic function of the arguments.
pub fn sample_equilibrium(
    wf: &WaveFunction,
    t: f64,
    region: &Region,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    region.validate()?;
    if n == 0 {
        return Err(Error::Config("ensemble size must be positive".into()));
    }
    const SCAN: usize = 512;
    let mut peak: f64 = 0.0;
    for i in 0..SCAN {
        let xa = region.a_min + (i as f64 + 0.5) * region.width() / SCAN as f64;
        for j in 0..SCAN {
            let xb = region.b_min + (j as f64 + 0.5) * region.height() / SCAN as f64;
            peak = peak.max(wf.density_original(xa, xb, t));
        }
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Sampling("density vanishes on the region".into()));
    }
    let ua = Uniform::new(region.a_min, region.a_max)
        .map_err(|e| Error::Sampling(e.to_string()))?;
    let ub = Uniform::new(region.b_min, region.b_max)
        .map_err(|e| Error::Sampling(e.to_string()))?;
    let mut bound = 1.25 * peak;
    'attempt: loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        while points.len() < n {
            let xa = rng.sample(ua);
            let xb = rng.sample(ub);
            let f = wf.density_original(xa, xb, t);
            if f > bound {
                bound *= 2.0;
                continue 'attempt;
            }
            if rng.random::<f64>() * bound < f {
                points.push((xa, xb));
            }
        }
        return Ok(points);
    }
}

/// Accepted positions of an evolved ensemble at each recording time.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub times: Vec<f64>,
    /// Indices (into the initial points) of the accepted trajectories.
    pub ids: Vec<usize>,
    /// positions[i][j] is trajectory ids[j] at times[i], in (x_a, x_b).
    pub positions: Vec<Vec<(f64, f64)>>,
    pub rejected_count: usize,
    pub out_of_box: Vec<usize>,
    pub region: Region,
}

impl SnapshotSet {
    pub fn total(&self) -> usize {
        self.ids.len() + self.rejected_count
    }

    pub fn rejected_fraction(&self) -> f64 {
        self.rejected_count as f64 / self.total() as f64
    }

    /// `id,x_a,x_b` rows for recording time `index`.
    pub fn csv(&self, index: usize) -> String {
        let mut out = String::from("id,x_a,x_b\n");
        for (id, (xa, xb)) in self.ids.iter().zip(&self.positions[index]) {
            let _ = writeln!(out, "{id},{xa},{xb}");
        }
        out
    }

    /// One `snapshots_t<index>.csv` per recording time.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        for i in 0..self.times.len() {
            let path = dir.join(format!("snapshots_t{i}.csv"));
            std::fs::write(&path, self.csv(i)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Samples the initial ensemble and evolves it with the default rejection ceiling.
pub fn evolve(spec: &EnsembleSpec, wf: &WaveFunction, cfg: &IntegratorConfig) -> Result<SnapshotSet> {
    if cfg.record_times.first() != Some(&0.0) {
        return Err(Error::Config("record_times must start at 0".into()));
    }
    let points = sample_initial(spec)?;
    evolve_points(&points, wf, cfg, &spec.region, DEFAULT_REJECTION_CEILING)
}

/// Integrates every starting point and gathers snapshots.
///
/// Work is spread over the current rayon pool; results are collected in input
/// order so the output does not depend on scheduling.
pub fn evolve_points(
    points: &[(f64, f64)],
    wf: &WaveFunction,
    cfg: &IntegratorConfig,
    region: &Region,
    rejection_ceiling: f64,
) -> Result<SnapshotSet> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(Error::Config("no initial points".into()));
    }
    let results: Vec<Result<Trajectory>> = points
        .par_iter()
        .map(|&start| integrate_verified(wf, start, cfg))
        .collect();
    let mut trajectories = Vec::with_capacity(results.len());
    for r in results {
        trajectories.push(r?);
    }
    gather(trajectories, wf, cfg, region, rejection_ceiling)
}

fn gather(
    trajectories: Vec<Trajectory>,
    wf: &WaveFunction,
    cfg: &IntegratorConfig,
    region: &Region,
    rejection_ceiling: f64,
) -> Result<SnapshotSet> {
    let times = cfg.record_times.clone();
    let mut ids = Vec::new();
    let mut positions = vec![Vec::new(); times.len()];
    let mut rejected = 0;
    for (id, tr) in trajectories.iter().enumerate() {
        if !tr.verdict.is_accepted() {
            rejected += 1;
            continue;
        }
        ids.push(id);
        for (slot, (_, xa, xb)) in positions.iter_mut().zip(tr.original_samples(wf)) {
            slot.push((xa, xb));
        }
    }
    let total = trajectories.len();
    if rejected as f64 > rejection_ceiling * total as f64 {
        return Err(Error::RejectionCeiling {
            rejected,
            total,
            ceiling: rejection_ceiling,
        });
    }
    if rejected > 0 {
        log::warn!("{rejected} of {total} trajectories rejected");
    }
    let out_of_box = positions
        .iter()
        .map(|ps| ps.iter().filter(|(a, b)| !region.contains(*a, *b)).count())
        .collect();
    Ok(SnapshotSet {
        times,
        ids,
        positions,
        rejected_count: rejected,
        out_of_box,
        region: *region,
    })
}
