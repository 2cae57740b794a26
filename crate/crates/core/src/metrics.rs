//! Coarse-grained densities on a cell grid and the H-function built from them.
//!
//! Two estimators of ρ̄(t) are provided: forward histograms of an evolved
//! ensemble, and backtracking, where lattice points at time t are integrated
//! back to t = 0 and ρ(q, t) = |Ψ(q, t)|² · ρ₀(q₀)/|Ψ(q₀, 0)|² because
//! f = ρ/|Ψ|² is constant along trajectories.

use std::fmt;
use std::fmt::Write as _;
use std::num::NonZeroUsize;
use std::path::Path;

use gauss_quad::legendre::GaussLegendre;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{integrate_verified, IntegratorConfig};
use crate::ensemble::{GaussianSpec, Region, SnapshotSet};
use crate::error::{Error, Result};
use crate::wavefunction::WaveFunction;

/// Floor applied to ψ²̄ before division.
pub const DENSITY_FLOOR: f64 = 1e-300;
/// Box mass of m|Ψ|² below which coarse_psi2 fails.
pub const PSI2_MIN_MASS: f64 = 0.95;
/// Box mass below which coarse_psi2 logs a warning.
pub const PSI2_WARN_MASS: f64 = 0.99;

/// Uniform rows × cols grid over a region, with s quadrature nodes per cell side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseGrid {
    region: Region,
    rows: usize,
    cols: usize,
    subsamples: usize,
}

impl CoarseGrid {
    pub fn new(region: Region, rows: usize, cols: usize, subsamples: usize) -> Result<Self> {
        region.validate()?;
        if rows < 2 || cols < 2 {
            return Err(Error::Config(format!("grid must be at least 2×2, got {rows}×{cols}")));
        }
        if subsamples == 0 {
            return Err(Error::Config("subsamples must be positive".into()));
        }
        Ok(Self {
            region,
            rows,
            cols,
            subsamples,
        })
    }

    /// 16×16 cells over [−5, 5]², s = 8.
    pub fn standard() -> Self {
        Self {
            region: Region::DEFAULT,
            rows: 16,
            cols: 16,
            subsamples: 8,
        }
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn subsamples(&self) -> usize {
        self.subsamples
    }

    pub fn with_subsamples(&self, subsamples: usize) -> Result<Self> {
        Self::new(self.region, self.rows, self.cols, subsamples)
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Extent along x_a.
    pub fn cell_width(&self) -> f64 {
        self.region.width() / self.cols as f64
    }

    /// Extent along x_b.
    pub fn cell_height(&self) -> f64 {
        self.region.height() / self.rows as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_width() * self.cell_height()
    }

    /// Row-major index; rows run along x_b, columns along x_a.
    pub fn cell_index(&self, xa: f64, xb: f64) -> Option<usize> {
        if !self.region.contains(xa, xb) {
            return None;
        }
        let col = (((xa - self.region.a_min) / self.cell_width()) as usize).min(self.cols - 1);
        let row = (((xb - self.region.b_min) / self.cell_height()) as usize).min(self.rows - 1);
        Some(row * self.cols + col)
    }

    /// Lower-left corner (x_a, x_b) of a cell.
    pub fn cell_origin(&self, index: usize) -> (f64, f64) {
        let (row, col) = (index / self.cols, index % self.cols);
        (
            self.region.a_min + col as f64 * self.cell_width(),
            self.region.b_min + row as f64 * self.cell_height(),
        )
    }

    /// p×p midpoint lattice inside a cell.
    pub fn cell_lattice(&self, index: usize, p: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        let (a0, b0) = self.cell_origin(index);
        let (w, h) = (self.cell_width(), self.cell_height());
        (0..p * p).map(move |k| {
            let (i, j) = (k / p, k % p);
            (
                a0 + (j as f64 + 0.5) * w / p as f64,
                b0 + (i as f64 + 0.5) * h / p as f64,
            )
        })
    }
}

/// Per-cell values, row-major as in [`CoarseGrid::cell_index`].
#[derive(Debug, Clone, PartialEq)]
pub struct CellArray {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CellArray {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::CoarseGrain(format!(
                "{} values for a {rows}×{cols} array",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Σ value · cell area.
    pub fn mass(&self, cell_area: f64) -> f64 {
        self.values.iter().sum::<f64>() * cell_area
    }

    /// Rescales so that the mass is one.
    pub fn normalized(mut self, cell_area: f64) -> Result<Self> {
        let mass = self.mass(cell_area);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::CoarseGrain(format!("cannot normalise array of mass {mass}")));
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        Ok(self)
    }

    /// Averages 2×2 blocks (a density on a grid with cells twice as large).
    pub fn merge_2x2(&self) -> Result<Self> {
        if !self.rows.is_multiple_of(2) || !self.cols.is_multiple_of(2) {
            return Err(Error::CoarseGrain("2×2 merge needs even dimensions".into()));
        }
        let (rows, cols) = (self.rows / 2, self.cols / 2);
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                values[r * cols + c] = 0.25
                    * (self.get(2 * r, 2 * c)
                        + self.get(2 * r, 2 * c + 1)
                        + self.get(2 * r + 1, 2 * c)
                        + self.get(2 * r + 1, 2 * c + 1));
            }
        }
        Ok(Self { rows, cols, values })
    }

    /// Matrix rows (first line is the lowest x_b row), comma-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| self.get(r, c).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Histogram density with its in/out-of-box tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseDensity {
    pub cells: CellArray,
    pub in_box: usize,
    pub out_of_box: usize,
}

fn histogram(cells: impl Iterator<Item = Option<usize>>, grid: &CoarseGrid) -> Result<CoarseDensity> {
    let mut counts = vec![0usize; grid.cells()];
    let mut out_of_box = 0;
    for cell in cells {
        match cell {
            Some(i) => counts[i] += 1,
            None => out_of_box += 1,
        }
    }
    let in_box: usize = counts.iter().sum();
    if in_box == 0 {
        return Err(Error::CoarseGrain("no points inside the grid region".into()));
    }
    let scale = 1.0 / (in_box as f64 * grid.cell_area());
    let values = counts.iter().map(|&c| c as f64 * scale).collect();
    Ok(CoarseDensity {
        cells: CellArray::new(grid.rows, grid.cols, values)?,
        in_box,
        out_of_box,
    })
}

/// ρ̄: counts / (in-box count × cell area).
pub fn coarse_rho(positions: &[(f64, f64)], grid: &CoarseGrid) -> Result<CoarseDensity> {
    histogram(positions.iter().map(|&(a, b)| grid.cell_index(a, b)), grid)
}

/// ψ²̄ with the default mass thresholds; see [`coarse_psi2_with`].
pub fn coarse_psi2(wf: &WaveFunction, t: f64, grid: &CoarseGrid) -> Result<CellArray> {
    coarse_psi2_with(wf, t, grid, PSI2_MIN_MASS).map(|(cells, _)| cells)
}

/// Cell means of m|Ψ|² by an s×s-point Gauss–Legendre product rule,
/// renormalised over the box. Also returns the raw box mass before
/// renormalisation.
pub fn coarse_psi2_with(
    wf: &WaveFunction,
    t: f64,
    grid: &CoarseGrid,
    min_mass: f64,
) -> Result<(CellArray, f64)> {
    let (cells, mass) = psi2_quiet(wf, t, grid, min_mass)?;
    if mass < PSI2_WARN_MASS {
        log::warn!("|Ψ|² mass inside the box is {mass:.4} at t={t}");
    }
    Ok((cells, mass))
}

fn psi2_quiet(wf: &WaveFunction, t: f64, grid: &CoarseGrid, min_mass: f64) -> Result<(CellArray, f64)> {
    let rule = GaussLegendre::new(NonZeroUsize::new(grid.subsamples).expect("validated"));
    // Nodes mapped to [0, 1], weights summing to one.
    let unit: Vec<(f64, f64)> = rule
        .as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w))
        .collect();
    let (w, h) = (grid.cell_width(), grid.cell_height());
    let values: Vec<f64> = (0..grid.cells())
        .map(|i| {
            let (a0, b0) = grid.cell_origin(i);
            let mut sum = 0.0;
            for &(u, wu) in &unit {
                for &(v, wv) in &unit {
                    sum += wu * wv * wf.density_original(a0 + u * w, b0 + v * h, t);
                }
            }
            sum
        })
        .collect();
    let cells = CellArray::new(grid.rows, grid.cols, values)?;
    let mass = cells.mass(grid.cell_area());
    if !(mass >= min_mass) {
        return Err(Error::CoarseGrain(format!(
            "|Ψ|² mass inside the box is {mass:.4} at t={t}, below {min_mass}"
        )));
    }
    Ok((cells.normalized(grid.cell_area())?, mass))
}

/// ψ²̄ at a list of times.
#[derive(Debug, Clone, PartialEq)]
pub struct Psi2Table {
    pub times: Vec<f64>,
    pub cells: Vec<CellArray>,
    /// Box mass of m|Ψ|² before renormalisation.
    pub raw_mass: Vec<f64>,
}

impl Psi2Table {
    fn check_times(&self, times: &[f64]) -> Result<()> {
        if self.times == times {
            Ok(())
        } else {
            Err(Error::CoarseGrain("ψ²̄ table times do not match the data".into()))
        }
    }
}

pub fn psi2_table(wf: &WaveFunction, times: &[f64], grid: &CoarseGrid, min_mass: f64) -> Result<Psi2Table> {
    let pairs: Vec<(CellArray, f64)> = times
        .par_iter()
        .map(|&t| psi2_quiet(wf, t, grid, min_mass))
        .collect::<Result<_>>()?;
    let (cells, raw_mass): (Vec<_>, Vec<f64>) = pairs.into_iter().unzip();
    let low = raw_mass.iter().filter(|&&m| m < PSI2_WARN_MASS).count();
    if low > 0 {
        let least = raw_mass.iter().copied().fold(f64::INFINITY, f64::min);
        log::warn!(
            "|Ψ|² mass inside the box is below {PSI2_WARN_MASS} at {low} of {} times (lowest {least:.4})",
            times.len()
        );
    }
    Ok(Psi2Table {
        times: times.to_vec(),
        cells,
        raw_mass,
    })
}

/// H̄ together with the number of cells where ψ²̄ hit the floor while ρ̄ > 0.
pub fn h_function_counted(rho: &CellArray, psi2: &CellArray, grid: &CoarseGrid) -> Result<(f64, usize)> {
    if rho.values.len() != grid.cells() || psi2.values.len() != grid.cells() {
        return Err(Error::CoarseGrain("cell arrays do not match the grid".into()));
    }
    let mut total = 0.0;
    let mut floored = 0;
    for (&r, &p) in rho.values.iter().zip(&psi2.values) {
        if !(r.is_finite() && p.is_finite()) || r < 0.0 || p < 0.0 {
            return Err(Error::CoarseGrain(format!("invalid cell values ρ̄={r}, ψ²̄={p}")));
        }
        if r == 0.0 {
            continue;
        }
        if p < DENSITY_FLOOR {
            floored += 1;
        }
        total += r * (r / p.max(DENSITY_FLOOR)).ln();
    }
    Ok((total * grid.cell_area(), floored))
}

/// Σ ρ̄ ln(ρ̄/ψ²̄) · cell area, with 0 ln 0 = 0.
pub fn h_function(rho: &CellArray, psi2: &CellArray, grid: &CoarseGrid) -> Result<f64> {
    h_function_counted(rho, psi2, grid).map(|(h, _)| h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ftm,
    Backtracking,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ftm => "FTM",
            Method::Backtracking => "backtracking",
        })
    }
}

/// H̄(t) with per-time diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct HSeries {
    pub method: Method,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub empty_cells: Vec<usize>,
    /// FTM: fraction of trajectories outside the box. Backtracking: fraction of
    /// lattice points whose t = 0 origin lies outside the box.
    pub oob_fraction: Vec<f64>,
    /// Cells where ρ̄ > 0 but ψ²̄ was below the floor.
    pub floored_cells: Vec<usize>,
}

impl HSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn csv_rows(&self, out: &mut String) {
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.times[i], self.values[i], self.method, self.empty_cells[i], self.oob_fraction[i]
            );
        }
    }
}

pub const H_SERIES_HEADER: &str = "time,H,method,empty_cells,oob_frac";

/// `time,H,method,empty_cells,oob_frac` for one or more series.
pub fn h_series_csv(series: &[&HSeries]) -> String {
    let mut out = format!("{H_SERIES_HEADER}\n");
    for s in series {
        s.csv_rows(&mut out);
    }
    out
}

pub fn write_h_series(path: &Path, series: &[&HSeries]) -> Result<()> {
    std::fs::write(path, h_series_csv(series)).map_err(|e| Error::io(path, e))
}

/// Forward Trajectories Method: histogram each snapshot against ψ²̄(t).
pub fn h_series_ftm(snapshots: &SnapshotSet, wf: &WaveFunction, grid: &CoarseGrid) -> Result<HSeries> {
    let table = psi2_table(wf, &snapshots.times, grid, PSI2_MIN_MASS)?;
    h_series_ftm_table(snapshots, &table, grid)
}

pub fn h_series_ftm_table(snapshots: &SnapshotSet, psi2: &Psi2Table, grid: &CoarseGrid) -> Result<HSeries> {
    psi2.check_times(&snapshots.times)?;
    let mut series = HSeries {
        method: Method::Ftm,
        times: Vec::new(),
        values: Vec::new(),
        empty_cells: Vec::new(),
        oob_fraction: Vec::new(),
        floored_cells: Vec::new(),
    };
    for (i, &t) in snapshots.times.iter().enumerate() {
        let positions = &snapshots.positions[i];
        let rho = coarse_rho(positions, grid)?;
        let (h, floored) = h_function_counted(&rho.cells, &psi2.cells[i], grid)?;
        series.times.push(t);
        series.values.push(h);
        series.empty_cells.push(rho.cells.values.iter().filter(|&&v| v == 0.0).count());
        series.oob_fraction.push(rho.out_of_box as f64 / positions.len() as f64);
        series.floored_cells.push(floored);
    }
    Ok(series)
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Bootstrap standard error of each FTM value: trajectories are resampled with
/// replacement (the same draw at every time).
pub fn bootstrap_ftm(
    snapshots: &SnapshotSet,
    psi2: &Psi2Table,
    grid: &CoarseGrid,
    replicates: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    psi2.check_times(&snapshots.times)?;
    if replicates < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    let n = snapshots.ids.len();
    if n == 0 {
        return Err(Error::CoarseGrain("empty snapshot set".into()));
    }
    let cells: Vec<Vec<Option<usize>>> = snapshots
        .positions
        .iter()
        .map(|ps| ps.iter().map(|&(a, b)| grid.cell_index(a, b)).collect())
        .collect();
    let draws: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            cells
                .iter()
                .zip(&psi2.cells)
                .map(|(c, p)| {
                    let rho = histogram(picks.iter().map(|&k| c[k]), grid)?;
                    h_function(&rho.cells, p, grid)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..snapshots.times.len())
        .map(|i| std_dev(&draws.iter().map(|d| d[i]).collect::<Vec<_>>()))
        .collect())
}

/// Upper `quantile` of H̄ for n points drawn exactly from ψ²̄ (a parametric
/// bootstrap of the equilibrium null, where the true coarse H̄ is zero).
pub fn equilibrium_null_quantile(
    psi2: &CellArray,
    grid: &CoarseGrid,
    n: usize,
    replicates: usize,
    quantile: f64,
    seed: u64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&quantile) || replicates == 0 || n == 0 {
        return Err(Error::Config("invalid null-band parameters".into()));
    }
    let dist = WeightedIndex::new(psi2.values.iter().copied())
        .map_err(|e| Error::CoarseGrain(e.to_string()))?;
    let mut hs: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let rho = histogram((0..n).map(|_| Some(dist.sample(&mut rng))), grid)?;
            h_function(&rho.cells, psi2, grid)
        })
        .collect::<Result<_>>()?;
    hs.sort_by(f64::total_cmp);
    let k = ((quantile * replicates as f64).ceil() as usize).clamp(1, replicates) - 1;
    Ok(hs[k])
}

/// Initial density ρ₀ in original coordinates, for backtracking.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialDensity {
    /// Gaussian restricted to a region and renormalised there.
    TruncatedGaussian {
        gaussian: GaussianSpec,
        region: Region,
        mass: f64,
    },
    /// m|Ψ(·, 0)|².
    Equilibrium,
}

impl InitialDensity {
    pub fn truncated_gaussian(gaussian: GaussianSpec, region: Region) -> Result<Self> {
        gaussian.validate()?;
        region.validate()?;
        let mass = gaussian.mass_in(&region);
        if !(mass > 0.0) {
            return Err(Error::Domain("Gaussian has no mass in the region".into()));
        }
        Ok(Self::TruncatedGaussian {
            gaussian,
            region,
            mass,
        })
    }

    pub fn density(&self, wf: &WaveFunction, xa: f64, xb: f64) -> f64 {
        match self {
            Self::TruncatedGaussian {
                gaussian,
                region,
                mass,
            } => {
                if region.contains(xa, xb) {
                    gaussian.pdf(xa, xb) / mass
                } else {
                    0.0
                }
            }
            Self::Equilibrium => wf.density_original(xa, xb, 0.0),
        }
    }

    fn inside(&self, xa: f64, xb: f64) -> bool {
        match self {
            Self::TruncatedGaussian { region, .. } => region.contains(xa, xb),
            Self::Equilibrium => true,
        }
    }
}

/// ρ values at the lattice points of every cell at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktrackSnapshot {
    pub t: f64,
    /// Accepted point values per cell.
    pub cell_values: Vec<Vec<f64>>,
    pub rejected: usize,
    /// Accepted points whose origin lies outside the support of ρ₀'s box.
    pub outside_origin: usize,
}

/// Integrates the p×p lattice of every cell from `t` back to 0 through the
/// (reversed) record times in `path`, which must run from t down to 0.
pub fn backtrack_cells(
    wf: &WaveFunction,
    rho0: &InitialDensity,
    grid: &CoarseGrid,
    path: &[f64],
    cfg: &IntegratorConfig,
    points_per_cell: usize,
) -> Result<BacktrackSnapshot> {
    let p = (points_per_cell as f64).sqrt().round() as usize;
    if p == 0 || p * p != points_per_cell {
        return Err(Error::Config(format!(
            "points_per_cell must be a positive square, got {points_per_cell}"
        )));
    }
    let (&t, &end) = match (path.first(), path.last()) {
        (Some(t), Some(end)) => (t, end),
        _ => return Err(Error::Config("empty backtracking path".into())),
    };
    if end != 0.0 {
        return Err(Error::Config("backtracking path must end at t = 0".into()));
    }
    let points: Vec<(usize, (f64, f64))> = (0..grid.cells())
        .flat_map(|i| grid.cell_lattice(i, p).map(move |q| (i, q)))
        .collect();
    let values: Vec<Option<(f64, bool)>> = if path.len() == 1 {
        points
            .iter()
            .map(|&(_, (a, b))| Some((rho0.density(wf, a, b), rho0.inside(a, b))))
            .collect()
    } else {
        let back = cfg.with_times(path.to_vec());
        points
            .par_iter()
            .map(|&(_, (a, b))| -> Result<Option<(f64, bool)>> {
                let tr = integrate_verified(wf, (a, b), &back)?;
                if !tr.verdict.is_accepted() {
                    return Ok(None);
                }
                let last = tr.samples[tr.samples.len() - 1];
                let (a0, b0) = wf.model().from_normal(last.x1, last.x2);
                let born0 = wf.density_original(a0, b0, 0.0);
                if !(born0 >= DENSITY_FLOOR) {
                    return Ok(None);
                }
                let rho = wf.density_original(a, b, t) * rho0.density(wf, a0, b0) / born0;
                Ok(Some((rho, rho0.inside(a0, b0))))
            })
            .collect::<Result<_>>()?
    };
    let mut cell_values = vec![Vec::with_capacity(points_per_cell); grid.cells()];
    let mut rejected = 0;
    let mut outside_origin = 0;
    for (&(cell, _), v) in points.iter().zip(values) {
        match v {
            Some((rho, inside)) => {
                cell_values[cell].push(rho);
                if !inside {
                    outside_origin += 1;
                }
            }
            None => rejected += 1,
        }
    }
    if let Some(i) = cell_values.iter().position(|v| v.is_empty()) {
        return Err(Error::CoarseGrain(format!(
            "cell {i} lost all backtracked points at t={t}"
        )));
    }
    Ok(BacktrackSnapshot {
        t,
        cell_values,
        rejected,
        outside_origin,
    })
}

/// Backtracking snapshots for every time; each one retraces the earlier record times.
pub fn backtrack_snapshots(
    wf: &WaveFunction,
    rho0: &InitialDensity,
    grid: &CoarseGrid,
    times: &[f64],
    cfg: &IntegratorConfig,
    points_per_cell: usize,
) -> Result<Vec<BacktrackSnapshot>> {
    if times.first() != Some(&0.0) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("times must increase from 0".into()));
    }
    (0..times.len())
        .map(|i| {
            let path: Vec<f64> = times[..=i].iter().rev().copied().collect();
            backtrack_cells(wf, rho0, grid, &path, cfg, points_per_cell)
        })
        .collect()
}

fn backtrack_rho(values: impl Iterator<Item = f64>, grid: &CoarseGrid) -> Result<CellArray> {
    CellArray::new(grid.rows, grid.cols, values.collect())?.normalized(grid.cell_area())
}

/// H̄(t) from backtracking snapshots.
pub fn backtrack_series(
    snapshots: &[BacktrackSnapshot],
    psi2: &Psi2Table,
    grid: &CoarseGrid,
) -> Result<HSeries> {
    psi2.check_times(&snapshots.iter().map(|s| s.t).collect::<Vec<_>>())?;
    let mut series = HSeries {
        method: Method::Backtracking,
        times: Vec::new(),
        values: Vec::new(),
        empty_cells: Vec::new(),
        oob_fraction: Vec::new(),
        floored_cells: Vec::new(),
    };
    for (snap, psi2) in snapshots.iter().zip(&psi2.cells) {
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let rho = backtrack_rho(snap.cell_values.iter().map(mean), grid)?;
        let (h, floored) = h_function_counted(&rho, psi2, grid)?;
        let accepted: usize = snap.cell_values.iter().map(Vec::len).sum();
        series.times.push(snap.t);
        series.values.push(h);
        series.empty_cells.push(rho.values.iter().filter(|&&v| v == 0.0).count());
        series.oob_fraction.push(snap.outside_origin as f64 / accepted as f64);
        series.floored_cells.push(floored);
    }
    Ok(series)
}

/// Backtracking H̄(t) at each of `times` (increasing from 0).
pub fn h_series_backtracking(
    wf: &WaveFunction,
    rho0: &InitialDensity,
    grid: &CoarseGrid,
    times: &[f64],
    cfg: &IntegratorConfig,
    points_per_cell: usize,
) -> Result<HSeries> {
    let snaps = backtrack_snapshots(wf, rho0, grid, times, cfg, points_per_cell)?;
    backtrack_series(&snaps, &psi2_table(wf, times, grid, PSI2_MIN_MASS)?, grid)
}

/// Bootstrap standard error of backtracking values: points are resampled with
/// replacement within each cell.
pub fn bootstrap_backtracking(
    snapshots: &[BacktrackSnapshot],
    psi2: &Psi2Table,
    grid: &CoarseGrid,
    replicates: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if replicates < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    psi2.check_times(&snapshots.iter().map(|s| s.t).collect::<Vec<_>>())?;
    snapshots
        .iter()
        .zip(&psi2.cells)
        .map(|(snap, psi2)| {
            let hs: Vec<f64> = (0..replicates)
                .into_par_iter()
                .map(|r| {
                    let mut rng = replicate_rng(seed, r);
                    let means = snap.cell_values.iter().map(|v| {
                        (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).sum::<f64>() / v.len() as f64
                    });
                    let rho = CellArray::new(grid.rows, grid.cols, means.collect())?
                        .normalized(grid.cell_area())?;
                    h_function(&rho, psi2, grid)
                })
                .collect::<Result<_>>()?;
            Ok(std_dev(&hs))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{evolve_points, sample_equilibrium, sample_initial, EnsembleSpec};
    use crate::wavefunction::{ModeSet, OscillatorModel};
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn uniform(grid: &CoarseGrid) -> CellArray {
        let v = 1.0 / grid.region().area();
        CellArray::new(grid.rows(), grid.cols(), vec![v; grid.cells()]).unwrap()
    }

    fn ground_state(k: f64) -> WaveFunction {
        let model = OscillatorModel::new(1.0, 1.0, k).unwrap();
        WaveFunction::new(model, ModeSet::new(vec![(0, 0)], vec![0.0], 0, 0).unwrap()).unwrap()
    }

    #[test]
    fn grid_geometry() {
        let g = CoarseGrid::standard();
        assert_eq!(g.cells(), 256);
        assert!((g.cell_area() - 100.0 / 256.0).abs() < 1e-15);
        assert_eq!(g.cell_index(-5.0, -5.0), Some(0));
        assert_eq!(g.cell_index(4.999, -5.0), Some(15));
        assert_eq!(g.cell_index(-5.0, 4.999), Some(240));
        assert_eq!(g.cell_index(5.0, 0.0), None);
        assert_eq!(g.cell_origin(17), (-5.0 + 0.625, -5.0 + 0.625));
        assert!(CoarseGrid::new(Region::DEFAULT, 1, 16, 8).is_err());
        assert!(CoarseGrid::new(Region::DEFAULT, 16, 16, 0).is_err());
    }

    #[test]
    fn point_mass_histogram() {
        let g = CoarseGrid::standard();
        let pts = vec![(0.1, 0.2); 37];
        let rho = coarse_rho(&pts, &g).unwrap();
        let cell = g.cell_index(0.1, 0.2).unwrap();
        for (i, &v) in rho.cells.values().iter().enumerate() {
            let expected = if i == cell { 1.0 / g.cell_area() } else { 0.0 };
            assert_eq!(v, expected);
        }
        assert!(coarse_rho(&[(9.0, 9.0)], &g).is_err());
    }

    #[test]
    fn histogram_normalisation_and_out_of_box() {
        let g = CoarseGrid::standard();
        let pts = sample_initial(&EnsembleSpec::new(3000, 1)).unwrap();
        let mut with_outliers = pts.clone();
        with_outliers.push((7.0, 0.0));
        with_outliers.push((0.0, -5.5));
        let rho = coarse_rho(&with_outliers, &g).unwrap();
        assert_eq!(rho.in_box, 3000);
        assert_eq!(rho.out_of_box, 2);
        assert!((rho.cells.mass(g.cell_area()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_points_fill_cells_evenly() {
        let g = CoarseGrid::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<(f64, f64)> = (0..256 * 400)
            .map(|_| (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let rho = coarse_rho(&pts, &g).unwrap();
        let target = 1.0 / 100.0;
        for &v in rho.cells.values() {
            assert!(((v - target) / target).abs() < 5.0 / 400f64.sqrt());
        }
    }

    #[test]
    fn ground_state_psi2() {
        let g = CoarseGrid::standard();
        let wf = ground_state(0.0);
        let psi2 = coarse_psi2(&wf, 0.0, &g).unwrap();
        assert!((psi2.mass(g.cell_area()) - 1.0).abs() < 1e-12);
        let centre = psi2.get(7, 7).max(psi2.get(8, 8));
        let max = psi2.values().iter().cloned().fold(0.0, f64::max);
        assert_eq!(centre, max);
        for (r, c) in [(0, 0), (0, 15), (15, 0), (15, 15)] {
            assert!(psi2.get(r, c) < 1e-9 * max);
        }
    }

    // Cell means by a plain s×s midpoint rule, as an independent reference.
    fn midpoint_psi2(wf: &WaveFunction, t: f64, g: &CoarseGrid, s: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..g.cells())
            .map(|i| g.cell_lattice(i, s).map(|(a, b)| wf.density_original(a, b, t)).sum::<f64>() / (s * s) as f64)
            .collect();
        let mass = raw.iter().sum::<f64>() * g.cell_area();
        raw.iter().map(|v| v / mass).collect()
    }

    #[test]
    fn psi2_quadrature_matches_refined_reference() {
        let g = CoarseGrid::standard();
        let model = OscillatorModel::new(1.0, 1.0, 1.8).unwrap();
        let t = 5.0 * PI;
        for seed in [5, 11, 23] {
            let wf = WaveFunction::new(model, ModeSet::sample(12, 6, seed).unwrap()).unwrap();
            // Strong coupling spreads |Ψ|² past the box, so no mass threshold here.
            let (coarse, _) = coarse_psi2_with(&wf, t, &g, 0.0).unwrap();
            let fine = midpoint_psi2(&wf, t, &g, 128);
            for (a, b) in coarse.values().iter().zip(&fine) {
                assert!((a - b).abs() <= 1e-3 * b, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn small_box_is_rejected() {
        let region = Region::new(-1.0, 1.0, -1.0, 1.0).unwrap();
        let g = CoarseGrid::new(region, 4, 4, 8).unwrap();
        assert!(matches!(coarse_psi2(&ground_state(0.0), 0.0, &g), Err(Error::CoarseGrain(_))));
    }

    #[test]
    fn h_function_examples() {
        let g = CoarseGrid::standard();
        let u = uniform(&g);
        assert_eq!(h_function(&u, &u, &g).unwrap(), 0.0);
        let rho = coarse_rho(&[(0.0, 0.0)], &g).unwrap().cells;
        let h = h_function(&rho, &u, &g).unwrap();
        assert!((h - 256f64.ln()).abs() < 1e-12, "{h}");
        assert!((h - 5.545177444479562).abs() < 1e-12);
    }

    #[test]
    fn floor_keeps_h_finite() {
        let g = CoarseGrid::standard();
        let rho = uniform(&g);
        let mut vals = vec![1.0 / (g.cell_area() * 255.0); 256];
        vals[0] = 0.0;
        let psi2 = CellArray::new(16, 16, vals).unwrap();
        let (h, floored) = h_function_counted(&rho, &psi2, &g).unwrap();
        assert!(h.is_finite());
        assert_eq!(floored, 1);
        let bad = CellArray::new(16, 16, vec![f64::NAN; 256]).unwrap();
        assert!(h_function(&bad, &psi2, &g).is_err());
    }

    fn normalized_array(raw: Vec<f64>, g: &CoarseGrid) -> CellArray {
        CellArray::new(g.rows(), g.cols(), raw).unwrap().normalized(g.cell_area()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn h_is_non_negative(
            rho in prop::collection::vec(0.0f64..1.0, 256),
            psi in prop::collection::vec(1e-6f64..1.0, 256),
        ) {
            let g = CoarseGrid::standard();
            prop_assume!(rho.iter().sum::<f64>() > 0.0);
            let h = h_function(&normalized_array(rho, &g), &normalized_array(psi, &g), &g).unwrap();
            prop_assert!(h >= -1e-12);
        }

        #[test]
        fn merging_cells_never_increases_h(
            rho in prop::collection::vec(0.0f64..1.0, 256),
            psi in prop::collection::vec(1e-6f64..1.0, 256),
        ) {
            let g = CoarseGrid::standard();
            prop_assume!(rho.iter().sum::<f64>() > 0.0);
            let (r, p) = (normalized_array(rho, &g), normalized_array(psi, &g));
            let coarse = CoarseGrid::new(Region::DEFAULT, 8, 8, 8).unwrap();
            let fine_h = h_function(&r, &p, &g).unwrap();
            let coarse_h = h_function(&r.merge_2x2().unwrap(), &p.merge_2x2().unwrap(), &coarse).unwrap();
            prop_assert!(coarse_h <= fine_h + 1e-12 * fine_h.abs().max(1.0));
        }
    }

    #[test]
    fn merge_preserves_mass() {
        let g = CoarseGrid::standard();
        let coarse = CoarseGrid::new(Region::DEFAULT, 8, 8, 8).unwrap();
        let arr = normalized_array((0..256).map(|i| (i % 7) as f64 + 0.5).collect(), &g);
        let merged = arr.merge_2x2().unwrap();
        assert!((merged.mass(coarse.cell_area()) - 1.0).abs() < 1e-12);
        assert!(CellArray::new(3, 2, vec![0.0; 6]).unwrap().merge_2x2().is_err());
    }

    #[test]
    fn cell_array_csv_is_a_matrix() {
        let arr = CellArray::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        assert_eq!(arr.to_csv(), "1,2,3\n4,5,6.5\n");
    }

    #[test]
    fn backtracking_at_zero_reproduces_initial_density() {
        let g = CoarseGrid::new(Region::DEFAULT, 4, 4, 8).unwrap();
        let wf = ground_state(0.3);
        let rho0 = InitialDensity::truncated_gaussian(GaussianSpec::default(), Region::DEFAULT).unwrap();
        let snap = backtrack_cells(&wf, &rho0, &g, &[0.0], &IntegratorConfig::new(vec![0.0]), 4).unwrap();
        assert_eq!(snap.rejected, 0);
        for (i, vals) in snap.cell_values.iter().enumerate() {
            let expected: Vec<f64> = g.cell_lattice(i, 2).map(|(a, b)| rho0.density(&wf, a, b)).collect();
            assert_eq!(vals, &expected);
        }
        assert!(backtrack_cells(&wf, &rho0, &g, &[0.0], &IntegratorConfig::new(vec![0.0]), 3).is_err());
    }

    #[test]
    fn backtracking_equilibrium_stays_at_zero() {
        let g = CoarseGrid::standard();
        let model = OscillatorModel::new(1.0, 1.0, 0.5).unwrap();
        let wf = WaveFunction::new(model, ModeSet::sample(4, 3, 2).unwrap()).unwrap();
        let times = [0.0, 0.5, 1.0];
        let cfg = IntegratorConfig::new(times.to_vec());
        let series = h_series_backtracking(&wf, &InitialDensity::Equilibrium, &g, &times, &cfg, 4).unwrap();
        for &h in &series.values {
            // f ≡ 1, so ρ̄ and ψ²̄ differ only by quadrature (4 vs 64 points per cell).
            assert!(h.abs() < 2e-3, "{h}");
        }
    }

    #[test]
    fn ftm_and_null_band_for_equilibrium_ensemble() {
        let g = CoarseGrid::standard();
        let model = OscillatorModel::new(1.0, 1.0, 0.5).unwrap();
        let wf = WaveFunction::new(model, ModeSet::sample(4, 3, 2).unwrap()).unwrap();
        let pts = sample_equilibrium(&wf, 0.0, &Region::DEFAULT, 4000, 7).unwrap();
        let cfg = IntegratorConfig::new(vec![0.0, 1.0]);
        let snap = evolve_points(&pts, &wf, &cfg, &Region::DEFAULT, 0.01).unwrap();
        let series = h_series_ftm(&snap, &wf, &g).unwrap();
        let band = equilibrium_null_quantile(&coarse_psi2(&wf, 0.0, &g).unwrap(), &g, 4000, 200, 0.99, 3).unwrap();
        // The null H̄ concentrates near (cells − 1)/(2N) ≈ 0.03.
        assert!(band > 0.01 && band < 0.1, "{band}");
        for &h in &series.values {
            assert!(h >= 0.0 && h < band, "{h} vs {band}");
        }
        let table = psi2_table(&wf, &snap.times, &g, PSI2_MIN_MASS).unwrap();
        let se = bootstrap_ftm(&snap, &table, &g, 50, 1).unwrap();
        assert!(se.iter().all(|&s| s > 0.0 && s < 0.05));
        assert_eq!(se, bootstrap_ftm(&snap, &table, &g, 50, 1).unwrap());
    }

    #[test]
    fn csv_layout() {
        let s = HSeries {
            method: Method::Backtracking,
            times: vec![0.0, 0.5],
            values: vec![1.25, 0.5],
            empty_cells: vec![3, 0],
            oob_fraction: vec![0.0, 0.125],
            floored_cells: vec![0, 0],
        };
        assert_eq!(
            h_series_csv(&[&s]),
            "time,H,method,empty_cells,oob_frac\n0,1.25,backtracking,3,0\n0.5,0.5,backtracking,0,0.125\n"
        );
    }
}
