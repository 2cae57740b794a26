//! Trajectory-level diagnostics: neighbour-spread tests and full traces.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dynamics::{default_record_times, integrate_verified, IntegratorConfig, Trajectory};
use crate::ensemble::Region;
use crate::error::{Error, Result};
use crate::metrics::CoarseGrid;
use crate::wavefunction::WaveFunction;

/// Initial positions for the spread and trace tests.
pub const TRACE_CENTERS: [(f64, f64); 5] = [
    (2.39, -1.94),
    (1.27, 3.76),
    (2.21, -0.01),
    (-0.89, 2.04),
    (-2.30, -0.76),
];

pub const DEFAULT_HALF_WIDTH: f64 = 0.05;
pub const DEFAULT_DURATION: f64 = 10.0 * PI;
/// Verification interval for spread tests.
pub const SPREAD_INTERVAL: f64 = PI / 4.0;
/// Output spacing for traces.
pub const TRACE_INTERVAL: f64 = PI / 40.0;

/// 5×5 lattice spanning [c − h, c + h] on both axes.
pub fn neighbour_lattice(center: (f64, f64), h: f64) -> Vec<(f64, f64)> {
    let offsets = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut out = Vec::with_capacity(25);
    for &db in &offsets {
        for &da in &offsets {
            out.push((center.0 + da * h, center.1 + db * h));
        }
    }
    out
}

/// (a_min, a_max, b_min, b_max) of a point set.
pub fn bounding_box(points: &[(f64, f64)]) -> Option<(f64, f64, f64, f64)> {
    let first = points.first()?;
    Some(points.iter().fold((first.0, first.0, first.1, first.1), |b, p| {
        (b.0.min(p.0), b.1.max(p.0), b.2.min(p.1), b.3.max(p.1))
    }))
}

/// 1 − area(bounding box ∩ region)/area(region); NaN for an empty set.
pub fn confinement_score(points: &[(f64, f64)], region: &Region) -> f64 {
    let Some((a0, a1, b0, b1)) = bounding_box(points) else {
        return f64::NAN;
    };
    let wa = (a1.min(region.a_max) - a0.max(region.a_min)).max(0.0);
    let wb = (b1.min(region.b_max) - b0.max(region.b_min)).max(0.0);
    1.0 - wa * wb / region.area()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpreadSet {
    pub center: (f64, f64),
    pub initial: Vec<(f64, f64)>,
    /// Final positions; None for rejected members.
    pub finals: Vec<Option<(f64, f64)>>,
    pub score: f64,
}

impl SpreadSet {
    pub fn accepted_finals(&self) -> Vec<(f64, f64)> {
        self.finals.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpreadTest {
    pub sets: Vec<SpreadSet>,
    pub t_end: f64,
    pub region: Region,
    pub rejected: usize,
}

impl SpreadTest {
    /// Mean score over sets with at least one accepted member.
    pub fn mean_score(&self) -> f64 {
        let scores: Vec<f64> = self.sets.iter().map(|s| s.score).filter(|s| !s.is_nan()).collect();
        scores.iter().sum::<f64>() / scores.len() as f64
    }

    /// `set,member,x_a0,x_b0,x_a,x_b,accepted,score`; rejected rows leave the
    /// final position empty.
    pub fn csv(&self) -> String {
        let mut out = String::from("set,member,x_a0,x_b0,x_a,x_b,accepted,score\n");
        for (i, set) in self.sets.iter().enumerate() {
            for (j, (start, end)) in set.initial.iter().zip(&set.finals).enumerate() {
                let (fa, fb, ok) = match end {
                    Some((a, b)) => (a.to_string(), b.to_string(), true),
                    None => (String::new(), String::new(), false),
                };
                let _ = writeln!(
                    out,
                    "{i},{j},{},{},{fa},{fb},{ok},{}",
                    start.0, start.1, set.score
                );
            }
        }
        out
    }
}

fn final_position(wf: &WaveFunction, tr: &Trajectory) -> Option<(f64, f64)> {
    if !tr.verdict.is_accepted() {
        return None;
    }
    let last = tr.samples.last()?;
    Some(wf.model().from_normal(last.x1, last.x2))
}

/// Evolves a 5×5 neighbour lattice around each center to `t_end` and scores
/// how far each set spreads. Tolerances come from `cfg`; its record times are
/// replaced by a grid of step [`SPREAD_INTERVAL`].
pub fn spread_test(
    wf: &WaveFunction,
    cfg: &IntegratorConfig,
    centers: &[(f64, f64)],
    h: f64,
    t_end: f64,
    region: &Region,
) -> Result<SpreadTest> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("half-width must be positive, got {h}")));
    }
    let run_cfg = cfg.with_times(default_record_times(t_end, SPREAD_INTERVAL.min(t_end))?);
    let lattices: Vec<Vec<(f64, f64)>> = centers.iter().map(|&c| neighbour_lattice(c, h)).collect();
    let starts: Vec<(f64, f64)> = lattices.iter().flatten().copied().collect();
    let finals: Vec<Option<(f64, f64)>> = starts
        .par_iter()
        .map(|&s| integrate_verified(wf, s, &run_cfg).map(|tr| final_position(wf, &tr)))
        .collect::<Result<_>>()?;
    let rejected = finals.iter().filter(|f| f.is_none()).count();
    let sets = centers
        .iter()
        .zip(lattices)
        .zip(finals.chunks(25))
        .map(|((&center, initial), fin)| {
            let accepted: Vec<(f64, f64)> = fin.iter().flatten().copied().collect();
            SpreadSet {
                center,
                initial,
                finals: fin.to_vec(),
                score: confinement_score(&accepted, region),
            }
        })
        .collect();
    Ok(SpreadTest {
        sets,
        t_end,
        region: *region,
        rejected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub trajectory: Trajectory,
    /// Polyline length in (x_a, x_b).
    pub path_length: f64,
    /// Distinct grid cells touched by the samples.
    pub visited_cells: usize,
}

/// Densely sampled trajectories from each start over [0, t_end].
pub fn trace_trajectories(
    wf: &WaveFunction,
    cfg: &IntegratorConfig,
    starts: &[(f64, f64)],
    t_end: f64,
    grid: &CoarseGrid,
) -> Result<Vec<Trace>> {
    let run_cfg = cfg.with_times(default_record_times(t_end, TRACE_INTERVAL.min(t_end))?);
    starts
        .par_iter()
        .map(|&s| {
            let trajectory = integrate_verified(wf, s, &run_cfg)?;
            let path: Vec<(f64, f64)> = trajectory
                .original_samples(wf)
                .into_iter()
                .map(|(_, a, b)| (a, b))
                .collect();
            let path_length = path
                .windows(2)
                .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
                .sum();
            let visited_cells = path
                .iter()
                .filter_map(|&(a, b)| grid.cell_index(a, b))
                .collect::<HashSet<_>>()
                .len();
            Ok(Trace {
                trajectory,
                path_length,
                visited_cells,
            })
        })
        .collect()
}

/// `trace,t,x_a,x_b` rows.
pub fn traces_csv(wf: &WaveFunction, traces: &[Trace]) -> String {
    let mut out = String::from("trace,t,x_a,x_b\n");
    for (i, tr) in traces.iter().enumerate() {
        for (t, a, b) in tr.trajectory.original_samples(wf) {
            let _ = writeln!(out, "{i},{t},{a},{b}");
        }
    }
    out
}
