//! Guidance velocities and verified trajectory integration.
//!
//! Each trajectory is integrated twice, at tolerance τ and τ/10. If the final
//! positions disagree by more than δ in either normal coordinate, the pair is
//! repeated one decade tighter; once the tighter tolerance would pass below the
//! floor the trajectory is rejected and left out of every density.

use crate::error::{Error, Result};
use crate::ode::{self, SolveFailure, StepControl};
use crate::wavefunction::WaveFunction;

/// |Ψ|² (envelope removed) below which the velocity is treated as singular.
pub const NODE_FLOOR: f64 = 1e-300;

/// (v₁, v₂) = (Im ∂₁Ψ/Ψ, Im ∂₂Ψ/Ψ) in normal coordinates.
///
/// Evaluated as Im(∂Ψ·Ψ*)/|Ψ|² on the envelope-free amplitude; the Gaussian
/// envelope is real and drops out of the phase gradient.
pub fn velocity(wf: &WaveFunction, x1: f64, x2: f64, t: f64) -> Result<(f64, f64)> {
    let a = wf.scaled_amplitude(x1, x2, t);
    let density = a.psi.norm_sqr();
    if !(density >= NODE_FLOOR) || !density.is_finite() {
        return Err(Error::NearNode { x1, x2, t });
    }
    let conj = a.psi.conj();
    let v1 = (a.d1 * conj).im / density;
    let v2 = (a.d2 * conj).im / density;
    if v1.is_finite() && v2.is_finite() {
        Ok((v1, v2))
    } else {
        Err(Error::NearNode { x1, x2, t })
    }
}

/// Tolerance ladder and output times for verified integration.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub tol_start: f64,
    pub tol_floor: f64,
    /// Largest allowed coordinate-wise disagreement between the paired runs.
    pub delta: f64,
    /// Output times; the first entry is the start time. Strictly monotone.
    pub record_times: Vec<f64>,
    /// Step budget per individual run.
    pub max_steps: usize,
    pub verification: Verification,
}

/// Span over which the paired runs are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verification {
    /// Each interval between consecutive record times is verified on its own,
    /// restarting from the accepted position of the previous interval.
    PerInterval,
    /// One pair of runs over the whole time span, compared at the last time.
    WholeRun,
}

impl IntegratorConfig {
    pub const DEFAULT_TOL_START: f64 = 1e-9;
    pub const DEFAULT_TOL_FLOOR: f64 = 1e-16;
    pub const DEFAULT_DELTA: f64 = 5e-3;
    pub const DEFAULT_MAX_STEPS: usize = 200_000;

    pub fn new(record_times: Vec<f64>) -> Self {
        Self {
            tol_start: Self::DEFAULT_TOL_START,
            tol_floor: Self::DEFAULT_TOL_FLOOR,
            delta: Self::DEFAULT_DELTA,
            record_times,
            max_steps: Self::DEFAULT_MAX_STEPS,
            verification: Verification::PerInterval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_floor > 0.0 && self.tol_floor < self.tol_start) {
            return Err(Error::Config(format!(
                "need 0 < tol_floor < tol_start, got {} and {}",
                self.tol_floor, self.tol_start
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.record_times.is_empty() {
            return Err(Error::Config("record_times must not be empty".into()));
        }
        if self.record_times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("record_times must be finite".into()));
        }
        if self.record_times.len() > 1 {
            let dir = (self.record_times[1] - self.record_times[0]).signum();
            let monotone = self
                .record_times
                .windows(2)
                .all(|w| (w[1] - w[0]) * dir > 0.0);
            if !monotone || dir == 0.0 {
                return Err(Error::Config("record_times must be strictly monotone".into()));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Same tolerances with different output times.
    pub fn with_times(&self, record_times: Vec<f64>) -> Self {
        Self {
            record_times,
            ..self.clone()
        }
    }

    /// The (looser, tighter) tolerance pairs tried in order.
    pub fn tolerance_ladder(&self) -> Vec<(f64, f64)> {
        let mut pairs = Vec::new();
        let mut decade = 0;
        loop {
            let loose = decade_step(self.tol_start, decade);
            let tight = decade_step(self.tol_start, decade + 1);
            if tight < self.tol_floor * (1.0 - 1e-9) {
                break;
            }
            pairs.push((loose, tight));
            decade += 1;
        }
        pairs
    }
}

/// {0, Δ, 2Δ, …, t_end}; the last entry is exactly `t_end`.
pub fn default_record_times(t_end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= t_end && t_end.is_finite()) {
        return Err(Error::Config(format!(
            "need 0 < step <= t_end, got step={step}, t_end={t_end}"
        )));
    }
    let intervals = (t_end / step - 1e-9).ceil().max(1.0) as usize;
    let mut times: Vec<f64> = (0..intervals).map(|i| i as f64 * step).collect();
    times.push(t_end);
    Ok(times)
}

/// tol·10^(-decades), rounded to seven significant digits so that the ladder
/// prints as 1e-10 rather than 1.0000000000000001e-10.
fn decade_step(tol: f64, decades: i32) -> f64 {
    format!("{:.6e}", tol / 10f64.powi(decades))
        .parse()
        .unwrap_or(tol / 10f64.powi(decades))
}

/// One recorded point of a trajectory, in normal coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x1: f64,
    pub x2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    /// The pair started at `tolerance` agreed; samples come from the tighter run.
    Accepted { tolerance: f64 },
    Rejected,
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Starting (x_a, x_b).
    pub initial: (f64, f64),
    pub samples: Vec<Sample>,
    pub verdict: Verdict,
}

impl Trajectory {
    /// Samples mapped back to (t, x_a, x_b).
    pub fn original_samples(&self, wf: &WaveFunction) -> Vec<(f64, f64, f64)> {
        self.samples
            .iter()
            .map(|s| {
                let (xa, xb) = wf.model().from_normal(s.x1, s.x2);
                (s.t, xa, xb)
            })
            .collect()
    }
}

/// Integrates one run in normal coordinates at a single absolute tolerance.
pub fn integrate_normal(
    wf: &WaveFunction,
    start: [f64; 2],
    times: &[f64],
    atol: f64,
    max_steps: usize,
) -> std::result::Result<Vec<[f64; 2]>, SolveFailure> {
    let rhs = |t: f64, y: &[f64; 2]| velocity(wf, y[0], y[1], t).ok().map(|(a, b)| [a, b]);
    let control = StepControl {
        max_steps,
        ..StepControl::with_tolerance(atol)
    };
    ode::solve(rhs, start, times, &control).0
}

/// Verified integration from (x_a, x_b) at `cfg.record_times[0]`.
pub fn integrate_verified(
    wf: &WaveFunction,
    start: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if !(start.0.is_finite() && start.1.is_finite()) {
        return Err(Error::NonFiniteState {
            t: cfg.record_times[0],
        });
    }
    let (x1, x2) = wf.model().to_normal(start.0, start.1);
    let times = &cfg.record_times;
    let rejected = || Trajectory {
        initial: start,
        samples: vec![Sample {
            t: times[0],
            x1,
            x2,
        }],
        verdict: Verdict::Rejected,
    };
    let to_samples = |states: &[[f64; 2]]| -> Vec<Sample> {
        times
            .iter()
            .zip(states)
            .map(|(&t, y)| Sample { t, x1: y[0], x2: y[1] })
            .collect()
    };

    match cfg.verification {
        Verification::WholeRun => match verified_span(wf, [x1, x2], times, cfg) {
            Some((states, tolerance)) => Ok(Trajectory {
                initial: start,
                samples: to_samples(&states),
                verdict: Verdict::Accepted { tolerance },
            }),
            None => Ok(rejected()),
        },
        Verification::PerInterval => {
            let mut states = Vec::with_capacity(times.len());
            states.push([x1, x2]);
            let mut needed = cfg.tol_start;
            for window in times.windows(2) {
                let from = states[states.len() - 1];
                match verified_span(wf, from, window, cfg) {
                    Some((span, tol)) => {
                        needed = needed.min(tol);
                        states.push(span[1]);
                    }
                    None => return Ok(rejected()),
                }
            }
            Ok(Trajectory {
                initial: start,
                samples: to_samples(&states),
                verdict: Verdict::Accepted { tolerance: needed },
            })
        }
    }
}

/// Runs the tolerance ladder over `times`; returns the tighter run's states and
/// the looser tolerance of the first agreeing pair.
fn verified_span(
    wf: &WaveFunction,
    start: [f64; 2],
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Option<(Vec<[f64; 2]>, f64)> {
    if times.len() < 2 {
        return Some((vec![start], cfg.tol_start));
    }
    let run = |tol: f64| integrate_normal(wf, start, times, tol, cfg.max_steps);
    let mut cached = None;
    for (loose, tight) in cfg.tolerance_ladder() {
        // The tighter run of the previous pair is the looser run of this one.
        let loose_result = cached.take().unwrap_or_else(|| run(loose));
        let tight_result = run(tight);
        if let (Ok(a), Ok(b)) = (&loose_result, &tight_result) {
            let (fa, fb) = (a[a.len() - 1], b[b.len() - 1]);
            if (fa[0] - fb[0]).abs() <= cfg.delta && (fa[1] - fb[1]).abs() <= cfg.delta {
                return tight_result.ok().map(|states| (states, loose));
            }
        }
        cached = Some(tight_result);
    }
    None
}

/// CSV rows `id,t,x_a,x_b,verdict` for a batch of trajectories.
pub fn trajectories_csv(wf: &WaveFunction, trajectories: &[Trajectory]) -> String {
    let mut out = String::from("id,t,x_a,x_b,verdict\n");
    for (id, tr) in trajectories.iter().enumerate() {
        let verdict = match tr.verdict {
            Verdict::Accepted { tolerance } => format!("accepted:{tolerance:e}"),
            Verdict::Rejected => "rejected".to_string(),
        };
        for (t, xa, xb) in tr.original_samples(wf) {
            out.push_str(&format!("{id},{t},{xa},{xb},{verdict}\n"));
        }
    }
    out
}
