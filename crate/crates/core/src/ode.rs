//! Explicit adaptive Runge–Kutta integration: the Dormand–Prince 8(5,3) pair.
//!
//! Twelve stages give the eighth-order solution; the error is estimated from
//! the embedded fifth- and third-order combinations as in Hairer, Nørsett and
//! Wanner's DOP853. Error control is absolute-only. The integrator lands exactly
//! on every requested output time, in either time direction.

/// Why an integration run stopped before reaching its last output time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveFailure {
    /// The step size collapsed below the representable resolution at `t`.
    StepTooSmall { t: f64 },
    /// The step budget was exhausted at `t`.
    MaxSteps { t: f64 },
    /// The state or its derivative became non-finite at `t`.
    NonFinite { t: f64 },
}

/// Step-size control for a single run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    /// Absolute error tolerance per component.
    pub atol: f64,
    /// Limit on attempted steps (accepted plus rejected).
    pub max_steps: usize,
    pub safety: f64,
    /// Bounds on the step ratio h_new / h.
    pub min_factor: f64,
    pub max_factor: f64,
    /// Optional cap on |h|.
    pub max_step: Option<f64>,
}

impl StepControl {
    pub fn with_tolerance(atol: f64) -> Self {
        Self {
            atol,
            max_steps: 200_000,
            safety: 0.9,
            min_factor: 1.0 / 3.0,
            max_factor: 6.0,
            max_step: None,
        }
    }
}

/// Per-run counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Right-hand side of y' = f(t, y). `None` signals that f cannot be evaluated
/// at the requested point (for example, a wave-function node); the integrator
/// then shrinks the step and retries.
pub trait Rhs<const D: usize> {
    fn eval(&mut self, t: f64, y: &[f64; D]) -> Option<[f64; D]>;
}

impl<const D: usize, F> Rhs<D> for F
where
    F: FnMut(f64, &[f64; D]) -> Option<[f64; D]>,
{
    fn eval(&mut self, t: f64, y: &[f64; D]) -> Option<[f64; D]> {
        self(t, y)
    }
}

/// Integrates from `times[0]` through every entry of `times` (strictly
/// monotone, either direction) and returns the state at each of them.
pub fn solve<const D: usize, F: Rhs<D>>(
    mut rhs: F,
    y0: [f64; D],
    times: &[f64],
    control: &StepControl,
) -> (Result<Vec<[f64; D]>, SolveFailure>, SolveStats) {
    let mut stats = SolveStats::default();
    let result = solve_inner(&mut rhs, y0, times, control, &mut stats);
    (result, stats)
}

fn solve_inner<const D: usize, F: Rhs<D>>(
    rhs: &mut F,
    y0: [f64; D],
    times: &[f64],
    control: &StepControl,
    stats: &mut SolveStats,
) -> Result<Vec<[f64; D]>, SolveFailure> {
    let mut out = Vec::with_capacity(times.len());
    let Some(&t0) = times.first() else {
        return Ok(out);
    };
    out.push(y0);
    if times.len() == 1 {
        return Ok(out);
    }
    let dir = (times[times.len() - 1] - t0).signum();
    let expo = 1.0 / 8.0;

    let mut t = t0;
    let mut y = y0;
    let mut f0 = rhs.eval(t, &y).ok_or(SolveFailure::NonFinite { t })?;
    stats.evaluations += 1;
    if !all_finite(&f0) {
        return Err(SolveFailure::NonFinite { t });
    }
    let span = (times[times.len() - 1] - t0).abs();
    let h_cap = control.max_step.unwrap_or(span).min(span);
    let mut h = initial_step(rhs, t, &y, &f0, dir, control.atol, h_cap, stats);
    let mut last_rejected = false;

    for &target in &times[1..] {
        while (target - t) * dir > 0.0 {
            if stats.accepted + stats.rejected >= control.max_steps {
                return Err(SolveFailure::MaxSteps { t });
            }
            let remaining = target - t;
            // Stretch by up to 1% rather than leave a sliver before the output time.
            let clipped = 1.01 * h.abs() >= remaining.abs();
            let step = if clipped { remaining } else { h };
            if step.abs() <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
                return Err(SolveFailure::StepTooSmall { t });
            }

            let Some(attempt) = dop853_step(rhs, t, &y, &f0, step, stats) else {
                // f could not be evaluated inside the step: retreat.
                stats.rejected += 1;
                h = 0.5 * step;
                last_rejected = true;
                continue;
            };

            let err = error_norm(&attempt, &y, step, control.atol);
            if !err.is_finite() {
                stats.rejected += 1;
                h = 0.5 * step;
                last_rejected = true;
                continue;
            }
            let fac = (err.powf(expo) / control.safety)
                .clamp(1.0 / control.max_factor, 1.0 / control.min_factor);
            let mut h_new = step / fac;
            if err <= 1.0 {
                let t_new = if clipped { target } else { t + step };
                let Some(f_new) = rhs.eval(t_new, &attempt.y) else {
                    stats.evaluations += 1;
                    stats.rejected += 1;
                    h = 0.5 * step;
                    last_rejected = true;
                    continue;
                };
                stats.evaluations += 1;
                if !all_finite(&attempt.y) || !all_finite(&f_new) {
                    return Err(SolveFailure::NonFinite { t: t_new });
                }
                stats.accepted += 1;
                if last_rejected {
                    h_new = if dir > 0.0 { h_new.min(step) } else { h_new.max(step) };
                }
                last_rejected = false;
                t = t_new;
                y = attempt.y;
                f0 = f_new;
                // A step shortened only to land on an output time does not
                // shrink the next proposal.
                h = if clipped && h_new.abs() < h.abs() { h } else { h_new };
            } else {
                stats.rejected += 1;
                last_rejected = true;
                h = step / (err.powf(expo) / control.safety).min(1.0 / control.min_factor);
            }
            if h.abs() > h_cap {
                h = h_cap * dir;
            }
        }
        out.push(y);
    }
    Ok(out)
}

fn all_finite<const D: usize>(v: &[f64; D]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Starting step from the derivative scale (Hairer's HINIT with atol only).
#[allow(clippy::too_many_arguments)]
fn initial_step<const D: usize, F: Rhs<D>>(
    rhs: &mut F,
    t: f64,
    y: &[f64; D],
    f0: &[f64; D],
    dir: f64,
    atol: f64,
    h_cap: f64,
    stats: &mut SolveStats,
) -> f64 {
    let rms = |v: &[f64; D]| (v.iter().map(|x| (x / atol).powi(2)).sum::<f64>() / D as f64).sqrt();
    let d0 = rms(y);
    let d1 = rms(f0);
    let mut h = if d0 <= 1e-10 || d1 <= 1e-10 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h = h.min(h_cap);
    let mut y1 = *y;
    for i in 0..D {
        y1[i] += dir * h * f0[i];
    }
    stats.evaluations += 1;
    let h1 = match rhs.eval(t + dir * h, &y1) {
        Some(f1) => {
            let mut diff = [0.0; D];
            for i in 0..D {
                diff[i] = f1[i] - f0[i];
            }
            let d2 = rms(&diff) / h;
            let dmax = d1.max(d2);
            if dmax <= 1e-15 {
                (1e-6f64).max(h * 1e-3)
            } else {
                (0.01 / dmax).powf(1.0 / 8.0)
            }
        }
        None => h * 1e-3,
    };
    dir * (100.0 * h).min(h1).min(h_cap)
}

struct Attempt<const D: usize> {
    y: [f64; D],
    /// Difference between the 8th-order and embedded 5th-order solutions, over h.
    err5: [f64; D],
    /// Same for the 3rd-order combination.
    err3: [f64; D],
}

/// Hairer's blended estimate: h·√(Σe₅² / (N (Σe₅² + 0.01 Σe₃²))) · √Σe₅² scaled by 1/atol.
fn error_norm<const D: usize>(a: &Attempt<D>, _y: &[f64; D], h: f64, atol: f64) -> f64 {
    let mut e5 = 0.0;
    let mut e3 = 0.0;
    for i in 0..D {
        e5 += (a.err5[i] / atol).powi(2);
        e3 += (a.err3[i] / atol).powi(2);
    }
    let mut deno = e5 + 0.01 * e3;
    if deno <= 0.0 {
        deno = 1.0;
    }
    h.abs() * e5 * (1.0 / (deno * D as f64)).sqrt()
}

fn dop853_step<const D: usize, F: Rhs<D>>(
    rhs: &mut F,
    t: f64,
    y: &[f64; D],
    f0: &[f64; D],
    h: f64,
    stats: &mut SolveStats,
) -> Option<Attempt<D>> {
    let mut k = [[0.0; D]; 12];
    k[0] = *f0;
    for s in 1..12 {
        let mut ys = *y;
        for (j, kj) in k.iter().enumerate().take(s) {
            let a = A[s][j];
            if a != 0.0 {
                for i in 0..D {
                    ys[i] += h * a * kj[i];
                }
            }
        }
        stats.evaluations += 1;
        let ks = rhs.eval(t + C[s] * h, &ys)?;
        if !all_finite(&ks) {
            return None;
        }
        k[s] = ks;
    }
    let mut y_new = *y;
    let mut err5 = [0.0; D];
    let mut err3 = [0.0; D];
    for i in 0..D {
        let mut incr = 0.0;
        let mut e5 = 0.0;
        for s in 0..12 {
            incr += B[s] * k[s][i];
            e5 += ER[s] * k[s][i];
        }
        y_new[i] += h * incr;
        err5[i] = e5;
        err3[i] = incr - BHH[0] * k[0][i] - BHH[1] * k[8][i] - BHH[2] * k[11][i];
    }
    Some(Attempt {
        y: y_new,
        err5,
        err3,
    })
}

const C: [f64; 12] = [
    0.0,
    5.260_015_195_876_773e-2,
    7.890_022_793_815_16e-2,
    0.118_350_341_907_227_4,
    0.281_649_658_092_772_6,
    0.333_333_333_333_333_3,
    0.25,
    0.307_692_307_692_307_7,
    0.651_282_051_282_051_3,
    0.6,
    0.857_142_857_142_857_1,
    1.0,
];

const B: [f64; 12] = [
    5.429_373_411_656_876_5e-2,
    0.0,
    0.0,
    0.0,
    0.0,
    4.450_312_892_752_409,
    1.891_517_899_314_500_3,
    -5.801_203_960_010_585,
    3.111_643_669_578_199e-1,
    -1.521_609_496_625_161e-1,
    2.013_654_008_040_303_4e-1,
    4.471_061_572_777_259e-2,
];

const ER: [f64; 12] = [
    0.131_200_449_941_948_8e-1,
    0.0,
    0.0,
    0.0,
    0.0,
    -0.122_515_644_637_620_4e1,
    -0.495_758_949_657_250_2,
    0.166_437_718_245_498_6e1,
    -0.350_328_848_749_973_7,
    0.334_179_118_713_017_5,
    0.819_232_064_851_157_1e-1,
    -0.223_553_078_638_862_9e-1,
];

const BHH: [f64; 3] = [
    0.244_094_488_188_976_4,
    0.733_846_688_281_611_8,
    0.220_588_235_294_117_6e-1,
];

const A: [[f64; 12]; 12] = [
    [0.0; 12],
    [
        5.260_015_195_876_773e-2,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        1.972_505_698_453_79e-2,
        5.917_517_095_361_37e-2,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        2.958_758_547_680_685e-2,
        0.0,
        8.876_275_643_042_054e-2,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        2.413_651_341_592_667e-1,
        0.0,
        -8.845_494_793_282_861e-1,
        9.248_340_032_617_92e-1,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        3.703_703_703_703_703_5e-2,
        0.0,
        0.0,
        1.708_286_087_294_738_6e-1,
        1.254_676_875_668_224_2e-1,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        3.710_937_5e-2,
        0.0,
        0.0,
        1.702_522_110_195_440_5e-1,
        6.021_653_898_045_596e-2,
        -1.757_812_5e-2,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        3.709_200_011_850_479e-2,
        0.0,
        0.0,
        1.703_839_257_122_399_8e-1,
        1.072_620_304_463_732_8e-1,
        -1.531_943_774_862_440_2e-2,
        8.273_789_163_814_023e-3,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        6.241_109_587_160_757e-1,
        0.0,
        0.0,
        -3.360_892_629_446_941_4,
        -8.682_193_468_417_26e-1,
        2.759_209_969_944_671e1,
        2.015_406_755_047_789_4e1,
        -4.348_988_418_106_996e1,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        4.776_625_364_382_643_4e-1,
        0.0,
        0.0,
        -2.488_114_619_971_667_7,
        -5.902_908_268_368_43e-1,
        2.123_005_144_818_119_3e1,
        1.527_923_363_288_242_3e1,
        -3.328_821_096_898_486e1,
        -2.033_120_170_850_862_7e-2,
        0.0,
        0.0,
        0.0,
    ],
    [
        -9.371_424_300_859_873e-1,
        0.0,
        0.0,
        5.186_372_428_844_064,
        1.091_437_348_996_729_5,
        -8.149_787_010_746_927,
        -1.852_006_565_999_696e1,
        2.273_948_709_935_050_5e1,
        2.493_605_552_679_652_3,
        -3.046_764_471_898_219_6,
        0.0,
        0.0,
    ],
    [
        2.273_310_147_516_538,
        0.0,
        0.0,
        -1.053_449_546_673_725e1,
        -2.000_872_058_224_862_5,
        -1.795_893_186_311_88e1,
        2.794_888_452_941_996e1,
        -2.858_998_277_135_023_5,
        -8.872_856_933_530_63,
        1.236_056_717_579_430_3e1,
        6.433_927_460_157_636e-1,
        0.0,
    ],
];
