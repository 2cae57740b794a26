//! Superposed two-oscillator wave function in normal coordinates.
//!
//! The coupled Hamiltonian (mω²/2)(x_a² + x_b²) + (mk/2) x_a x_b separates
//! under the rotation x₁ = √(m/2)(x_a + x_b), x₂ = √(m/2)(x_a − x_b) into two
//! unit-mass oscillators with Ω₁ = √(ω² + k/2) and Ω₂ = √(ω² − k/2).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eigenbasis::{OscillatorBasis, MAX_BASIS_N};
use crate::error::{Error, Result};

/// Default upper bound on sampled quantum numbers.
pub const DEFAULT_N_MAX: u32 = 6;

/// Normal-mode frequencies (Ω₁, Ω₂) for bare frequency ω and coupling k.
pub fn build_frequencies(omega: f64, k: f64) -> Result<(f64, f64)> {
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::Domain(format!("omega must be positive, got {omega}")));
    }
    let w2 = omega * omega;
    if !(k.is_finite() && k >= 0.0 && k < 2.0 * w2) {
        return Err(Error::Domain(format!(
            "coupling k={k} outside [0, 2ω²) = [0, {})",
            2.0 * w2
        )));
    }
    Ok(((w2 + 0.5 * k).sqrt(), (w2 - 0.5 * k).sqrt()))
}

/// (x_a, x_b) → (x₁, x₂).
pub fn to_normal(xa: f64, xb: f64, m: f64) -> (f64, f64) {
    let s = (0.5 * m).sqrt();
    (s * (xa + xb), s * (xa - xb))
}

/// (x₁, x₂) → (x_a, x_b).
pub fn from_normal(x1: f64, x2: f64, m: f64) -> (f64, f64) {
    let s = (0.5 / m).sqrt();
    (s * (x1 + x2), s * (x1 - x2))
}

/// Physical parameters of the coupled pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillatorModel {
    mass: f64,
    omega: f64,
    coupling: f64,
    omega1: f64,
    omega2: f64,
}

impl OscillatorModel {
    pub fn new(mass: f64, omega: f64, coupling: f64) -> Result<Self> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::Domain(format!("mass must be positive, got {mass}")));
        }
        let (omega1, omega2) = build_frequencies(omega, coupling)?;
        Ok(Self {
            mass,
            omega,
            coupling,
            omega1,
            omega2,
        })
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn omega1(&self) -> f64 {
        self.omega1
    }

    pub fn omega2(&self) -> f64 {
        self.omega2
    }

    pub fn to_normal(&self, xa: f64, xb: f64) -> (f64, f64) {
        to_normal(xa, xb, self.mass)
    }

    pub fn from_normal(&self, x1: f64, x2: f64) -> (f64, f64) {
        from_normal(x1, x2, self.mass)
    }
}

/// M distinct (n₁, n₂) pairs with their random phases θ ∈ [0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    modes: Vec<(u32, u32)>,
    phases: Vec<f64>,
    n_max: u32,
    seed: u64,
}

impl ModeSet {
    pub fn new(modes: Vec<(u32, u32)>, phases: Vec<f64>, n_max: u32, seed: u64) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Domain("mode set must contain at least one mode".into()));
        }
        if modes.len() != phases.len() {
            return Err(Error::Domain(format!(
                "{} modes but {} phases",
                modes.len(),
                phases.len()
            )));
        }
        if n_max as usize > MAX_BASIS_N {
            return Err(Error::Domain(format!("n_max {n_max} exceeds {MAX_BASIS_N}")));
        }
        let mut seen = HashSet::new();
        for &(n1, n2) in &modes {
            if n1 > n_max || n2 > n_max {
                return Err(Error::Domain(format!(
                    "mode ({n1}, {n2}) exceeds n_max {n_max}"
                )));
            }
            if !seen.insert((n1, n2)) {
                return Err(Error::Domain(format!("duplicate mode ({n1}, {n2})")));
            }
        }
        if let Some(bad) = phases.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::Domain(format!("phase {bad} outside [0, 1)")));
        }
        Ok(Self {
            modes,
            phases,
            n_max,
            seed,
        })
    }

    /// Draws `m` distinct pairs uniformly without replacement from
    /// {0..n_max}² and `m` independent uniform phases; fully determined by `seed`.
    pub fn sample(m: usize, n_max: u32, seed: u64) -> Result<Self> {
        let side = n_max as usize + 1;
        let available = side * side;
        if m == 0 || m > available {
            return Err(Error::Domain(format!(
                "cannot draw {m} distinct modes from {available} candidates"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = index::sample(&mut rng, available, m)
            .into_iter()
            .map(|i| ((i / side) as u32, (i % side) as u32))
            .collect();
        let phases = (0..m).map(|_| rng.random::<f64>()).collect();
        Self::new(modes, phases, n_max, seed)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[(u32, u32)] {
        &self.modes
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn n_max(&self) -> u32 {
        self.n_max
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// c_j = e^{i2πθ_j} / √M.
    pub fn coefficients(&self) -> Vec<Complex64> {
        let scale = 1.0 / (self.len() as f64).sqrt();
        self.phases
            .iter()
            .map(|&theta| Complex64::from_polar(scale, 2.0 * std::f64::consts::PI * theta))
            .collect()
    }

    /// Plain-text record; phases use the shortest round-tripping decimal form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# pilotwave mode set: mode = n1 n2 theta\n");
        let _ = writeln!(out, "M = {}", self.len());
        let _ = writeln!(out, "n_max = {}", self.n_max);
        let _ = writeln!(out, "seed = {}", self.seed);
        for (&(n1, n2), theta) in self.modes.iter().zip(&self.phases) {
            let _ = writeln!(out, "mode = {n1} {n2} {theta}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<mode set>".into(),
            line,
            msg,
        };
        let mut count = None;
        let mut n_max = None;
        let mut seed = None;
        let mut modes = Vec::new();
        let mut phases = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(i + 1, format!("expected key = value, got {line:?}")))?;
            let value = value.trim();
            match key.trim() {
                "M" => count = Some(value.parse::<usize>().map_err(|e| bad(i + 1, e.to_string()))?),
                "n_max" => n_max = Some(value.parse::<u32>().map_err(|e| bad(i + 1, e.to_string()))?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|e| bad(i + 1, e.to_string()))?),
                "mode" => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 3 {
                        return Err(bad(i + 1, format!("mode needs 3 fields, got {value:?}")));
                    }
                    let n1 = parts[0].parse::<u32>().map_err(|e| bad(i + 1, e.to_string()))?;
                    let n2 = parts[1].parse::<u32>().map_err(|e| bad(i + 1, e.to_string()))?;
                    let theta = parts[2].parse::<f64>().map_err(|e| bad(i + 1, e.to_string()))?;
                    modes.push((n1, n2));
                    phases.push(theta);
                }
                other => return Err(bad(i + 1, format!("unknown key {other:?}"))),
            }
        }
        let n_max = n_max.ok_or_else(|| bad(0, "missing n_max".into()))?;
        let seed = seed.ok_or_else(|| bad(0, "missing seed".into()))?;
        if let Some(m) = count {
            if m != modes.len() {
                return Err(bad(0, format!("M = {m} but {} modes listed", modes.len())));
            }
        }
        Self::new(modes, phases, n_max, seed)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        })
    }
}

/// Ψ together with its normal-coordinate gradient at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amplitude {
    pub psi: Complex64,
    pub d1: Complex64,
    pub d2: Complex64,
}

/// Ψ(x₁, x₂, t) = Σ c ψ_{n₁}(x₁, t; Ω₁) ψ_{n₂}(x₂, t; Ω₂). Immutable once built.
#[derive(Debug, Clone)]
pub struct WaveFunction {
    model: OscillatorModel,
    mode_set: ModeSet,
    coefficients: Vec<Complex64>,
    basis1: OscillatorBasis,
    basis2: OscillatorBasis,
}

const TABLE: usize = MAX_BASIS_N + 1;

impl WaveFunction {
    pub fn new(model: OscillatorModel, mode_set: ModeSet) -> Result<Self> {
        let max1 = mode_set.modes().iter().map(|m| m.0).max().unwrap_or(0) as usize;
        let max2 = mode_set.modes().iter().map(|m| m.1).max().unwrap_or(0) as usize;
        let basis1 = OscillatorBasis::new(model.omega1(), max1)?;
        let basis2 = OscillatorBasis::new(model.omega2(), max2)?;
        let coefficients = mode_set.coefficients();
        Ok(Self {
            model,
            mode_set,
            coefficients,
            basis1,
            basis2,
        })
    }

    pub fn model(&self) -> &OscillatorModel {
        &self.model
    }

    pub fn mode_set(&self) -> &ModeSet {
        &self.mode_set
    }

    /// Ψ and ∇Ψ with the Gaussian envelopes exp(-Ω_r x_r²/2) divided out.
    ///
    /// The envelope is a real positive factor, so phase gradients (and hence
    /// guidance velocities) computed from the scaled amplitude are exact while
    /// avoiding underflow far from the origin.
    pub fn scaled_amplitude(&self, x1: f64, x2: f64, t: f64) -> Amplitude {
        match self.basis1.n_max().max(self.basis2.n_max()) {
            0..=7 => self.scaled_amplitude_sized::<8>(x1, x2, t),
            8..=15 => self.scaled_amplitude_sized::<16>(x1, x2, t),
            _ => self.scaled_amplitude_sized::<TABLE>(x1, x2, t),
        }
    }

    fn scaled_amplitude_sized<const N: usize>(&self, x1: f64, x2: f64, t: f64) -> Amplitude {
        let mut v1 = [0.0; N];
        let mut s1 = [0.0; N];
        let mut v2 = [0.0; N];
        let mut s2 = [0.0; N];
        let mut p1 = [Complex64::new(0.0, 0.0); N];
        let mut p2 = [Complex64::new(0.0, 0.0); N];
        self.basis1.fill_scaled(x1, &mut v1, &mut s1);
        self.basis2.fill_scaled(x2, &mut v2, &mut s2);
        fill_phase_ladder(self.basis1.omega(), t, &mut p1[..=self.basis1.n_max()]);
        fill_phase_ladder(self.basis2.omega(), t, &mut p2[..=self.basis2.n_max()]);

        // Ψ = Σ_{n1} q1[n1] w[n1] with w[n1] = Σ_{n2} c q2[n2], where q = phase·value.
        let zero = Complex64::new(0.0, 0.0);
        let mut w = [zero; N];
        let mut u = [zero; N];
        for (&(n1, n2), &c) in self.mode_set.modes().iter().zip(&self.coefficients) {
            let (n1, n2) = (n1 as usize, n2 as usize);
            let a = c * p2[n2];
            w[n1] += a * v2[n2];
            u[n1] += a * s2[n2];
        }
        let (mut psi, mut d1, mut d2) = (zero, zero, zero);
        for n in 0..=self.basis1.n_max() {
            let q = p1[n] * v1[n];
            psi += q * w[n];
            d1 += p1[n] * s1[n] * w[n];
            d2 += q * u[n];
        }
        Amplitude { psi, d1, d2 }
    }

    /// Ψ and its normal-coordinate gradient.
    pub fn amplitude(&self, x1: f64, x2: f64, t: f64) -> Result<Amplitude> {
        let scaled = self.scaled_amplitude(x1, x2, t);
        let env = self.basis1.envelope(x1) * self.basis2.envelope(x2);
        let out = Amplitude {
            psi: scaled.psi * env,
            d1: scaled.d1 * env,
            d2: scaled.d2 * env,
        };
        let finite = [out.psi, out.d1, out.d2]
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite());
        if finite {
            Ok(out)
        } else {
            Err(Error::NumericRange(format!(
                "wave function not finite at x1={x1}, x2={x2}, t={t}"
            )))
        }
    }

    pub fn psi(&self, x1: f64, x2: f64, t: f64) -> Result<Complex64> {
        self.amplitude(x1, x2, t).map(|a| a.psi)
    }

    /// (∂₁Ψ, ∂₂Ψ).
    pub fn grad_psi(&self, x1: f64, x2: f64, t: f64) -> Result<(Complex64, Complex64)> {
        self.amplitude(x1, x2, t).map(|a| (a.d1, a.d2))
    }

    /// |Ψ|² in normal coordinates.
    pub fn density_normal(&self, x1: f64, x2: f64, t: f64) -> f64 {
        let scaled = self.scaled_amplitude(x1, x2, t);
        let env = self.basis1.envelope(x1) * self.basis2.envelope(x2);
        scaled.psi.norm_sqr() * env * env
    }

    /// Probability density in the original (x_a, x_b) coordinates: m |Ψ|².
    pub fn density_original(&self, xa: f64, xb: f64, t: f64) -> f64 {
        let (x1, x2) = self.model.to_normal(xa, xb);
        self.model.mass() * self.density_normal(x1, x2, t)
    }
}

/// exp(-i(n+½)Ωt) by repeated multiplication from two complex exponentials.
fn fill_phase_ladder(omega: f64, t: f64, out: &mut [Complex64]) {
    let step = Complex64::from_polar(1.0, -omega * t);
    let mut cur = Complex64::from_polar(1.0, -0.5 * omega * t);
    for p in out.iter_mut() {
        *p = cur;
        cur *= step;
    }
}
