//! One-dimensional harmonic-oscillator eigenstates (unit mass, ħ = 1).
//!
//! ψ_n(x,t) = (Ω/π)^{1/4} (2ⁿ n!)^{-1/2} H_n(√Ω x) exp(-Ω x²/2) exp(-i(n+½)Ω t)
//!
//! Hermite polynomials are always evaluated by the upward three-term
//! recurrence; normalisation constants go through ln(n!) so that large
//! quantum numbers do not overflow the prefactor.

use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest quantum number supported by the batched [`OscillatorBasis`] tables.
pub const MAX_BASIS_N: usize = 64;

/// A single oscillator eigenmode: quantum number and angular frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigenmode {
    n: u32,
    omega: f64,
}

impl Eigenmode {
    pub fn new(n: u32, omega: f64) -> Result<Self> {
        if !(omega.is_finite() && omega > 0.0) {
            return Err(Error::Domain(format!(
                "eigenmode frequency must be positive and finite, got {omega}"
            )));
        }
        Ok(Self { n, omega })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// E_n = (n + ½)Ω.
    pub fn energy(&self) -> f64 {
        (self.n as f64 + 0.5) * self.omega
    }

    /// ln of (Ω/π)^{1/4} (2ⁿ n!)^{-1/2}.
    pub fn log_norm(&self) -> f64 {
        0.25 * (self.omega / PI).ln() - 0.5 * (self.n as f64 * LN_2 + log_factorial(self.n))
    }

    /// exp(-i E_n t).
    pub fn phase(&self, t: f64) -> Complex64 {
        Complex64::from_polar(1.0, -self.energy() * t)
    }
}

/// ln(n!) by direct summation; exact to rounding for the n we care about.
pub fn log_factorial(n: u32) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Physicists' Hermite polynomial H_n(u).
///
/// Returns a numeric-range error when the recurrence leaves the finite range.
pub fn hermite(n: u32, u: f64) -> Result<f64> {
    let (_, h) = hermite_pair(n, u);
    if h.is_finite() {
        Ok(h)
    } else {
        Err(Error::NumericRange(format!("H_{n}({u}) is not finite")))
    }
}

/// (H_{n-1}(u), H_n(u)), with H_{-1} ≡ 0.
fn hermite_pair(n: u32, u: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let next = 2.0 * u * cur - 2.0 * k as f64 * prev;
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

/// ψ_n(x, t) for the given mode.
pub fn eigenstate(mode: Eigenmode, x: f64, t: f64) -> Result<Complex64> {
    let sqrt_omega = mode.omega.sqrt();
    let u = sqrt_omega * x;
    let (_, h) = hermite_pair(mode.n, u);
    let amplitude = h * (mode.log_norm() - 0.5 * u * u).exp();
    let value = mode.phase(t) * amplitude;
    if value.re.is_finite() && value.im.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericRange(format!(
            "psi_{}(x={x}, t={t}) is not finite",
            mode.n
        )))
    }
}

/// ∂ψ_n/∂x, assembled from H_{n-1} and H_n without dividing by H_n.
pub fn eigenstate_dx(mode: Eigenmode, x: f64, t: f64) -> Result<Complex64> {
    let sqrt_omega = mode.omega.sqrt();
    let u = sqrt_omega * x;
    let (h_prev, h) = hermite_pair(mode.n, u);
    let bracket = sqrt_omega * 2.0 * mode.n as f64 * h_prev - mode.omega * x * h;
    let amplitude = bracket * (mode.log_norm() - 0.5 * u * u).exp();
    let value = mode.phase(t) * amplitude;
    if value.re.is_finite() && value.im.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericRange(format!(
            "dpsi_{}/dx(x={x}, t={t}) is not finite",
            mode.n
        )))
    }
}

/// Cached constants for evaluating every ψ_n, n ≤ n_max, at one frequency.
///
/// The batched evaluators fill real spatial factors; time phases are applied
/// by the caller so that the Hermite recurrence is shared across all modes.
#[derive(Debug, Clone)]
pub struct OscillatorBasis {
    omega: f64,
    sqrt_omega: f64,
    norms: Vec<f64>,
}

impl OscillatorBasis {
    pub fn new(omega: f64, n_max: usize) -> Result<Self> {
        if n_max > MAX_BASIS_N {
            return Err(Error::Domain(format!(
                "quantum number {n_max} exceeds supported maximum {MAX_BASIS_N}"
            )));
        }
        let norms = (0..=n_max as u32)
            .map(|n| Eigenmode::new(n, omega).map(|m| m.log_norm().exp()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            omega,
            sqrt_omega: omega.sqrt(),
            norms,
        })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn n_max(&self) -> usize {
        self.norms.len() - 1
    }

    /// Spatial factors without the Gaussian envelope:
    /// `values[n] = N_n H_n(u)`, `slopes[n] = N_n (2n√Ω H_{n-1}(u) - Ω x H_n(u))`.
    ///
    /// Multiplying both by exp(-u²/2) gives ψ_n(x,0) and ψ_n'(x,0).
    pub fn fill_scaled(&self, x: f64, values: &mut [f64], slopes: &mut [f64]) {
        let u = self.sqrt_omega * x;
        let mut prev = 0.0;
        let mut cur = 1.0;
        for n in 0..self.norms.len() {
            let norm = self.norms[n];
            values[n] = norm * cur;
            slopes[n] = norm * (self.sqrt_omega * 2.0 * n as f64 * prev - self.omega * x * cur);
            let next = 2.0 * u * cur - 2.0 * n as f64 * prev;
            prev = cur;
            cur = next;
        }
    }

    /// Gaussian envelope exp(-Ω x²/2).
    pub fn envelope(&self, x: f64) -> f64 {
        (-0.5 * self.omega * x * x).exp()
    }

    /// exp(-i(n+½)Ω t) for every n in the basis.
    pub fn fill_phases(&self, t: f64, phases: &mut [Complex64]) {
        for (n, p) in phases.iter_mut().enumerate().take(self.norms.len()) {
            *p = Complex64::from_polar(1.0, -(n as f64 + 0.5) * self.omega * t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Closed-form sum: H_n(u) = n! Σ_m (-1)^m (2u)^{n-2m} / (m! (n-2m)!).
    fn hermite_terms(n: u32, u: f64) -> Vec<f64> {
        let fact = |k: u32| (1..=k).map(|v| v as f64).product::<f64>();
        (0..=n / 2)
            .map(|m| {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                sign * fact(n) * (2.0 * u).powi((n - 2 * m) as i32) / (fact(m) * fact(n - 2 * m))
            })
            .collect()
    }

    fn hermite_explicit(n: u32, u: f64) -> f64 {
        hermite_terms(n, u).iter().sum()
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
        let h = (b - a) / intervals as f64;
        let mut s = f(a) + f(b);
        for i in 1..intervals {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn hermite_low_orders() {
        assert_eq!(hermite(0, 3.7).unwrap(), 1.0);
        assert_eq!(hermite(1, 0.5).unwrap(), 1.0);
        assert_relative_eq!(hermite(3, 0.5).unwrap(), -5.0, epsilon = 1e-14);
    }

    #[test]
    fn hermite_six_matches_explicit_sum() {
        // 64u⁶ - 480u⁴ + 720u² - 120 at u = 0.3
        let frozen = -59.041344;
        assert_relative_eq!(hermite_explicit(6, 0.3), frozen, max_relative = 1e-13);
        assert_relative_eq!(hermite(6, 0.3).unwrap(), frozen, max_relative = 1e-13);
    }

    #[test]
    fn hermite_recurrence_consistency() {
        for n in 0..=12 {
            for i in 0..=100 {
                let u = -5.0 + 0.1 * i as f64;
                let want = hermite_explicit(n, u);
                let got = hermite(n, u).unwrap();
                // Near a root the sum cancels; measure relative to its term magnitudes.
                let scale: f64 = hermite_terms(n, u).iter().map(|v| v.abs()).sum();
                assert!(
                    (got - want).abs() <= 1e-10 * scale,
                    "n={n} u={u}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn hermite_overflow_is_reported() {
        assert!(matches!(hermite(400, 1e80), Err(Error::NumericRange(_))));
    }

    #[test]
    fn ground_state_peak_and_phase() {
        let mode = Eigenmode::new(0, 1.0).unwrap();
        let peak = PI.powf(-0.25);
        let v = eigenstate(mode, 0.0, 0.0).unwrap();
        assert_relative_eq!(v.re, peak, epsilon = 1e-15);
        assert_relative_eq!(v.re, 0.751126, epsilon = 1e-6);
        let v = eigenstate(mode, 0.0, PI).unwrap();
        assert!(v.re.abs() < 1e-15);
        assert_relative_eq!(v.im, -peak, epsilon = 1e-15);
    }

    #[test]
    fn eigenstates_are_normalised() {
        for &omega in &[0.3, 1.0, 1.4] {
            for n in 0..=10 {
                let mode = Eigenmode::new(n, omega).unwrap();
                let norm = simpson(
                    |x| eigenstate(mode, x, 0.0).unwrap().norm_sqr(),
                    -20.0,
                    20.0,
                    40_000,
                );
                assert!((norm - 1.0).abs() < 1e-10, "n={n} omega={omega}: {norm}");
            }
        }
    }

    #[test]
    fn eigenstates_are_orthonormal() {
        for m in 0..=8 {
            for n in 0..=8 {
                let a = Eigenmode::new(m, 1.0).unwrap();
                let b = Eigenmode::new(n, 1.0).unwrap();
                let overlap = simpson(
                    |x| {
                        (eigenstate(a, x, 0.0).unwrap().conj() * eigenstate(b, x, 0.0).unwrap()).re
                    },
                    -20.0,
                    20.0,
                    40_000,
                );
                let want = if m == n { 1.0 } else { 0.0 };
                assert!((overlap - want).abs() < 1e-8, "m={m} n={n}: {overlap}");
            }
        }
    }

    #[test]
    fn derivative_examples() {
        let g = Eigenmode::new(0, 1.0).unwrap();
        assert_eq!(eigenstate_dx(g, 0.0, 0.0).unwrap().norm(), 0.0);
        let e1 = Eigenmode::new(1, 1.0).unwrap();
        let slope = eigenstate_dx(e1, 0.0, 0.0).unwrap();
        assert_relative_eq!(slope.re, 2f64.sqrt() * PI.powf(-0.25), epsilon = 1e-14);
    }

    fn central_difference(mode: Eigenmode, x: f64, t: f64, h: f64) -> Complex64 {
        (eigenstate(mode, x + h, t).unwrap() - eigenstate(mode, x - h, t).unwrap()) / (2.0 * h)
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let mode = Eigenmode::new(4, 0.7).unwrap();
        let exact = eigenstate_dx(mode, 1.3, 0.9).unwrap();
        let fd = central_difference(mode, 1.3, 0.9, 1e-6);
        assert!((exact - fd).norm() <= 1e-6 * exact.norm());

        for n in 0..=8 {
            for &omega in &[0.316, 1.0, 1.378] {
                let mode = Eigenmode::new(n, omega).unwrap();
                for i in 0..=40 {
                    let x = -4.0 + 0.2 * i as f64 + 0.013;
                    let exact = eigenstate_dx(mode, x, 0.4).unwrap();
                    let fd = central_difference(mode, x, 0.4, 1e-6);
                    // Absolute floor covers points where the slope itself vanishes.
                    let scale = exact.norm().max(1e-3);
                    assert!(
                        (exact - fd).norm() <= 1e-6 * scale,
                        "n={n} omega={omega} x={x}: {exact} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn modulus_is_stationary() {
        let mode = Eigenmode::new(5, 1.378).unwrap();
        for i in 0..20 {
            let x = -3.0 + 0.31 * i as f64;
            let base = eigenstate(mode, x, 0.0).unwrap().norm();
            for &t in &[0.7, 3.1, 42.0] {
                assert_relative_eq!(
                    eigenstate(mode, x, t).unwrap().norm(),
                    base,
                    max_relative = 1e-14
                );
            }
        }
    }

    #[test]
    fn basis_tables_match_single_evaluations() {
        let basis = OscillatorBasis::new(1.378, 7).unwrap();
        let mut vals = [0.0; 8];
        let mut slopes = [0.0; 8];
        let x = -0.83;
        basis.fill_scaled(x, &mut vals, &mut slopes);
        let env = basis.envelope(x);
        for n in 0..8u32 {
            let mode = Eigenmode::new(n, 1.378).unwrap();
            assert_relative_eq!(
                vals[n as usize] * env,
                eigenstate(mode, x, 0.0).unwrap().re,
                max_relative = 1e-13
            );
            assert_relative_eq!(
                slopes[n as usize] * env,
                eigenstate_dx(mode, x, 0.0).unwrap().re,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn high_quantum_numbers_stay_finite() {
        let mode = Eigenmode::new(50, 1.0).unwrap();
        let v = eigenstate(mode, 2.0, 0.0).unwrap();
        assert!(v.re.is_finite());
        assert!(Eigenmode::new(3, 0.0).is_err());
    }
}
