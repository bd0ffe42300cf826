//! A single field mode on expanding space.
//!
//! In Fourier space each mode of a free scalar field on an expanding
//! background is a two-dimensional harmonic oscillator with time-dependent
//! mass `m(t) = a(t)^3` and frequency `w(t) = k / a(t)`, where `a` is the
//! scale factor. The mode's wave function is expanded over the *fixed*
//! reference Hermite basis (unit mass and frequency), in which the
//! operators `q^2` and `p^2` have analytic band matrices; the coefficient
//! vector is integrated with an adaptive high-order scheme, and a leakage
//! monitor guards the basis truncation. Working in a fixed basis avoids
//! the basis-derivative couplings an instantaneous eigenbasis would drag
//! in.
//!
//! Trajectories are guided by `v = Im(grad psi / psi) / a^3` (the mass in
//! the guidance law is the mode's effective mass). Ensembles on the
//! `(q1, q2)` plane reuse the coarse-graining and H-function machinery of
//! [`crate::ensemble`]: short-wavelength modes (inside the Hubble radius)
//! relax rapidly, while super-Hubble modes freeze and their relaxation is
//! retarded — the origin of a possible large-scale power deficit, measured
//! here by the ratio `xi` of the ensemble second moment to its Born value.

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use thiserror::Error;

use crate::ensemble::{
    h_series_from_run, sample_density, Density, EnsembleError, HSeries,
};
use crate::grid::{CoarseGrid, DensityField, GridError};
use crate::integrate::{FieldError, Flow, StepControl};
use crate::quadrature::{Rule1d, RuleNd};
use crate::rng::{lane_stream, Lane};
use crate::spectral::{AxisDomain, Domain, WaveSample};
use crate::stats;

#[derive(Debug, Clone, Error)]
pub enum CosmoError {
    #[error("truncation leakage {leakage:.3e} exceeds 1e-6; retry with n_lev >= {suggested}")]
    Truncation { leakage: f64, suggested: usize },
    #[error("invalid mode: {0}")]
    InvalidMode(String),
    #[error("scale factor not positive and finite on the window (a({t}) = {a})")]
    BadScaleFactor { t: f64, a: f64 },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Background expansion law.
///
/// The reference scale `a0` fixes where the mode sits relative to the
/// Hubble radius (`k / (a0 H)`) and lets a run start with the instantaneous
/// oscillator matched to the reference basis (`a0 = k^{-1/2}` gives
/// `m w = a0^2 k = 1` at `t = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Expansion {
    /// `a = 1`: the ordinary static oscillator.
    Static,
    /// `a = a0 exp(H t)`.
    DeSitter { hubble: f64, a0: f64 },
    /// `a = a0 (t / t0)^p`, valid for `t > 0`.
    PowerLaw { t0: f64, p: f64, a0: f64 },
}

impl Expansion {
    pub fn scale_factor(&self, t: f64) -> f64 {
        match self {
            Expansion::Static => 1.0,
            Expansion::DeSitter { hubble, a0 } => a0 * (hubble * t).exp(),
            Expansion::PowerLaw { t0, p, a0 } => a0 * (t / t0).powf(*p),
        }
    }

    fn check(&self, t: f64) -> Result<f64, CosmoError> {
        let a = self.scale_factor(t);
        if a.is_finite() && a > 0.0 {
            Ok(a)
        } else {
            Err(CosmoError::BadScaleFactor { t, a })
        }
    }
}

/// Coefficients of a field mode over the reference Hermite basis,
/// `n_lev` levels per dimension.
#[derive(Debug, Clone)]
pub struct ModeOscillator {
    pub wavenumber: f64,
    pub n_lev: usize,
    /// Row-major `c[n1 * n_lev + n2]`, unit norm.
    pub coeffs: Vec<C64>,
    pub t: f64,
}

impl ModeOscillator {
    pub fn new(
        wavenumber: f64,
        n_lev: usize,
        coeffs: Vec<C64>,
        t: f64,
    ) -> Result<Self, CosmoError> {
        if !(wavenumber > 0.0) {
            return Err(CosmoError::InvalidMode(format!(
                "wavenumber must be positive, got {wavenumber}"
            )));
        }
        if n_lev < 4 || coeffs.len() != n_lev * n_lev {
            return Err(CosmoError::InvalidMode(format!(
                "need n_lev >= 4 with n_lev^2 coefficients, got n_lev={n_lev}, len={}",
                coeffs.len()
            )));
        }
        let norm: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-8 {
            return Err(CosmoError::InvalidMode(format!(
                "coefficients must be normalized, got {norm}"
            )));
        }
        Ok(ModeOscillator {
            wavenumber,
            n_lev,
            coeffs,
            t,
        })
    }

    /// Superposition of the levels `(n1, n2)` with given amplitudes,
    /// normalized.
    pub fn from_levels(
        wavenumber: f64,
        n_lev: usize,
        levels: &[((usize, usize), C64)],
        t: f64,
    ) -> Result<Self, CosmoError> {
        let mut coeffs = vec![C64::new(0.0, 0.0); n_lev * n_lev];
        for &((n1, n2), c) in levels {
            if n1 >= n_lev || n2 >= n_lev {
                return Err(CosmoError::InvalidMode(format!(
                    "level ({n1},{n2}) outside the {n_lev}-level basis"
                )));
            }
            coeffs[n1 * n_lev + n2] += c;
        }
        let norm: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum();
        if !(norm > 0.0) {
            return Err(CosmoError::InvalidMode("all amplitudes vanish".into()));
        }
        let s = norm.sqrt();
        for c in &mut coeffs {
            *c /= s;
        }
        ModeOscillator::new(wavenumber, n_lev, coeffs, t)
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Occupation of the top two levels of either dimension: the
    /// truncation leakage monitor.
    pub fn leakage(&self) -> f64 {
        let n = self.n_lev;
        let mut leak = 0.0;
        for n1 in 0..n {
            for n2 in 0..n {
                if n1 >= n - 2 || n2 >= n - 2 {
                    leak += self.coeffs[n1 * n + n2].norm_sqr();
                }
            }
        }
        leak
    }

    /// Real part of the energy expectation (its imaginary part is a
    /// Hermiticity diagnostic, below 1e-10 for healthy states).
    pub fn energy_expectation(&self, expansion: &Expansion) -> C64 {
        let a = expansion.scale_factor(self.t);
        let (alpha, beta) = hamiltonian_coefficients(a, self.wavenumber);
        let mut h_c = vec![C64::new(0.0, 0.0); self.coeffs.len()];
        apply_hamiltonian(&self.coeffs, &mut h_c, self.n_lev, alpha, beta);
        self.coeffs
            .iter()
            .zip(&h_c)
            .map(|(c, hc)| c.conj() * hc)
            .sum()
    }
}

/// `H(t) = alpha p^2 + beta q^2` per dimension, with `alpha = 1/(2 a^3)`
/// and `beta = a k^2 / 2` (mass `a^3`, frequency `k/a`).
fn hamiltonian_coefficients(a: f64, k: f64) -> (f64, f64) {
    (1.0 / (2.0 * a * a * a), a * k * k / 2.0)
}

/// Apply `H = alpha (P2_1 + P2_2) + beta (Q2_1 + Q2_2)` to a coefficient
/// tensor, using the band matrices of `q^2` and `p^2` in the Hermite
/// basis: diagonal `n + 1/2` in both, off-diagonal
/// `+-sqrt((n+1)(n+2))/2` at `|dn| = 2` (plus for `q^2`, minus for `p^2`).
fn apply_hamiltonian(c: &[C64], out: &mut [C64], n_lev: usize, alpha: f64, beta: f64) {
    let diag = alpha + beta;
    let off = beta - alpha;
    for o in out.iter_mut() {
        *o = C64::new(0.0, 0.0);
    }
    let idx = |n1: usize, n2: usize| n1 * n_lev + n2;
    for n1 in 0..n_lev {
        for n2 in 0..n_lev {
            let i = idx(n1, n2);
            let mut acc = diag * ((n1 as f64 + 0.5) + (n2 as f64 + 0.5)) * c[i];
            if n1 + 2 < n_lev {
                let s = ((n1 + 1) as f64 * (n1 + 2) as f64).sqrt() / 2.0;
                acc += off * s * c[idx(n1 + 2, n2)];
            }
            if n1 >= 2 {
                let s = ((n1 - 1) as f64 * n1 as f64).sqrt() / 2.0;
                acc += off * s * c[idx(n1 - 2, n2)];
            }
            if n2 + 2 < n_lev {
                let s = ((n2 + 1) as f64 * (n2 + 2) as f64).sqrt() / 2.0;
                acc += off * s * c[idx(n1, n2 + 2)];
            }
            if n2 >= 2 {
                let s = ((n2 - 1) as f64 * n2 as f64).sqrt() / 2.0;
                acc += off * s * c[idx(n1, n2 - 2)];
            }
            out[i] = acc;
        }
    }
}

/// Adaptive Dormand-Prince step of `i dc/dt = H(t) c` from `t` to `t + dt`.
///
/// Works on the complex coefficients directly; tolerances are tight enough
/// that the norm drifts below 1e-8 per unit time.
fn integrate_coefficients(
    coeffs: &mut Vec<C64>,
    n_lev: usize,
    wavenumber: f64,
    expansion: &Expansion,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
) -> Result<(), CosmoError> {
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let n = coeffs.len();
    let rhs = |t: f64, c: &[C64], out: &mut [C64]| -> Result<(), CosmoError> {
        let a = expansion.check(t)?;
        let (alpha, beta) = hamiltonian_coefficients(a, wavenumber);
        apply_hamiltonian(c, out, n_lev, alpha, beta);
        // i dc/dt = H c  =>  dc/dt = -i H c.
        for o in out.iter_mut() {
            *o *= C64::new(0.0, -1.0);
        }
        Ok(())
    };
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(());
    }
    let dir = span.signum();
    let mut t = t0;
    let mut k: Vec<Vec<C64>> = vec![vec![C64::new(0.0, 0.0); n]; 7];
    rhs(t, coeffs, &mut k[0])?;
    // Initial step from the instantaneous energy scale.
    let a0 = expansion.check(t0)?;
    let (al, be) = hamiltonian_coefficients(a0, wavenumber);
    let omega = (al + be) * 2.0 * (n_lev as f64 + 1.0);
    let mut h = (0.05 / omega).min(span.abs());
    let mut y_new = vec![C64::new(0.0, 0.0); n];
    let mut stage = vec![C64::new(0.0, 0.0); n];
    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= span.abs() * 1e-12 {
            return Ok(());
        }
        h = h.min(remaining);
        let hs = dir * h;
        let mut ok = true;
        for s in 0..6 {
            for i in 0..n {
                let mut acc = coeffs[i];
                for j in 0..=s {
                    if A[s][j] != 0.0 {
                        acc += hs * A[s][j] * k[j][i];
                    }
                }
                stage[i] = acc;
            }
            if rhs(t + hs * C[s], &stage, &mut k[s + 1]).is_err() {
                ok = false;
                break;
            }
        }
        if !ok {
            h *= 0.5;
            if h < 1e-14 * span.abs() {
                return Err(CosmoError::BadScaleFactor { t, a: f64::NAN });
            }
            continue;
        }
        let mut err_acc = 0.0;
        for i in 0..n {
            let mut y = coeffs[i];
            // Fifth-order solution shares the last stage row of A.
            for (s, &b) in [
                35.0 / 384.0,
                0.0,
                500.0 / 1113.0,
                125.0 / 192.0,
                -2187.0 / 6784.0,
                11.0 / 84.0,
                0.0,
            ]
            .iter()
            .enumerate()
            {
                if b != 0.0 {
                    y += hs * b * k[s][i];
                }
            }
            y_new[i] = y;
            let mut e = C64::new(0.0, 0.0);
            for (s, &ec) in E.iter().enumerate() {
                if ec != 0.0 {
                    e += hs * ec * k[s][i];
                }
            }
            let sc = atol + rtol * coeffs[i].norm().max(y.norm());
            err_acc += (e.norm() / sc).powi(2);
        }
        let err = (err_acc / n as f64).sqrt();
        if err <= 1.0 {
            t += hs;
            coeffs.copy_from_slice(&y_new);
            rhs(t, coeffs, &mut k[0])?;
            let fac = (err.max(1e-10).powf(0.17) / 0.9).clamp(0.1, 5.0);
            h /= fac;
        } else {
            let fac = (err.powf(0.17) / 0.9).clamp(1.0, 5.0);
            h /= fac;
        }
    }
}

/// Advance a mode through `dt` of cosmic time.
pub fn step_mode(
    mode: &ModeOscillator,
    expansion: &Expansion,
    dt: f64,
) -> Result<ModeOscillator, CosmoError> {
    let mut out = mode.clone();
    integrate_coefficients(
        &mut out.coeffs,
        mode.n_lev,
        mode.wavenumber,
        expansion,
        mode.t,
        mode.t + dt,
        1e-10,
        1e-12,
    )?;
    out.t += dt;
    let leakage = out.leakage();
    if leakage > 1e-6 {
        return Err(CosmoError::Truncation {
            leakage,
            suggested: mode.n_lev * 2,
        });
    }
    Ok(out)
}

/// Normalized Hermite ladder (unit mass/frequency) with first derivatives.
fn hermite_tables(x: f64, n_lev: usize) -> (Vec<f64>, Vec<f64>) {
    let mut phi = Vec::with_capacity(n_lev);
    let mut dphi = Vec::with_capacity(n_lev);
    let phi0 = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
    phi.push(phi0);
    dphi.push(-x * phi0);
    if n_lev > 1 {
        let p1 = std::f64::consts::SQRT_2 * x * phi0;
        phi.push(p1);
        dphi.push(2.0_f64.sqrt() * phi0 - x * p1);
    }
    for n in 2..n_lev {
        let nf = n as f64;
        let p = (2.0 / nf).sqrt() * x * phi[n - 1] - ((nf - 1.0) / nf).sqrt() * phi[n - 2];
        phi.push(p);
        dphi.push((2.0 * nf).sqrt() * phi[n - 1] - x * p);
    }
    (phi, dphi)
}

/// Wave sample of a coefficient tensor at `(q1, q2)`.
fn mode_sample(coeffs: &[C64], n_lev: usize, q: [f64; 2]) -> WaveSample<2> {
    let (p1, d1) = hermite_tables(q[0], n_lev);
    let (p2, d2) = hermite_tables(q[1], n_lev);
    let mut value = C64::new(0.0, 0.0);
    let mut g1 = C64::new(0.0, 0.0);
    let mut g2 = C64::new(0.0, 0.0);
    let mut lap = C64::new(0.0, 0.0);
    for n1 in 0..n_lev {
        // phi'' = (x^2 - 2n - 1) phi in the unit-oscillator basis.
        let dd1 = (q[0] * q[0] - 2.0 * n1 as f64 - 1.0) * p1[n1];
        for n2 in 0..n_lev {
            let c = coeffs[n1 * n_lev + n2];
            if c.norm_sqr() == 0.0 {
                continue;
            }
            let dd2 = (q[1] * q[1] - 2.0 * n2 as f64 - 1.0) * p2[n2];
            value += c * p1[n1] * p2[n2];
            g1 += c * d1[n1] * p2[n2];
            g2 += c * p1[n1] * d2[n2];
            lap += c * (dd1 * p2[n2] + p1[n1] * dd2);
        }
    }
    WaveSample {
        value,
        gradient: [g1, g2],
        laplacian: lap,
        density: value.norm_sqr(),
    }
}

/// Guidance velocity of the mode: `v = Im(grad psi / psi) / a^3`.
pub fn mode_guidance(
    mode: &ModeOscillator,
    expansion: &Expansion,
    q: [f64; 2],
) -> Result<[f64; 2], FieldError> {
    let a = expansion.scale_factor(mode.t);
    let w = mode_sample(&mode.coeffs, mode.n_lev, q);
    let threshold = 1e-12 / characteristic_area(mode.n_lev);
    if !(w.density > threshold) {
        return Err(FieldError::Node { density: w.density });
    }
    let mass = a * a * a;
    let conj = w.value.conj();
    Ok([
        (conj * w.gradient[0]).im / (mass * w.density),
        (conj * w.gradient[1]).im / (mass * w.density),
    ])
}

fn characteristic_area(n_lev: usize) -> f64 {
    let r = (2.0 * n_lev as f64 + 1.0).sqrt() + 4.0;
    (2.0 * r) * (2.0 * r)
}

/// Coefficient snapshots dense enough for cubic Hermite interpolation in
/// time, driving trajectory integration.
#[derive(Debug, Clone)]
pub struct ModeHistory {
    pub wavenumber: f64,
    pub n_lev: usize,
    pub expansion: Expansion,
    times: Vec<f64>,
    snaps: Vec<Vec<C64>>,
    derivs: Vec<Vec<C64>>,
    leakages: Vec<f64>,
    max_leakage: f64,
}

impl ModeHistory {
    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn max_leakage(&self) -> f64 {
        self.max_leakage
    }

    /// Leakage of the snapshot nearest to `t`.
    pub fn leakage_at(&self, t: f64) -> f64 {
        let (i, th, _) = self.bracket(t);
        if th < 0.5 {
            self.leakages[i]
        } else {
            self.leakages[i + 1]
        }
    }

    /// Coefficients at an exact snapshot time.
    pub fn snapshot_at(&self, t: f64) -> Option<&[C64]> {
        self.times
            .iter()
            .position(|&ti| (ti - t).abs() <= 1e-9 * t.abs().max(1.0))
            .map(|i| self.snaps[i].as_slice())
    }

    fn bracket(&self, t: f64) -> (usize, f64, f64) {
        let dt = self.times[1] - self.times[0];
        let raw = ((t - self.times[0]) / dt).floor();
        let i = (raw.max(0.0) as usize).min(self.times.len() - 2);
        let theta = ((t - self.times[i]) / dt).clamp(0.0, 1.0);
        (i, theta, dt)
    }

    /// Wave sample at `(q, t)` by combining the bracketing snapshots and
    /// their derivatives with cubic Hermite weights (no allocation of an
    /// interpolated coefficient vector).
    pub fn sample(&self, q: [f64; 2], t: f64) -> WaveSample<2> {
        let (i, th, dt) = self.bracket(t);
        let h00 = (1.0 + 2.0 * th) * (1.0 - th) * (1.0 - th);
        let h10 = th * (1.0 - th) * (1.0 - th) * dt;
        let h01 = th * th * (3.0 - 2.0 * th);
        let h11 = th * th * (th - 1.0) * dt;
        let (p1, d1) = hermite_tables(q[0], self.n_lev);
        let (p2, d2) = hermite_tables(q[1], self.n_lev);
        let (s0, s1) = (&self.snaps[i], &self.snaps[i + 1]);
        let (v0, v1) = (&self.derivs[i], &self.derivs[i + 1]);
        let mut value = C64::new(0.0, 0.0);
        let mut g1 = C64::new(0.0, 0.0);
        let mut g2 = C64::new(0.0, 0.0);
        for n1 in 0..self.n_lev {
            for n2 in 0..self.n_lev {
                let idx = n1 * self.n_lev + n2;
                let c = h00 * s0[idx] + h10 * v0[idx] + h01 * s1[idx] + h11 * v1[idx];
                if c.norm_sqr() == 0.0 {
                    continue;
                }
                value += c * p1[n1] * p2[n2];
                g1 += c * d1[n1] * p2[n2];
                g2 += c * p1[n1] * d2[n2];
            }
        }
        WaveSample {
            value,
            gradient: [g1, g2],
            laplacian: C64::new(0.0, 0.0),
            density: value.norm_sqr(),
        }
    }
}

/// Integrate the mode over `[mode.t, t_end]`, storing snapshots every
/// `dt_snap` (chosen automatically from the spectral range when `None`).
pub fn evolve_mode(
    mode: &ModeOscillator,
    expansion: &Expansion,
    t_end: f64,
    dt_snap: Option<f64>,
) -> Result<ModeHistory, CosmoError> {
    let t0 = mode.t;
    assert!(t_end > t0, "t_end must exceed the mode time");
    // Fastest phase on the window bounds the snapshot spacing.
    let mut omega_max: f64 = 1e-6;
    for i in 0..=16 {
        let t = t0 + (t_end - t0) * i as f64 / 16.0;
        let a = expansion.check(t)?;
        let (al, be) = hamiltonian_coefficients(a, mode.wavenumber);
        omega_max = omega_max.max((al + be) * 2.0 * (mode.n_lev as f64 + 1.0));
    }
    let dt = dt_snap.unwrap_or(0.1 / omega_max);
    let steps = ((t_end - t0) / dt).ceil() as usize;
    let dt = (t_end - t0) / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut snaps = Vec::with_capacity(steps + 1);
    let mut derivs = Vec::with_capacity(steps + 1);
    let mut leakages = Vec::with_capacity(steps + 1);
    let mut current = mode.clone();
    let mut max_leakage = current.leakage();
    leakages.push(max_leakage);
    let push =
        |times: &mut Vec<f64>, snaps: &mut Vec<Vec<C64>>, derivs: &mut Vec<Vec<C64>>,
         m: &ModeOscillator, expansion: &Expansion| {
            let a = expansion.scale_factor(m.t);
            let (al, be) = hamiltonian_coefficients(a, m.wavenumber);
            let mut d = vec![C64::new(0.0, 0.0); m.coeffs.len()];
            apply_hamiltonian(&m.coeffs, &mut d, m.n_lev, al, be);
            for x in d.iter_mut() {
                *x *= C64::new(0.0, -1.0);
            }
            times.push(m.t);
            snaps.push(m.coeffs.clone());
            derivs.push(d);
        };
    push(&mut times, &mut snaps, &mut derivs, &current, expansion);
    for _ in 0..steps {
        current = step_mode(&current, expansion, dt)?;
        let leak = current.leakage();
        max_leakage = max_leakage.max(leak);
        leakages.push(leak);
        push(&mut times, &mut snaps, &mut derivs, &current, expansion);
    }
    Ok(ModeHistory {
        wavenumber: mode.wavenumber,
        n_lev: mode.n_lev,
        expansion: *expansion,
        times,
        snaps,
        derivs,
        leakages,
        max_leakage,
    })
}

/// The mode's guidance law as a [`Flow`] over the `(q1, q2)` plane.
pub struct ModeFlow<'a> {
    pub history: &'a ModeHistory,
}

impl<'a> Flow<2> for ModeFlow<'a> {
    fn velocity(&self, t: f64, q: [f64; 2]) -> Result<[f64; 2], FieldError> {
        let w = self.history.sample(q, t);
        let threshold = 1e-12 / characteristic_area(self.history.n_lev);
        if !(w.density > threshold) {
            return Err(FieldError::Node { density: w.density });
        }
        let a = self.history.expansion.scale_factor(t);
        let mass = a * a * a;
        let conj = w.value.conj();
        Ok([
            (conj * w.gradient[0]).im / (mass * w.density),
            (conj * w.gradient[1]).im / (mass * w.density),
        ])
    }

    fn domain(&self) -> Domain<2> {
        Domain::uniform(AxisDomain::Line)
    }

    fn node_ratio(&self, t: f64, q: [f64; 2]) -> f64 {
        let w = self.history.sample(q, t);
        w.density / (1e-12 / characteristic_area(self.history.n_lev))
    }
}

/// Coarse Born field of the mode at a given time.
pub fn mode_coarse_born(
    history: &ModeHistory,
    t: f64,
    grid: &CoarseGrid<2>,
) -> Result<DensityField<2>, CosmoError> {
    // Wide cells (coarse grids over the whole oscillator support) need a
    // denser per-cell rule than box-state cells do.
    let widths = grid.cell_widths();
    let scale = (2.0 * history.n_lev as f64 + 1.0).sqrt();
    let order = (6.0 + 2.0 * widths[0].max(widths[1]) * scale.sqrt()).ceil() as usize;
    let vol = grid.cell_volume();
    let values: Vec<f64> = (0..grid.cell_count())
        .into_par_iter()
        .map(|idx| {
            let (lo, hi) = grid.cell_bounds(idx);
            let rule = RuleNd::<2>::new(order, lo, hi);
            rule.integrate(|q| history.sample(q, t).density) / vol
        })
        .collect();
    Ok(DensityField::new(grid.clone(), values)?)
}

/// Full mode-relaxation experiment: sample, evolve on the plane, measure
/// the H-function against the mode's own Born field at every time.
pub fn mode_relaxation(
    mode: &ModeOscillator,
    expansion: &Expansion,
    initial: &impl Density<2>,
    n: usize,
    seed: u64,
    grid: &CoarseGrid<2>,
    times: &[f64],
    ctrl: &StepControl,
) -> Result<(HSeries, ModeHistory), CosmoError> {
    assert!(!times.is_empty());
    assert!((times[0] - mode.t).abs() < 1e-12, "grid starts at the mode time");
    let history = evolve_mode(mode, expansion, *times.last().unwrap(), None)?;
    let positions = sample_density(initial, n, seed)?;
    let flow = ModeFlow { history: &history };
    let run = crate::ensemble::evolve_flow(&flow, &positions, times, ctrl, seed)?;
    let born: Vec<DensityField<2>> = times
        .iter()
        .map(|&t| mode_coarse_born(&history, t, grid))
        .collect::<Result<_, _>>()?;
    let series = h_series_from_run(&run, &born, grid, seed)?;
    Ok((series, history))
}

/// Power-spectrum ratio: ensemble second moment over its Born value.
#[derive(Debug, Clone, Copy)]
pub struct PowerRatio {
    pub xi: f64,
    pub sigma_boot: f64,
    pub born_moment: f64,
}

/// `xi = <q1^2 + q2^2>_ensemble / <q1^2 + q2^2>_Born` at time `t` of the
/// run; the Born moment is evaluated by quadrature over the mode density.
pub fn power_ratio(
    run: &crate::ensemble::EnsembleRun<2>,
    history: &ModeHistory,
    t: f64,
    seed: u64,
) -> Result<PowerRatio, CosmoError> {
    let ti = run.time_index(t)?;
    let values: Vec<f64> = run
        .positions_at(ti)
        .map(|q| q[0] * q[0] + q[1] * q[1])
        .collect();
    if values.is_empty() {
        return Err(CosmoError::Ensemble(EnsembleError::Empty));
    }
    let r = (2.0 * history.n_lev as f64 + 1.0).sqrt() + 8.0;
    let panels = (r).ceil() as usize;
    let rule = RuleNd::<2>::from_axes([
        Rule1d::composite(12, panels, -r, r),
        Rule1d::composite(12, panels, -r, r),
    ]);
    let mut born_moment = 0.0;
    let mut born_norm = 0.0;
    rule.for_each(|q, w| {
        let rho = history.sample(q, t).density;
        born_moment += w * rho * (q[0] * q[0] + q[1] * q[1]);
        born_norm += w * rho;
    });
    born_moment /= born_norm;
    let mean = stats::mean(&values);
    let mut rng = lane_stream(seed, Lane::Bootstrap, 0xc05);
    let sigma = stats::bootstrap_se(
        &values,
        crate::ensemble::BOOTSTRAP_RESAMPLES,
        &mut rng,
        stats::mean,
    );
    Ok(PowerRatio {
        xi: mean / born_moment,
        sigma_boot: sigma / born_moment,
        born_moment,
    })
}

/// Occupations of the instantaneous eigenbasis (Hermite functions of scale
/// `s = sqrt(m w) = a sqrt(k/a)`), for adiabatic diagnostics.
pub fn instantaneous_occupations(
    mode: &ModeOscillator,
    expansion: &Expansion,
) -> Vec<f64> {
    let a = expansion.scale_factor(mode.t);
    let scale = (a * a * mode.wavenumber).sqrt();
    let n = mode.n_lev;
    // 1D change-of-scale matrix T[m][j] = <phi^s_m | phi^ref_j> by
    // quadrature.
    let r = (2.0 * n as f64 + 1.0).sqrt() / scale.min(1.0) + 8.0;
    let rule = Rule1d::composite(14, (2.0 * r).ceil() as usize, -r, r);
    let mut t_mat = vec![0.0; n * n];
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let (ref_phi, _) = hermite_tables(x, n);
        let (scaled_phi, _) = hermite_tables(scale * x, n);
        for m in 0..n {
            let pm = scale.sqrt() * scaled_phi[m];
            for j in 0..n {
                t_mat[m * n + j] += w * pm * ref_phi[j];
            }
        }
    }
    // b[m1, m2] = sum_j1 j2 T[m1][j1] T[m2][j2] c[j1, j2].
    let mut out = vec![0.0; n * n];
    for m1 in 0..n {
        for m2 in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            for j1 in 0..n {
                for j2 in 0..n {
                    acc += t_mat[m1 * n + j1] * t_mat[m2 * n + j2]
                        * mode.coeffs[j1 * n + j2];
                }
            }
            out[m1 * n + m2] = acc.norm_sqr();
        }
    }
    out
}

/// Born density of a mode snapshot on the plane, usable for sampling.
pub struct ModeBorn<'a> {
    pub history: &'a ModeHistory,
    pub t: f64,
}

impl<'a> Density<2> for ModeBorn<'a> {
    fn density(&self, q: [f64; 2]) -> f64 {
        self.history.sample(q, self.t).density
    }

    fn support(&self) -> ([f64; 2], [f64; 2]) {
        let r = (2.0 * self.history.n_lev as f64 + 1.0).sqrt() + 6.0;
        ([-r, -r], [r, r])
    }
}

#[cfg(test)]
mod tests;
