//! Exact wave functions from analytic eigenbasis sums.
//!
//! A [`SpectralState`] is a finite superposition of eigenmodes of one of
//! three solvable one-particle Hamiltonians (units `hbar = 1`):
//!
//! - **box-sine**: infinite square well on `[0, L]` per axis, modes
//!   `sqrt(2/L) sin(n pi x / L)` with `n >= 1`;
//! - **ring-exponential**: periodic ring of circumference `C`, modes
//!   `exp(i 2 pi p x / C) / sqrt(C)` with integer `p`;
//! - **oscillator-hermite**: harmonic oscillator of reference frequency
//!   `omega`, Hermite functions, used both directly and as the fixed
//!   reference basis for the field-mode dynamics in [`crate::cosmo`].
//!
//! Time evolution multiplies each coefficient by `exp(-i E_n (t - t0))`, so
//! evaluation at any time is exact; gradients and Laplacians come from
//! analytic derivatives of the basis functions, never finite differences.
//!
//! The guidance velocity is `v = Im(grad psi / psi) / m`, which is
//! single-valued wherever `psi != 0`; the total phase itself is multivalued
//! and never stored. Near nodes the velocity is undefined and all guidance
//! entry points return [`SpectralError::NodeProximity`], leaving the remedy
//! (step shrinking, resampling) to the caller.

mod packet;

pub use packet::GaussianPacket;

use num_complex::Complex64 as C64;
use thiserror::Error;

/// Errors from state construction and wave evaluation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SpectralError {
    #[error("position {q:?} outside the basis domain")]
    OutsideDomain { q: Vec<f64> },
    #[error("density {density:.3e} at or below the node threshold {threshold:.3e}")]
    NodeProximity { density: f64, threshold: f64 },
    #[error("coefficients not normalized: sum |c|^2 = {norm}")]
    NotNormalized { norm: f64 },
    #[error("duplicate mode index {mode:?}")]
    DuplicateMode { mode: Vec<i32> },
    #[error("mode index {mode:?} invalid for this basis")]
    InvalidMode { mode: Vec<i32> },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("state has no terms")]
    Empty,
}

/// Basis family and geometry, identical on every axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Basis {
    /// Infinite square well on `[0, length]`.
    BoxSine { length: f64 },
    /// Periodic coordinate on `[0, circumference)`.
    RingExponential { circumference: f64 },
    /// Harmonic well of angular frequency `frequency` centred at the origin.
    OscillatorHermite { frequency: f64 },
}

/// Basis plus the particle mass (dimensionless, `hbar = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec {
    pub basis: Basis,
    pub mass: f64,
}

impl BasisSpec {
    pub fn validate(&self) -> Result<(), SpectralError> {
        if !(self.mass > 0.0) {
            return Err(SpectralError::InvalidGeometry(format!(
                "mass must be positive, got {}",
                self.mass
            )));
        }
        match self.basis {
            Basis::BoxSine { length } if !(length > 0.0) => Err(SpectralError::InvalidGeometry(
                format!("box length must be positive, got {length}"),
            )),
            Basis::RingExponential { circumference } if !(circumference > 0.0) => {
                Err(SpectralError::InvalidGeometry(format!(
                    "ring circumference must be positive, got {circumference}"
                )))
            }
            Basis::OscillatorHermite { frequency } if !(frequency > 0.0) => {
                Err(SpectralError::InvalidGeometry(format!(
                    "oscillator frequency must be positive, got {frequency}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Single-axis eigenvalue of the mode index `n`.
    pub fn axis_energy(&self, n: i32) -> f64 {
        match self.basis {
            Basis::BoxSine { length } => {
                let k = n as f64 * std::f64::consts::PI / length;
                k * k / (2.0 * self.mass)
            }
            Basis::RingExponential { circumference } => {
                let k = n as f64 * 2.0 * std::f64::consts::PI / circumference;
                k * k / (2.0 * self.mass)
            }
            Basis::OscillatorHermite { frequency } => frequency * (n as f64 + 0.5),
        }
    }

    fn valid_mode(&self, n: i32) -> bool {
        match self.basis {
            Basis::BoxSine { .. } => n >= 1,
            Basis::RingExponential { .. } => true,
            Basis::OscillatorHermite { .. } => n >= 0,
        }
    }
}

/// One axis of a configuration-space domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisDomain {
    /// Hard interval; the endpoints are nodal walls.
    Interval { lo: f64, hi: f64 },
    /// Periodic coordinate on `[0, period)`.
    Periodic { period: f64 },
    /// The whole real line.
    Line,
}

impl AxisDomain {
    pub fn contains(&self, x: f64) -> bool {
        match self {
            AxisDomain::Interval { lo, hi } => x >= *lo && x <= *hi,
            AxisDomain::Periodic { .. } | AxisDomain::Line => x.is_finite(),
        }
    }
}

/// The domain a wave function (and its trajectories) lives on; axes may
/// differ (a ring system coupled to a pointer on a line, say).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain<const D: usize> {
    pub axes: [AxisDomain; D],
}

impl<const D: usize> Domain<D> {
    pub fn uniform(axis: AxisDomain) -> Self {
        Domain { axes: [axis; D] }
    }

    pub fn contains(&self, q: [f64; D]) -> bool {
        (0..D).all(|d| self.axes[d].contains(q[d]))
    }

    /// Map a position to its canonical representative (wraps periodic axes).
    pub fn canonical(&self, mut q: [f64; D]) -> [f64; D] {
        for d in 0..D {
            if let AxisDomain::Periodic { period } = self.axes[d] {
                if q[d] < 0.0 || q[d] >= period {
                    q[d] = q[d].rem_euclid(period);
                }
            }
        }
        q
    }
}

/// Pointwise wave data: value, first derivatives, Laplacian, density.
#[derive(Debug, Clone, Copy)]
pub struct WaveSample<const D: usize> {
    pub value: C64,
    pub gradient: [C64; D],
    pub laplacian: C64,
    pub density: f64,
}

/// Pointwise guidance data: de Broglie velocity and quantum potential.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceSample<const D: usize> {
    pub velocity: [f64; D],
    pub quantum_potential: f64,
    pub density: f64,
}

/// Anything that can be evaluated as a pilot wave.
///
/// Implemented by [`SpectralState`] (eigenbasis sums) and
/// [`GaussianPacket`] (rigid or freely spreading packets, used for
/// apparatus pointers).
pub trait WaveField<const D: usize>: Sync {
    fn sample(&self, q: [f64; D], t: f64) -> WaveSample<D>;
    fn mass(&self) -> f64;
    fn domain(&self) -> Domain<D>;
    /// Densities at or below this threshold count as nodes.
    fn node_threshold(&self) -> f64;

    /// De Broglie velocity and quantum potential at `(q, t)`.
    fn guidance(&self, q: [f64; D], t: f64) -> Result<GuidanceSample<D>, SpectralError> {
        let w = self.sample(q, t);
        guidance_from_sample(&w, self.mass(), self.node_threshold())
    }
}

/// Velocity and quantum potential from a wave sample.
///
/// `v = Im(psi* grad psi) / (m |psi|^2)` and
/// `Q = -(1/2m) lap|psi| / |psi|`, with `lap|psi|` assembled from the
/// analytic value, gradient and Laplacian of `psi`:
/// `lap|psi|/|psi| = lap(rho)/(2 rho) - |grad rho|^2/(4 rho^2)` for
/// `rho = |psi|^2`.
pub fn guidance_from_sample<const D: usize>(
    w: &WaveSample<D>,
    mass: f64,
    node_threshold: f64,
) -> Result<GuidanceSample<D>, SpectralError> {
    let rho = w.density;
    if !(rho > node_threshold) {
        return Err(SpectralError::NodeProximity {
            density: rho,
            threshold: node_threshold,
        });
    }
    let conj = w.value.conj();
    let mut velocity = [0.0; D];
    let mut grad_rho_sq = 0.0;
    let mut lap_rho = 2.0 * (conj * w.laplacian).re;
    for d in 0..D {
        let cg = conj * w.gradient[d];
        velocity[d] = cg.im / (mass * rho);
        let drho = 2.0 * cg.re;
        grad_rho_sq += drho * drho;
        lap_rho += 2.0 * w.gradient[d].norm_sqr();
    }
    let lap_abs_over_abs = lap_rho / (2.0 * rho) - grad_rho_sq / (4.0 * rho * rho);
    Ok(GuidanceSample {
        velocity,
        quantum_potential: -lap_abs_over_abs / (2.0 * mass),
        density: rho,
    })
}

/// One eigenmode term of a superposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term<const D: usize> {
    pub mode: [i32; D],
    pub coeff: C64,
}

impl<const D: usize> Term<D> {
    pub fn new(mode: [i32; D], coeff: C64) -> Self {
        Term { mode, coeff }
    }
}

/// A normalized superposition of eigenmodes with exact time phases.
#[derive(Debug, Clone)]
pub struct SpectralState<const D: usize> {
    spec: BasisSpec,
    terms: Vec<Term<D>>,
    energies: Vec<f64>,
    t0: f64,
    // Distinct per-axis mode indices and each term's slot into them.
    axis_modes: [Vec<i32>; D],
    slots: Vec<[u16; D]>,
    node_threshold: f64,
}

impl<const D: usize> SpectralState<D> {
    /// Build a state, validating normalization and mode indices.
    pub fn new(spec: BasisSpec, terms: Vec<Term<D>>, t0: f64) -> Result<Self, SpectralError> {
        spec.validate()?;
        if terms.is_empty() {
            return Err(SpectralError::Empty);
        }
        let norm: f64 = terms.iter().map(|t| t.coeff.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(SpectralError::NotNormalized { norm });
        }
        for (i, t) in terms.iter().enumerate() {
            if t.mode.iter().any(|&n| !spec.valid_mode(n)) {
                return Err(SpectralError::InvalidMode {
                    mode: t.mode.to_vec(),
                });
            }
            if terms[..i].iter().any(|s| s.mode == t.mode) {
                return Err(SpectralError::DuplicateMode {
                    mode: t.mode.to_vec(),
                });
            }
        }
        let energies = terms
            .iter()
            .map(|t| t.mode.iter().map(|&n| spec.axis_energy(n)).sum())
            .collect();
        let mut axis_modes: [Vec<i32>; D] = std::array::from_fn(|_| Vec::new());
        for t in &terms {
            for d in 0..D {
                if !axis_modes[d].contains(&t.mode[d]) {
                    axis_modes[d].push(t.mode[d]);
                }
            }
        }
        for m in axis_modes.iter_mut() {
            m.sort_unstable();
        }
        let slots = terms
            .iter()
            .map(|t| {
                std::array::from_fn(|d| {
                    axis_modes[d].iter().position(|&n| n == t.mode[d]).unwrap() as u16
                })
            })
            .collect();
        let mut state = SpectralState {
            spec,
            terms,
            energies,
            t0,
            axis_modes,
            slots,
            node_threshold: 0.0,
        };
        state.node_threshold = 1e-12 / state.characteristic_volume();
        Ok(state)
    }

    /// Rescale coefficients to unit norm, then build.
    pub fn normalized(spec: BasisSpec, mut terms: Vec<Term<D>>, t0: f64) -> Result<Self, SpectralError> {
        let norm: f64 = terms.iter().map(|t| t.coeff.norm_sqr()).sum();
        if !(norm > 0.0) {
            return Err(SpectralError::Empty);
        }
        let s = norm.sqrt();
        for t in &mut terms {
            t.coeff /= s;
        }
        Self::new(spec, terms, t0)
    }

    /// A single eigenmode.
    pub fn eigenmode(spec: BasisSpec, mode: [i32; D]) -> Result<Self, SpectralError> {
        Self::new(spec, vec![Term::new(mode, C64::new(1.0, 0.0))], 0.0)
    }

    /// Equal-amplitude superposition of `modes` with the given phases.
    pub fn equal_superposition(
        spec: BasisSpec,
        modes: &[[i32; D]],
        phases: &[f64],
    ) -> Result<Self, SpectralError> {
        assert_eq!(modes.len(), phases.len());
        let amp = 1.0 / (modes.len() as f64).sqrt();
        let terms = modes
            .iter()
            .zip(phases)
            .map(|(&m, &ph)| Term::new(m, C64::from_polar(amp, ph)))
            .collect();
        Self::new(spec, terms, 0.0)
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn terms(&self) -> &[Term<D>] {
        &self.terms
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// The same physical state re-anchored at time `t`: phases are rolled
    /// into the coefficients and `t0` becomes `t`.
    pub fn at_time(&self, t: f64) -> Self {
        let dt = t - self.t0;
        let terms = self
            .terms
            .iter()
            .zip(&self.energies)
            .map(|(term, &e)| Term::new(term.mode, term.coeff * C64::from_polar(1.0, -e * dt)))
            .collect();
        SpectralState::new(self.spec, terms, t).expect("re-anchoring preserves validity")
    }

    /// Largest per-axis mode magnitude; sets quadrature orders.
    pub fn max_mode(&self) -> i32 {
        self.terms
            .iter()
            .flat_map(|t| t.mode.iter().map(|n| n.abs()))
            .max()
            .unwrap_or(0)
    }

    /// Domain the trajectories live on.
    pub fn domain(&self) -> Domain<D> {
        match self.spec.basis {
            Basis::BoxSine { length } => Domain::uniform(AxisDomain::Interval { lo: 0.0, hi: length }),
            Basis::RingExponential { circumference } => {
                Domain::uniform(AxisDomain::Periodic { period: circumference })
            }
            Basis::OscillatorHermite { .. } => Domain::uniform(AxisDomain::Line),
        }
    }

    /// Volume over which the unit of probability is spread, used to scale
    /// the node threshold. For the oscillator this is the classically
    /// allowed box of the highest occupied level.
    pub fn characteristic_volume(&self) -> f64 {
        match self.spec.basis {
            Basis::BoxSine { length } => length.powi(D as i32),
            Basis::RingExponential { circumference } => circumference.powi(D as i32),
            Basis::OscillatorHermite { frequency } => {
                let scale = (self.spec.mass * frequency).sqrt();
                let r = ((2.0 * self.max_mode() as f64 + 1.0).sqrt() + 4.0) / scale;
                (2.0 * r).powi(D as i32)
            }
        }
    }

    /// Integration bounds that capture the state to quadrature accuracy.
    pub fn quadrature_bounds(&self) -> ([f64; D], [f64; D]) {
        match self.spec.basis {
            Basis::BoxSine { length } => ([0.0; D], [length; D]),
            Basis::RingExponential { circumference } => ([0.0; D], [circumference; D]),
            Basis::OscillatorHermite { frequency } => {
                let scale = (self.spec.mass * frequency).sqrt();
                let r = ((2.0 * self.max_mode() as f64 + 1.0).sqrt() + 8.0) / scale;
                ([-r; D], [r; D])
            }
        }
    }

    /// Per-axis Gauss-Legendre order that integrates densities of this
    /// state to better than 1e-8 (normalization is asserted in tests).
    ///
    /// Box and ring integrands oscillate at most like `sin(n_max k x)^2`,
    /// so the order grows linearly with the largest mode index; the
    /// oscillator rule must also straddle the Gaussian tails.
    pub fn quadrature_order(&self) -> usize {
        let n = self.max_mode() as usize;
        match self.spec.basis {
            Basis::BoxSine { .. } | Basis::RingExponential { .. } => (4 * n + 16).max(24),
            Basis::OscillatorHermite { .. } => (4 * n + 32).max(32),
        }
    }

    /// Per-axis tables of `(u, u', u'')` for every distinct mode index at
    /// position `q`, by stable recurrences (no per-mode trig calls).
    fn axis_tables(&self, q: [f64; D]) -> [Vec<(C64, C64, C64)>; D] {
        std::array::from_fn(|d| {
            let modes = &self.axis_modes[d];
            let x = q[d];
            let mut out = Vec::with_capacity(modes.len());
            match self.spec.basis {
                Basis::BoxSine { length } => {
                    let kappa = std::f64::consts::PI / length;
                    let amp = (2.0 / length).sqrt();
                    let n_max = *modes.last().unwrap();
                    // z^n walks e^{i n kappa x} up the ladder.
                    let z1 = C64::from_polar(1.0, kappa * x);
                    let mut z = z1;
                    let mut by_n = Vec::with_capacity(n_max as usize);
                    for _ in 0..n_max {
                        by_n.push(z);
                        z *= z1;
                    }
                    for &n in modes {
                        let zn = by_n[(n - 1) as usize];
                        let k = n as f64 * kappa;
                        let u = amp * zn.im;
                        let du = amp * k * zn.re;
                        out.push((C64::new(u, 0.0), C64::new(du, 0.0), C64::new(-k * k * u, 0.0)));
                    }
                }
                Basis::RingExponential { circumference } => {
                    let kappa = 2.0 * std::f64::consts::PI / circumference;
                    let amp = 1.0 / circumference.sqrt();
                    let p_max = modes.iter().map(|p| p.abs()).max().unwrap();
                    let z1 = C64::from_polar(1.0, kappa * x);
                    let mut by_p = vec![C64::new(1.0, 0.0); (p_max + 1) as usize];
                    for p in 1..=p_max as usize {
                        by_p[p] = by_p[p - 1] * z1;
                    }
                    for &p in modes {
                        let zp = if p >= 0 {
                            by_p[p as usize]
                        } else {
                            by_p[(-p) as usize].conj()
                        };
                        let k = p as f64 * kappa;
                        let u = amp * zp;
                        let du = C64::new(0.0, k) * u;
                        out.push((u, du, C64::new(-k * k, 0.0) * u));
                    }
                }
                Basis::OscillatorHermite { frequency } => {
                    let scale = (self.spec.mass * frequency).sqrt();
                    let xi = scale * x;
                    let n_max = *modes.last().unwrap();
                    let table = hermite_ladder(xi, n_max as usize);
                    for &n in modes {
                        let n = n as usize;
                        let u = table[n];
                        let lower = if n == 0 { 0.0 } else { table[n - 1] };
                        // d/dxi phi_n = sqrt(2n) phi_{n-1} - xi phi_n.
                        let du_dxi = (2.0 * n as f64).sqrt() * lower - xi * u;
                        let ddu_dxi2 = (xi * xi - 2.0 * n as f64 - 1.0) * u;
                        out.push((
                            C64::new(u, 0.0),
                            C64::new(scale * du_dxi, 0.0),
                            C64::new(scale * scale * ddu_dxi2, 0.0),
                        ));
                    }
                }
            }
            out
        })
    }

    /// Exact wave sample at `(q, t)`.
    pub fn evaluate(&self, q: [f64; D], t: f64) -> Result<WaveSample<D>, SpectralError> {
        if !self.domain().contains(q) {
            return Err(SpectralError::OutsideDomain { q: q.to_vec() });
        }
        let q = self.domain().canonical(q);
        Ok(self.evaluate_unchecked(q, t))
    }

    pub(crate) fn evaluate_unchecked(&self, q: [f64; D], t: f64) -> WaveSample<D> {
        let tables = self.axis_tables(q);
        let dt = t - self.t0;
        let mut value = C64::new(0.0, 0.0);
        let mut gradient = [C64::new(0.0, 0.0); D];
        let mut laplacian = C64::new(0.0, 0.0);
        for ((term, slot), &energy) in self.terms.iter().zip(&self.slots).zip(&self.energies) {
            let phase = C64::from_polar(1.0, -energy * dt);
            let c = term.coeff * phase;
            let mut prod = c;
            for d in 0..D {
                prod *= tables[d][slot[d] as usize].0;
            }
            value += prod;
            for d in 0..D {
                let (u, du, ddu) = tables[d][slot[d] as usize];
                // Replace the axis-d factor by its first/second derivative.
                let mut g = c * du;
                let mut l = c * ddu;
                for e in 0..D {
                    if e != d {
                        let ue = tables[e][slot[e] as usize].0;
                        g *= ue;
                        l *= ue;
                    }
                }
                let _ = u;
                gradient[d] += g;
                laplacian += l;
            }
        }
        WaveSample {
            value,
            gradient,
            laplacian,
            density: value.norm_sqr(),
        }
    }

    /// Analytic `d psi / d t` at `(q, t)` (each term carries `-i E_n`).
    pub fn time_derivative(&self, q: [f64; D], t: f64) -> Result<C64, SpectralError> {
        if !self.domain().contains(q) {
            return Err(SpectralError::OutsideDomain { q: q.to_vec() });
        }
        let q = self.domain().canonical(q);
        let tables = self.axis_tables(q);
        let dt = t - self.t0;
        let mut out = C64::new(0.0, 0.0);
        for ((term, slot), &energy) in self.terms.iter().zip(&self.slots).zip(&self.energies) {
            let phase = C64::from_polar(1.0, -energy * dt);
            let mut prod = term.coeff * phase * C64::new(0.0, -energy);
            for d in 0..D {
                prod *= tables[d][slot[d] as usize].0;
            }
            out += prod;
        }
        Ok(out)
    }

    /// Tensor quadrature rule that integrates densities of this state to
    /// better than 1e-8. Box and ring states use a single Gauss-Legendre
    /// panel at the documented order; oscillator states use composite
    /// panels of about two ground-state widths so the Gaussian core is
    /// resolved.
    pub fn quadrature_rule(&self) -> crate::quadrature::RuleNd<D> {
        let (lo, hi) = self.quadrature_bounds();
        match self.spec.basis {
            Basis::BoxSine { .. } | Basis::RingExponential { .. } => {
                crate::quadrature::RuleNd::new(self.quadrature_order(), lo, hi)
            }
            Basis::OscillatorHermite { frequency } => {
                let scale = (self.spec.mass * frequency).sqrt();
                let panels = ((hi[0] - lo[0]) * scale / 2.0).ceil() as usize;
                let per_panel = 16 + 2 * ((2.0 * self.max_mode() as f64 + 1.0).sqrt().ceil() as usize);
                crate::quadrature::RuleNd::from_axes(std::array::from_fn(|d| {
                    crate::quadrature::Rule1d::composite(per_panel, panels.max(1), lo[d], hi[d])
                }))
            }
        }
    }

    /// Integral of the density over the domain by [`Self::quadrature_rule`];
    /// equals 1 to ~1e-8 for valid states.
    pub fn norm_quadrature(&self, t: f64) -> f64 {
        self.quadrature_rule()
            .integrate(|q| self.evaluate_unchecked(q, t).density)
    }
}

impl<const D: usize> WaveField<D> for SpectralState<D> {
    fn sample(&self, q: [f64; D], t: f64) -> WaveSample<D> {
        self.evaluate_unchecked(self.domain().canonical(q), t)
    }

    fn mass(&self) -> f64 {
        self.spec.mass
    }

    fn domain(&self) -> Domain<D> {
        self.domain()
    }

    fn node_threshold(&self) -> f64 {
        self.node_threshold
    }
}

/// Normalized Hermite-function ladder `phi_0..=phi_n` at `xi`
/// (unit mass and frequency; rescale outside).
fn hermite_ladder(xi: f64, n_max: usize) -> Vec<f64> {
    let mut table = Vec::with_capacity(n_max + 1);
    let phi0 = std::f64::consts::PI.powf(-0.25) * (-0.5 * xi * xi).exp();
    table.push(phi0);
    if n_max >= 1 {
        table.push(std::f64::consts::SQRT_2 * xi * phi0);
    }
    for n in 2..=n_max {
        let nf = n as f64;
        let next = (2.0 / nf).sqrt() * xi * table[n - 1] - ((nf - 1.0) / nf).sqrt() * table[n - 2];
        table.push(next);
    }
    table
}

/// De Broglie velocity of a two-component (spinor) wave:
/// `v = sum_s Im(psi_s* grad psi_s) / (m sum_s |psi_s|^2)`.
///
/// Reduces to single-component guidance when one component vanishes.
pub fn spinor_guidance<const D: usize>(
    up: &dyn WaveField<D>,
    down: &dyn WaveField<D>,
    q: [f64; D],
    t: f64,
) -> Result<[f64; D], SpectralError> {
    let wu = up.sample(q, t);
    let wd = down.sample(q, t);
    let rho = wu.density + wd.density;
    let threshold = up.node_threshold().max(down.node_threshold());
    if !(rho > threshold) {
        return Err(SpectralError::NodeProximity {
            density: rho,
            threshold,
        });
    }
    let mass = up.mass();
    let mut v = [0.0; D];
    for d in 0..D {
        let j = (wu.value.conj() * wu.gradient[d]).im + (wd.value.conj() * wd.gradient[d]).im;
        v[d] = j / (mass * rho);
    }
    Ok(v)
}
