//! The pointer model of quantum "measurement".
//!
//! An observable is "measured" by coupling the system coordinate `x` to an
//! apparatus pointer `y` through `H_I = a w(x, p) p_y`, with `a` large
//! enough that the coupling dominates. For an observable diagonal in the
//! system's eigenbasis the joint wave function stays in closed form:
//!
//! ```text
//! Psi(x, y, t) = sum_n c_n phi_n(x) g0(y - a w_n t),
//! ```
//!
//! a superposition of branches whose pointer packets drift apart at rates
//! set by the eigenvalues. Once branches separate, the configuration
//! `(x(t), y(t))` occupies exactly one of them, the system's effective
//! wave collapses to that branch's eigenspace projection, and the pointer
//! position records the outcome. In equilibrium the branch frequencies
//! reproduce the Born weights `|c_n|^2`; out of equilibrium they need not.
//!
//! The joint velocity field comes from the continuity equation of each
//! interaction Hamiltonian (plus the ordinary kinetic currents when free
//! evolution is on):
//!
//! - `H_I = a x p_y` (position):        `v_x = 0`, `v_y = a x`;
//! - `H_I = a p_x p_y` (momentum):      `v_x = a Im(Psi* dPsi/dy) / |Psi|^2`,
//!   `v_y = a Im(Psi* dPsi/dx) / |Psi|^2`;
//! - `H_I = a (p_x^2/2m) p_y` (kinetic energy):
//!   `v_x = (a/2m) Re(dPsi*/dx dPsi/dy - Psi* d2Psi/dxdy) / |Psi|^2`,
//!   `v_y = -(a/2m) Re(Psi* d2Psi/dx2) / |Psi|^2`.
//!
//! The kinetic current follows from writing `Re(Psi* d3Psi/dx2dy)` as a
//! total divergence,
//! `2 Re(Psi* Dxxy Psi) = dx[Re(Psi* Dxy Psi) - Re(DxPsi* Dy Psi)] + dy[Re(Psi* Dxx Psi)]`,
//! and the joint continuity equation is verified numerically in the test
//! suite, which pins the sign conventions. Observables of the quadratic
//! family `w = c0 + c1 p + c2 p^2` combine these currents linearly (the
//! continuity equation is linear in the Hamiltonian), which is what makes
//! basis-diagonal couplings concrete here.
//!
//! Subquantum measurement uses the position coupling for a short time with
//! a pointer ensemble drawn from a nonequilibrium distribution much
//! narrower than the pointer's quantum width: the pointer then reads `x`
//! to an accuracy far beyond the equilibrium limit, while the system wave
//! function is left essentially undisturbed.

use num_complex::Complex64 as C64;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ensemble::{sample_density, Density, DensitySpec, EnsembleError};
use crate::integrate::{
    integrate_flow, FieldError, Flow, IntegrateError, StepControl, TrajectoryPoint,
};
use crate::rng::{lane_stream, truncated_gaussian, Lane};
use crate::spectral::{
    spinor_guidance, AxisDomain, Basis, Domain, GaussianPacket, SpectralError, SpectralState,
    Term, WaveField,
};
use crate::stats;

#[derive(Debug, Clone, Error)]
pub enum MeasureError {
    #[error("observable incompatible with the system basis: {0}")]
    IncompatibleBasis(String),
    #[error("invalid setup: {0}")]
    InvalidSetup(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("packet separation {separation:.3} below {required} widths; outcome undeclared")]
    InsufficientSeparation { separation: f64, required: f64 },
}

/// Pointer coupling parameters. The pointer packet is a Gaussian of
/// density width `sigma` centred at 0; with `coupling_dominates` (the
/// default) all free evolution is switched off for the duration.
#[derive(Debug, Clone, Copy)]
pub struct PointerSetup {
    pub coupling: f64,
    pub sigma: f64,
    pub duration: f64,
    pub coupling_dominates: bool,
}

impl PointerSetup {
    pub fn new(coupling: f64, sigma: f64, duration: f64) -> Self {
        PointerSetup {
            coupling,
            sigma,
            duration,
            coupling_dominates: true,
        }
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        if !(self.coupling > 0.0 && self.sigma > 0.0 && self.duration > 0.0) {
            return Err(MeasureError::InvalidSetup(format!(
                "coupling, width and duration must be positive, got a={} sigma={} T={}",
                self.coupling, self.sigma, self.duration
            )));
        }
        Ok(())
    }
}

/// What gets coupled to the pointer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observable {
    /// `w = x`: the one case that reads off a pre-existing property.
    Position,
    /// `w = p`: ring basis only.
    Momentum,
    /// `w = p^2 / 2m`: ring or box basis.
    KineticEnergy,
    /// `w = c0 + c1 p + c2 p^2`, diagonal on the basis modes
    /// (`c1 = 0` required on the box, whose modes are standing waves).
    BasisDiagonal { c0: f64, c1: f64, c2: f64 },
}

impl Observable {
    fn check_basis(&self, state: &SpectralState<1>) -> Result<(), MeasureError> {
        let basis = state.spec().basis;
        match self {
            Observable::Position => match basis {
                Basis::OscillatorHermite { .. } => Err(MeasureError::IncompatibleBasis(
                    "the pointer model supports box and ring systems".into(),
                )),
                _ => Ok(()),
            },
            Observable::Momentum => match basis {
                Basis::RingExponential { .. } => Ok(()),
                _ => Err(MeasureError::IncompatibleBasis(
                    "momentum measurements need plane-wave (ring) modes".into(),
                )),
            },
            Observable::KineticEnergy => match basis {
                Basis::RingExponential { .. } | Basis::BoxSine { .. } => Ok(()),
                _ => Err(MeasureError::IncompatibleBasis(
                    "kinetic-energy measurements need box or ring modes".into(),
                )),
            },
            Observable::BasisDiagonal { c1, .. } => match basis {
                Basis::RingExponential { .. } => Ok(()),
                Basis::BoxSine { .. } if *c1 == 0.0 => Ok(()),
                Basis::BoxSine { .. } => Err(MeasureError::IncompatibleBasis(
                    "odd-in-p observables are not diagonal on box modes".into(),
                )),
                Basis::OscillatorHermite { .. } => Err(MeasureError::IncompatibleBasis(
                    "the pointer model supports box and ring systems".into(),
                )),
            },
        }
    }

    /// Signed wavenumber of the mode with index `n`.
    fn wavenumber(state: &SpectralState<1>, n: i32) -> f64 {
        match state.spec().basis {
            Basis::RingExponential { circumference } => {
                n as f64 * 2.0 * std::f64::consts::PI / circumference
            }
            Basis::BoxSine { length } => n as f64 * std::f64::consts::PI / length,
            Basis::OscillatorHermite { .. } => unreachable!("checked at construction"),
        }
    }

    /// Eigenvalue on the mode with index `n`, or `None` for the
    /// continuous-spectrum position coupling.
    fn eigenvalue(&self, state: &SpectralState<1>, n: i32) -> Option<f64> {
        let k = Self::wavenumber(state, n);
        let m = state.spec().mass;
        match self {
            Observable::Position => None,
            Observable::Momentum => Some(k),
            Observable::KineticEnergy => Some(k * k / (2.0 * m)),
            Observable::BasisDiagonal { c0, c1, c2 } => Some(c0 + c1 * k + c2 * k * k),
        }
    }

    /// Decomposition `w = c0 + c1 p + c2' (p^2/2m)` driving the currents.
    fn current_weights(&self, mass: f64) -> (f64, f64, f64) {
        match self {
            Observable::Position => (0.0, 0.0, 0.0),
            Observable::Momentum => (0.0, 1.0, 0.0),
            Observable::KineticEnergy => (0.0, 0.0, 1.0),
            Observable::BasisDiagonal { c0, c1, c2 } => (*c0, *c1, 2.0 * mass * c2),
        }
    }
}

/// The coupled system-pointer state in closed form.
#[derive(Debug, Clone)]
pub struct JointState {
    system: SpectralState<1>,
    observable: Observable,
    setup: PointerSetup,
    /// Branch eigenvalues per system term (empty for position coupling).
    omegas: Vec<f64>,
}

/// Joint wave value and the partial derivatives the currents need.
#[derive(Debug, Clone, Copy)]
pub struct JointPartials {
    pub value: C64,
    pub dx: C64,
    pub dy: C64,
    pub dxx: C64,
    pub dxy: C64,
    /// Analytic time derivative (used by the continuity checks).
    pub dt: C64,
}

impl JointState {
    pub fn new(
        system: SpectralState<1>,
        observable: Observable,
        setup: PointerSetup,
    ) -> Result<Self, MeasureError> {
        setup.validate()?;
        observable.check_basis(&system)?;
        if matches!(observable, Observable::Position) && !setup.coupling_dominates {
            return Err(MeasureError::InvalidSetup(
                "the position coupling is exact only while the coupling dominates".into(),
            ));
        }
        let omegas = if matches!(observable, Observable::Position) {
            Vec::new()
        } else {
            system
                .terms()
                .iter()
                .map(|t| observable.eigenvalue(&system, t.mode[0]).expect("diagonal"))
                .collect()
        };
        Ok(JointState {
            system,
            observable,
            setup,
            omegas,
        })
    }

    pub fn system(&self) -> &SpectralState<1> {
        &self.system
    }

    pub fn setup(&self) -> &PointerSetup {
        &self.setup
    }

    pub fn observable(&self) -> Observable {
        self.observable
    }

    /// Pointer packet value/derivatives for branch drift `u` at `(y, t)`:
    /// rigid under a dominating coupling, freely spreading otherwise.
    fn packet_vgl(&self, u: f64, y: f64, t: f64) -> (C64, C64, C64) {
        if self.setup.coupling_dominates {
            GaussianPacket::pointer(0.0, self.setup.sigma).value_grad_lap(y - u * t, 0.0)
        } else {
            GaussianPacket::free(0.0, self.setup.sigma, u, 1.0).value_grad_lap(y, t)
        }
    }

    /// Branch pointer centres at time `t`, one per system term
    /// (position coupling has none).
    pub fn branch_centers(&self, t: f64) -> Vec<f64> {
        self.omegas
            .iter()
            .map(|w| self.setup.coupling * w * t)
            .collect()
    }

    /// Distinct outcomes sorted ascending, each with the indices of the
    /// system terms spanning its eigenspace.
    pub fn branches(&self) -> Vec<(f64, Vec<usize>)> {
        let mut out: Vec<(f64, Vec<usize>)> = Vec::new();
        for (i, &w) in self.omegas.iter().enumerate() {
            if let Some(entry) = out.iter_mut().find(|(v, _)| (v - w).abs() < 1e-9) {
                entry.1.push(i);
            } else {
                out.push((w, vec![i]));
            }
        }
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        out
    }

    /// Smallest gap between adjacent distinct pointer centres at the end
    /// of the interaction, in pointer widths (infinite for one branch).
    pub fn separation_ratio(&self) -> f64 {
        let branches = self.branches();
        if branches.len() < 2 {
            return f64::INFINITY;
        }
        let mut min_gap = f64::INFINITY;
        for pair in branches.windows(2) {
            min_gap = min_gap.min((pair[1].0 - pair[0].0).abs());
        }
        self.setup.coupling * min_gap * self.setup.duration / self.setup.sigma
    }

    /// Exact joint wave value and partials at `(x, y, t)`.
    pub fn partials(&self, x: f64, y: f64, t: f64) -> JointPartials {
        let a = self.setup.coupling;
        if let Observable::Position = self.observable {
            // Psi = psi0(x) g0(y - a x t): the pointer centre tracks x.
            let w = self.system.sample([x], self.system.t0());
            let arg = y - a * x * t;
            let (g, gp, gpp) =
                GaussianPacket::pointer(0.0, self.setup.sigma).value_grad_lap(arg, 0.0);
            let value = w.value * g;
            let dx = w.gradient[0] * g - w.value * gp * (a * t);
            let dy = w.value * gp;
            let dxx = w.laplacian * g - 2.0 * w.gradient[0] * gp * (a * t)
                + w.value * gpp * (a * t) * (a * t);
            let dxy = w.gradient[0] * gp - w.value * gpp * (a * t);
            let dt = -w.value * gp * (a * x);
            return JointPartials { value, dx, dy, dxx, dxy, dt };
        }
        let free = !self.setup.coupling_dominates;
        let mut p = JointPartials {
            value: C64::new(0.0, 0.0),
            dx: C64::new(0.0, 0.0),
            dy: C64::new(0.0, 0.0),
            dxx: C64::new(0.0, 0.0),
            dxy: C64::new(0.0, 0.0),
            dt: C64::new(0.0, 0.0),
        };
        for ((term, &energy), &w) in self
            .system
            .terms()
            .iter()
            .zip(self.system.energies())
            .zip(&self.omegas)
        {
            let mode = single_mode_vgl(&self.system, term.mode[0], x);
            let phase = if free {
                C64::from_polar(1.0, -energy * (t - self.system.t0()))
            } else {
                C64::new(1.0, 0.0)
            };
            let c = term.coeff * phase;
            let (g, gp, _) = self.packet_vgl(a * w, y, t);
            p.value += c * mode.0 * g;
            p.dx += c * mode.1 * g;
            p.dy += c * mode.0 * gp;
            p.dxx += c * mode.2 * g;
            p.dxy += c * mode.1 * gp;
            // Rigid branch: the centre moves at a w; free evolution adds
            // the system phase rate and the packet's own spreading, the
            // latter via i d/dt g = -(1/2) d2g/dy2 + a w (-i d/dy) g.
            let mut dt_term = -c * mode.0 * gp * (a * w);
            if free {
                let (_, _, gpp) = self.packet_vgl(a * w, y, t);
                dt_term = C64::new(0.0, -energy) * c * mode.0 * g
                    + c * mode.0
                        * (C64::new(0.0, 0.5) * gpp - C64::new(a * w, 0.0) * gp);
            }
            p.dt += dt_term;
        }
        p
    }

    /// Joint density at `(x, y, t)`.
    pub fn density(&self, x: f64, y: f64, t: f64) -> f64 {
        self.partials(x, y, t).value.norm_sqr()
    }

    /// Joint de Broglie velocity `(v_x, v_y)` from the continuity current.
    pub fn velocity(&self, x: f64, y: f64, t: f64) -> Result<[f64; 2], FieldError> {
        let a = self.setup.coupling;
        if let Observable::Position = self.observable {
            return Ok([0.0, a * x]);
        }
        let p = self.partials(x, y, t);
        let rho = p.value.norm_sqr();
        if !(rho > self.node_threshold()) {
            return Err(FieldError::Node { density: rho });
        }
        let m = self.system.spec().mass;
        let (c0, c1, c2) = self.observable.current_weights(m);
        let conj = p.value.conj();
        let mut jx = 0.0;
        let mut jy = c0 * a * rho;
        if c1 != 0.0 {
            jx += c1 * a * (conj * p.dy).im;
            jy += c1 * a * (conj * p.dx).im;
        }
        if c2 != 0.0 {
            jx += c2 * a / (2.0 * m) * ((p.dx.conj() * p.dy).re - (conj * p.dxy).re);
            jy -= c2 * a / (2.0 * m) * (conj * p.dxx).re;
        }
        if !self.setup.coupling_dominates {
            // Free kinetic currents of system and pointer (unit pointer mass).
            jx += (conj * p.dx).im / m;
            jy += (conj * p.dy).im;
        }
        Ok([jx / rho, jy / rho])
    }

    fn node_threshold(&self) -> f64 {
        // Joint characteristic volume: system volume times a few pointer
        // widths.
        1e-12 / (self.system.characteristic_volume() * 8.0 * self.setup.sigma)
    }

    fn joint_domain(&self) -> Domain<2> {
        Domain {
            axes: [self.system.domain().axes[0], AxisDomain::Line],
        }
    }
}

/// Bare mode value, gradient, second derivative for one term.
fn single_mode_vgl(state: &SpectralState<1>, n: i32, x: f64) -> (C64, C64, C64) {
    match state.spec().basis {
        Basis::BoxSine { length } => {
            let k = n as f64 * std::f64::consts::PI / length;
            let amp = (2.0 / length).sqrt();
            let u = amp * (k * x).sin();
            (
                C64::new(u, 0.0),
                C64::new(amp * k * (k * x).cos(), 0.0),
                C64::new(-k * k * u, 0.0),
            )
        }
        Basis::RingExponential { circumference } => {
            let k = n as f64 * 2.0 * std::f64::consts::PI / circumference;
            let amp = 1.0 / circumference.sqrt();
            let u = amp * C64::from_polar(1.0, k * x);
            (u, C64::new(0.0, k) * u, C64::new(-k * k, 0.0) * u)
        }
        Basis::OscillatorHermite { .. } => unreachable!("checked at construction"),
    }
}

struct JointFlow<'a> {
    joint: &'a JointState,
}

impl<'a> Flow<2> for JointFlow<'a> {
    fn velocity(&self, t: f64, q: [f64; 2]) -> Result<[f64; 2], FieldError> {
        self.joint.velocity(q[0], q[1], t)
    }

    fn domain(&self) -> Domain<2> {
        self.joint.joint_domain()
    }

    fn node_ratio(&self, t: f64, q: [f64; 2]) -> f64 {
        if matches!(self.joint.observable, Observable::Position) {
            return f64::INFINITY;
        }
        self.joint.density(q[0], q[1], t) / self.joint.node_threshold()
    }
}

/// Verdict of a single pointer experiment.
#[derive(Debug, Clone)]
pub struct BranchRecord {
    /// Index into [`JointState::branches`] of the occupied branch.
    pub branch: Option<usize>,
    /// Eigenvalue of the occupied branch; for the position coupling, the
    /// pointer estimate `y_T / (a T)`.
    pub outcome: Option<f64>,
    pub pointer_reading: f64,
    /// Eigenspace projection of the system state that guides it after the
    /// branches separate.
    pub effective_state: Option<SpectralState<1>>,
    pub separation_ratio: f64,
    pub collapse_declared: bool,
}

/// Branch separation (in pointer widths) required to declare collapse.
pub const SEPARATION_THRESHOLD: f64 = 5.0;

/// Run one pointer experiment from `(q0, y0)`.
pub fn run_pointer(
    system: &SpectralState<1>,
    observable: Observable,
    setup: &PointerSetup,
    q0: f64,
    y0: f64,
    ctrl: &StepControl,
) -> Result<(Vec<TrajectoryPoint<2>>, BranchRecord), MeasureError> {
    let joint = JointState::new(system.clone(), observable, *setup)?;
    let samples: Vec<f64> = (0..=32)
        .map(|i| setup.duration * i as f64 / 32.0)
        .collect();
    let flow = JointFlow { joint: &joint };
    let path = integrate_flow(&flow, [q0, y0], 0.0, setup.duration, ctrl, &samples)?;
    let record = classify(&joint, &path);
    Ok((path, record))
}

fn classify(joint: &JointState, path: &[TrajectoryPoint<2>]) -> BranchRecord {
    let end = path.last().expect("nonempty trajectory");
    let y_t = end.q[1];
    if matches!(joint.observable, Observable::Position) {
        let estimate = y_t / (joint.setup.coupling * joint.setup.duration);
        return BranchRecord {
            branch: None,
            outcome: Some(estimate),
            pointer_reading: y_t,
            effective_state: None,
            separation_ratio: 0.0,
            collapse_declared: false,
        };
    }
    let ratio = joint.separation_ratio();
    let branches = joint.branches();
    if ratio < SEPARATION_THRESHOLD {
        return BranchRecord {
            branch: None,
            outcome: None,
            pointer_reading: y_t,
            effective_state: None,
            separation_ratio: ratio,
            collapse_declared: false,
        };
    }
    // The nearest branch centre at the final time claims the configuration.
    let a = joint.setup.coupling;
    let t = end.t;
    let (idx, (omega, members)) = branches
        .iter()
        .enumerate()
        .min_by(|(_, (wa, _)), (_, (wb, _))| {
            let da = (y_t - a * wa * t).abs();
            let db = (y_t - a * wb * t).abs();
            da.partial_cmp(&db).unwrap()
        })
        .map(|(i, b)| (i, b.clone()))
        .expect("at least one branch");
    let terms: Vec<Term<1>> = members.iter().map(|&i| joint.system.terms()[i]).collect();
    let effective =
        SpectralState::normalized(*joint.system.spec(), terms, joint.system.t0()).ok();
    BranchRecord {
        branch: Some(idx),
        outcome: Some(omega),
        pointer_reading: y_t,
        effective_state: effective,
        separation_ratio: ratio,
        collapse_declared: true,
    }
}

/// How the pointer coordinate is distributed initially.
#[derive(Debug, Clone, Copy)]
pub enum PointerDensity {
    /// The quantum (Born) distribution `|g0|^2`.
    Born,
    /// Nonequilibrium: a Gaussian of width `width` truncated at
    /// `cut * width`, regardless of the quantum width.
    TruncatedGaussian { width: f64, cut: f64 },
    /// Uniform on an interval.
    UniformOn { lo: f64, hi: f64 },
}

impl PointerDensity {
    fn draw(&self, rng: &mut impl Rng, sigma: f64) -> f64 {
        match self {
            PointerDensity::Born => rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma,
            PointerDensity::TruncatedGaussian { width, cut } => {
                truncated_gaussian(rng, *width, *cut)
            }
            PointerDensity::UniformOn { lo, hi } => rng.gen_range(*lo..*hi),
        }
    }
}

/// One trial of an ensemble experiment.
#[derive(Debug, Clone)]
pub struct Trial {
    pub q0: f64,
    pub y0: f64,
    /// `None` when the trajectory trapped and was excluded.
    pub record: Option<BranchRecord>,
}

/// Outcome frequencies over an ensemble of pointer experiments.
#[derive(Debug, Clone)]
pub struct OutcomeStats {
    pub trials: Vec<Trial>,
    /// (eigenvalue, count) sorted by eigenvalue.
    pub counts: Vec<(f64, usize)>,
    pub undeclared: usize,
    pub trapped: usize,
}

impl OutcomeStats {
    pub fn n(&self) -> usize {
        self.trials.len()
    }

    pub fn frequency(&self, omega: f64) -> f64 {
        let count = self
            .counts
            .iter()
            .find(|(w, _)| (w - omega).abs() < 1e-9)
            .map(|(_, c)| *c)
            .unwrap_or(0);
        count as f64 / self.n() as f64
    }

    /// Binomial standard error of the frequency of `omega`.
    pub fn binomial_sigma(&self, omega: f64) -> f64 {
        let f = self.frequency(omega);
        (f * (1.0 - f) / self.n() as f64).sqrt()
    }
}

/// Run `n` pointer experiments with initial conditions drawn from
/// `system_density` x `pointer_density`.
pub fn ensemble_outcomes(
    system: &SpectralState<1>,
    observable: Observable,
    setup: &PointerSetup,
    system_density: &DensitySpec<1>,
    pointer_density: PointerDensity,
    n: usize,
    seed: u64,
    ctrl: &StepControl,
) -> Result<OutcomeStats, MeasureError> {
    system_density.validate()?;
    let joint = JointState::new(system.clone(), observable, *setup)?;
    let flow = JointFlow { joint: &joint };
    let (lo, hi) = system_density.support();
    let envelope = envelope_for(system_density);
    let samples = [setup.duration];
    let trials: Vec<Trial> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = lane_stream(seed, Lane::Sample, i as u64);
            let q0 = draw_from(&mut rng, system_density, lo, hi, envelope);
            let y0 = pointer_density.draw(&mut rng, setup.sigma);
            let record = integrate_flow(&flow, [q0, y0], 0.0, setup.duration, ctrl, &samples)
                .ok()
                .map(|path| classify(&joint, &path));
            Trial { q0, y0, record }
        })
        .collect();
    let mut counts: Vec<(f64, usize)> = Vec::new();
    let mut undeclared = 0;
    let mut trapped = 0;
    for trial in &trials {
        match &trial.record {
            None => trapped += 1,
            Some(r) if !r.collapse_declared => undeclared += 1,
            Some(r) => {
                let w = r.outcome.expect("declared collapse carries an outcome");
                if let Some(entry) = counts.iter_mut().find(|(v, _)| (v - w).abs() < 1e-9) {
                    entry.1 += 1;
                } else {
                    counts.push((w, 1));
                }
            }
        }
    }
    counts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(OutcomeStats {
        trials,
        counts,
        undeclared,
        trapped,
    })
}

fn envelope_for(density: &DensitySpec<1>) -> f64 {
    let (lo, hi) = density.support();
    let res = 4096;
    let mut max = 0.0_f64;
    for i in 0..res {
        let q = lo[0] + (hi[0] - lo[0]) * (i as f64 + 0.5) / res as f64;
        max = max.max(density.density([q]));
    }
    1.05 * max
}

fn draw_from(
    rng: &mut impl Rng,
    density: &DensitySpec<1>,
    lo: [f64; 1],
    hi: [f64; 1],
    envelope: f64,
) -> f64 {
    loop {
        let q = rng.gen_range(lo[0]..hi[0]);
        if rng.gen_range(0.0..envelope) < density.density([q]) {
            return q;
        }
    }
}

/// Result of a subquantum position-measurement session.
#[derive(Debug, Clone)]
pub struct SubquantumResult {
    /// Per-trial (true position, estimate).
    pub trials: Vec<(f64, f64)>,
    pub mean_abs_error: f64,
    /// `1 - |<psi0|psi_after>|`, averaged over trials, with `psi_after`
    /// the pointer-conditioned wave function after the interaction.
    pub disturbance: f64,
}

/// Estimate particle positions by briefly coupling to a pointer whose
/// initial ensemble has nonequilibrium spread `w` (usually far below the
/// quantum width `sigma`), reading `x_est = y_T / (a dt)`.
pub fn subquantum_measure(
    system: &SpectralState<1>,
    sigma: f64,
    noneq_width: f64,
    coupling: f64,
    duration: f64,
    n: usize,
    seed: u64,
) -> Result<SubquantumResult, MeasureError> {
    if !(noneq_width > 0.0 && noneq_width <= sigma) {
        return Err(MeasureError::InvalidSetup(format!(
            "nonequilibrium width must satisfy 0 < w <= sigma, got w={noneq_width} sigma={sigma}"
        )));
    }
    let setup = PointerSetup::new(coupling, sigma, duration);
    let joint = JointState::new(system.clone(), Observable::Position, setup)?;
    let positions = sample_density(&DensitySpec::BornOf(system.clone()), n, seed)?;
    let a_dt = coupling * duration;
    let g0 = GaussianPacket::pointer(0.0, sigma);
    let rule = system.quadrature_rule();
    let t0 = joint.system.t0();
    let trials: Vec<(f64, f64, f64)> = positions
        .par_iter()
        .enumerate()
        .map(|(i, &[x0])| {
            let mut rng = lane_stream(seed, Lane::Aux, i as u64);
            let y0 = truncated_gaussian(&mut rng, noneq_width, 3.0);
            // Under the position coupling x stays put and the pointer
            // reads y0 + a x0 dt exactly.
            let y_t = y0 + a_dt * x0;
            let estimate = y_t / a_dt;
            // Pointer-conditioned wave after the interaction:
            // psi_after(x) ~ psi0(x) g0(y_T - a x dt).
            let mut overlap = C64::new(0.0, 0.0);
            let mut norm_after = 0.0;
            rule.for_each(|q, wgt| {
                let w = joint.system.sample(q, t0);
                let (g, _, _) = g0.value_grad_lap(y_t - a_dt * q[0], 0.0);
                let after = w.value * g;
                overlap += wgt * w.value.conj() * after;
                norm_after += wgt * after.norm_sqr();
            });
            let fidelity = overlap.norm() / norm_after.sqrt();
            (x0, estimate, 1.0 - fidelity)
        })
        .collect();
    let errors: Vec<f64> = trials.iter().map(|(x, e, _)| (e - x).abs()).collect();
    let disturbances: Vec<f64> = trials.iter().map(|(_, _, d)| *d).collect();
    Ok(SubquantumResult {
        trials: trials.iter().map(|(x, e, _)| (*x, *e)).collect(),
        mean_abs_error: stats::mean(&errors),
        disturbance: stats::mean(&disturbances),
    })
}

/// Verdict of a Stern-Gerlach run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SgOutcome {
    Up,
    Down,
}

/// The one-dimensional Bell model of a Stern-Gerlach "spin measurement".
///
/// The particle carries no spin variable at all: it is guided by a
/// two-component wave whose components receive opposite impulsive momentum
/// kicks (drift velocities `+-kick`) and then separate as free packets.
/// The side the trajectory ends on decides the recorded "spin",
/// deterministically in the initial position.
#[derive(Debug, Clone)]
pub struct SternGerlach {
    pub up: GaussianPacket,
    pub down: GaussianPacket,
    pub kick: f64,
    pub t_end: f64,
}

impl SternGerlach {
    pub fn new(
        c_up: C64,
        c_down: C64,
        packet_width: f64,
        kick: f64,
        t_end: f64,
    ) -> Result<Self, MeasureError> {
        let norm = c_up.norm_sqr() + c_down.norm_sqr();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(MeasureError::InvalidSetup(format!(
                "spinor amplitudes must be normalized, got |c+|^2 + |c-|^2 = {norm}"
            )));
        }
        if !(packet_width > 0.0 && kick > 0.0 && t_end > 0.0) {
            return Err(MeasureError::InvalidSetup(
                "packet width, kick and duration must be positive".into(),
            ));
        }
        let up = GaussianPacket::free(0.0, packet_width, kick, 1.0).with_weight(c_up);
        let down = GaussianPacket::free(0.0, packet_width, -kick, 1.0).with_weight(c_down);
        Ok(SternGerlach {
            up,
            down,
            kick,
            t_end,
        })
    }

    /// Packet separation at `t_end` in units of the (spread) width.
    pub fn separation_ratio(&self) -> f64 {
        2.0 * self.kick * self.t_end / self.up.width_at(self.t_end)
    }

    /// Run a single trajectory from `z0`.
    pub fn run(
        &self,
        z0: f64,
        ctrl: &StepControl,
    ) -> Result<(Vec<TrajectoryPoint<1>>, SgOutcome), MeasureError> {
        let ratio = self.separation_ratio();
        if ratio < SEPARATION_THRESHOLD {
            return Err(MeasureError::InsufficientSeparation {
                separation: ratio,
                required: SEPARATION_THRESHOLD,
            });
        }
        struct SgFlow<'a>(&'a SternGerlach);
        impl<'a> Flow<1> for SgFlow<'a> {
            fn velocity(&self, t: f64, q: [f64; 1]) -> Result<[f64; 1], FieldError> {
                if self.0.up.weight.norm_sqr() == 0.0 {
                    return Ok(self.0.down.guidance(q, t).map(|g| g.velocity)?);
                }
                if self.0.down.weight.norm_sqr() == 0.0 {
                    return Ok(self.0.up.guidance(q, t).map(|g| g.velocity)?);
                }
                Ok(spinor_guidance(&self.0.up, &self.0.down, q, t)?)
            }
            fn domain(&self) -> Domain<1> {
                Domain::uniform(AxisDomain::Line)
            }
        }
        let samples: Vec<f64> = (0..=16).map(|i| self.t_end * i as f64 / 16.0).collect();
        let path = integrate_flow(&SgFlow(self), [z0], 0.0, self.t_end, ctrl, &samples)?;
        let z_t = path.last().unwrap().q[0];
        let up_c = self.up.center_at(self.t_end);
        let down_c = self.down.center_at(self.t_end);
        let outcome = if (z_t - up_c).abs() <= (z_t - down_c).abs() {
            SgOutcome::Up
        } else {
            SgOutcome::Down
        };
        Ok((path, outcome))
    }

    /// Equilibrium ensemble: initial positions Born-distributed in the
    /// shared initial packet.
    pub fn ensemble(&self, n: usize, seed: u64, ctrl: &StepControl) -> SgStats {
        let width = self.up.width;
        let trials: Vec<(f64, Option<SgOutcome>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = lane_stream(seed, Lane::Sample, i as u64);
                let z0: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * width;
                (z0, self.run(z0, ctrl).ok().map(|(_, o)| o))
            })
            .collect();
        let up = trials
            .iter()
            .filter(|(_, r)| matches!(r, Some(SgOutcome::Up)))
            .count();
        let down = trials
            .iter()
            .filter(|(_, r)| matches!(r, Some(SgOutcome::Down)))
            .count();
        SgStats {
            n,
            up,
            down,
            failed: n - up - down,
            trials,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgStats {
    pub n: usize,
    pub up: usize,
    pub down: usize,
    pub failed: usize,
    pub trials: Vec<(f64, Option<SgOutcome>)>,
}

impl SgStats {
    pub fn up_frequency(&self) -> f64 {
        self.up as f64 / self.n as f64
    }

    pub fn binomial_sigma(&self) -> f64 {
        let f = self.up_frequency();
        (f * (1.0 - f) / self.n as f64).sqrt()
    }
}
