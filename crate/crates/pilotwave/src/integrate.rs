//! Adaptive trajectory integration.
//!
//! De Broglie's law `dq/dt = v(q, t)` is integrated with an embedded
//! Dormand-Prince 5(4) pair: PI step-size control, fourth-order dense output
//! at requested sample times, and a node guard that rejects steps predicted
//! to land where the pilot-wave density is too small for the velocity to be
//! evaluable. Bohm's second-order law `m d2q/dt2 = -grad(V + Q)` is
//! integrated as a first-order system in `(q, p)` over the same core.
//!
//! Trajectories are deterministic: the same inputs (including the step
//! control) produce bit-identical output on any platform with IEEE-754
//! semantics, regardless of what else is running concurrently.

use thiserror::Error;

use crate::spectral::{AxisDomain, Basis, Domain, SpectralError, SpectralState, WaveField};

/// Reasons a velocity-field evaluation can fail mid-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldError {
    /// Density at or below the node threshold.
    Node { density: f64 },
    /// Left the domain by more than rounding error.
    OutsideDomain,
}

impl From<SpectralError> for FieldError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::NodeProximity { density, .. } => FieldError::Node { density },
            _ => FieldError::OutsideDomain,
        }
    }
}

/// A time-dependent velocity field that trajectories follow.
pub trait Flow<const D: usize>: Sync {
    fn velocity(&self, t: f64, q: [f64; D]) -> Result<[f64; D], FieldError>;

    fn domain(&self) -> Domain<D>;

    /// Ratio of the density at `(t, q)` to the node threshold, used by the
    /// predictive node guard. Flows without a meaningful density return
    /// infinity.
    fn node_ratio(&self, t: f64, q: [f64; D]) -> f64 {
        let _ = (t, q);
        f64::INFINITY
    }
}

/// De Broglie guidance of a spectral state as a [`Flow`].
pub struct DeBroglieFlow<'a, const D: usize> {
    pub state: &'a SpectralState<D>,
}

impl<'a, const D: usize> Flow<D> for DeBroglieFlow<'a, D> {
    fn velocity(&self, t: f64, q: [f64; D]) -> Result<[f64; D], FieldError> {
        Ok(self.state.guidance(q, t)?.velocity)
    }

    fn domain(&self) -> Domain<D> {
        self.state.domain()
    }

    fn node_ratio(&self, t: f64, q: [f64; D]) -> f64 {
        let w = self.state.sample(q, t);
        w.density / self.state.node_threshold()
    }
}

/// Step-size and node-guard policy.
#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    /// Smallest admissible |step|; underflow aborts the trajectory.
    pub dt_min: f64,
    pub dt_max: f64,
    /// Reject a step whose predicted endpoint density is below
    /// `node_guard_factor` times the node threshold.
    pub node_guard_factor: f64,
    /// Consecutive rejections before declaring the trajectory trapped.
    pub max_rejects: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            rtol: 1e-8,
            atol: 1e-10,
            dt_min: 1e-13,
            dt_max: f64::INFINITY,
            node_guard_factor: 10.0,
            max_rejects: 20,
        }
    }
}

impl StepControl {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        StepControl {
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), IntegrateError> {
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.dt_min > 0.0 && self.dt_min < self.dt_max)
        {
            return Err(IntegrateError::InvalidControl);
        }
        Ok(())
    }
}

/// A position on a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint<const D: usize> {
    pub q: [f64; D],
    pub t: f64,
}

/// A phase-space point of Bohm's dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint<const D: usize> {
    pub q: [f64; D],
    pub p: [f64; D],
    pub t: f64,
}

/// Integration failures.
#[derive(Debug, Clone, Error)]
pub enum IntegrateError {
    /// Step size underflowed or too many consecutive rejections, typically
    /// while pinned against a node. Carries the last good point.
    #[error("trajectory trapped near a node at t = {t} (|h| = {h:.3e} after {rejects} rejections)")]
    NodeTrap {
        t: f64,
        q: Vec<f64>,
        h: f64,
        rejects: usize,
    },
    #[error("initial position outside the domain")]
    StartOutsideDomain,
    #[error("invalid step control")]
    InvalidControl,
}

// Dormand-Prince 5(4) tableau.
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
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
/// Fifth-order weights (same as the last stage row; FSAL).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Difference to the embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
/// Dense-output coefficients for the quartic interpolant.
const D5: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

#[inline]
fn axpy<const N: usize>(y: &mut [f64; N], a: f64, x: &[f64; N]) {
    for i in 0..N {
        y[i] += a * x[i];
    }
}

/// One accepted-step record sufficient for dense output on `[t, t + h]`.
struct DenseSegment<const N: usize> {
    t: f64,
    h: f64,
    rcont: [[f64; N]; 5],
}

impl<const N: usize> DenseSegment<N> {
    fn build(t: f64, h: f64, y: &[f64; N], y_new: &[f64; N], k: &[[f64; N]; 7]) -> Self {
        let mut rcont = [[0.0; N]; 5];
        for i in 0..N {
            let ydiff = y_new[i] - y[i];
            let bspl = h * k[0][i] - ydiff;
            rcont[0][i] = y[i];
            rcont[1][i] = ydiff;
            rcont[2][i] = bspl;
            rcont[3][i] = ydiff - h * k[6][i] - bspl;
            let mut acc = 0.0;
            for s in 0..7 {
                acc += D5[s] * k[s][i];
            }
            rcont[4][i] = h * acc;
        }
        DenseSegment { t, h, rcont }
    }

    fn eval(&self, t: f64) -> [f64; N] {
        let theta = (t - self.t) / self.h;
        let om = 1.0 - theta;
        std::array::from_fn(|i| {
            self.rcont[0][i]
                + theta
                    * (self.rcont[1][i]
                        + om * (self.rcont[2][i]
                            + theta * (self.rcont[3][i] + om * self.rcont[4][i])))
        })
    }
}

/// Outcome of the generic core: states at each requested sample time.
struct RawResult<const N: usize> {
    samples: Vec<[f64; N]>,
}

/// Generic adaptive core over state vectors of dimension `N`.
///
/// `field` evaluates the right-hand side (an `Err` rejects the step),
/// `guard` vetoes proposed endpoints (node guard, domain excursions), and
/// `fixup` canonicalizes accepted states (periodic wrap, micro-reflection at
/// walls, hard reflection for Bohm dynamics).
fn rk45_core<const N: usize>(
    field: &mut dyn FnMut(f64, &[f64; N]) -> Result<[f64; N], FieldError>,
    guard: &mut dyn FnMut(f64, &[f64; N]) -> bool,
    fixup: &mut dyn FnMut(f64, &mut [f64; N]),
    y0: [f64; N],
    t0: f64,
    t1: f64,
    ctrl: &StepControl,
    sample_times: &[f64],
) -> Result<RawResult<N>, IntegrateError> {
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut samples_out = Vec::with_capacity(sample_times.len());
    let mut next_sample = 0usize;

    // Emit samples at (or numerically before) the start time.
    while next_sample < sample_times.len()
        && (sample_times[next_sample] - t0) * dir <= span * 1e-15
    {
        samples_out.push(y0);
        next_sample += 1;
    }
    if span == 0.0 || next_sample == sample_times.len() {
        while samples_out.len() < sample_times.len() {
            samples_out.push(y0);
        }
        return Ok(RawResult { samples: samples_out });
    }

    let mut t = t0;
    let mut y = y0;
    let mut k = [[0.0; N]; 7];
    let trap = |t: f64, y: &[f64; N], h: f64, rejects: usize| IntegrateError::NodeTrap {
        t,
        q: y.to_vec(),
        h,
        rejects,
    };
    k[0] = match field(t, &y) {
        Ok(v) => v,
        Err(_) => return Err(trap(t, &y, 0.0, 0)),
    };

    // Initial step: conservative fraction of the span scaled by the
    // velocity magnitude; the controller adapts within a few steps.
    let vmag = k[0].iter().map(|v| v * v).sum::<f64>().sqrt();
    let ymag = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = ctrl.atol + ctrl.rtol * ymag.max(1.0);
    let mut h = (0.01 * (scale / (vmag + 1e-30)).min(span)).min(ctrl.dt_max).max(ctrl.dt_min);
    let mut facold: f64 = 1e-4;
    let mut rejects = 0usize;
    const BETA: f64 = 0.04;
    const EXPO1: f64 = 0.2 - BETA * 0.75;
    const SAFE: f64 = 0.9;
    const FAC_MIN: f64 = 0.2;
    const FAC_MAX: f64 = 10.0;

    loop {
        let remaining = (t1 - t).abs();
        // Snap to the endpoint once the leftover is pure rounding; a genuine
        // node trap shows up as h collapsing at an interior time instead.
        if remaining <= span * 1e-12 {
            break;
        }
        h = h.min(remaining).min(ctrl.dt_max);
        if h < ctrl.dt_min {
            return Err(trap(t, &y, h, rejects));
        }
        let hs = dir * h;

        // Stages 2..=7; any field failure rejects the step.
        let mut failed = false;
        for s in 0..6 {
            let mut ys = y;
            for j in 0..=s {
                if A[s][j] != 0.0 {
                    axpy(&mut ys, hs * A[s][j], &k[j]);
                }
            }
            match field(t + hs * C[s], &ys) {
                Ok(v) => k[s + 1] = v,
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }

        let mut y_new = y;
        let mut err = f64::INFINITY;
        if !failed {
            for s in 0..7 {
                if B5[s] != 0.0 {
                    axpy(&mut y_new, hs * B5[s], &k[s]);
                }
            }
            // Weighted RMS error of the embedded difference.
            let mut acc = 0.0;
            for i in 0..N {
                let mut e = 0.0;
                for s in 0..7 {
                    if E[s] != 0.0 {
                        e += E[s] * k[s][i];
                    }
                }
                e *= hs;
                let sc = ctrl.atol + ctrl.rtol * y[i].abs().max(y_new[i].abs());
                acc += (e / sc) * (e / sc);
            }
            err = (acc / N as f64).sqrt();
        }

        if std::env::var_os("PILOTWAVE_TRACE_STEPS").is_some() {
            eprintln!(
                "t={t:.12} h={h:.3e} err={err:.3e} failed={failed} y={y:?}"
            );
        }
        let accept = !failed && err <= 1.0 && guard(t + hs, &y_new);
        if accept {
            let t_new = t + hs;
            let mut y_fixed = y_new;
            fixup(t_new, &mut y_fixed);

            // Dense output for samples inside (t, t_new].
            if next_sample < sample_times.len() {
                let seg = DenseSegment::build(t, hs, &y, &y_new, &k);
                while next_sample < sample_times.len() {
                    let ts = sample_times[next_sample];
                    if (ts - t_new) * dir > span * 1e-15 {
                        break;
                    }
                    let mut ys = seg.eval(ts);
                    fixup(ts, &mut ys);
                    samples_out.push(ys);
                    next_sample += 1;
                }
            }

            rejects = 0;
            t = t_new;
            y = y_fixed;
            // FSAL: re-evaluate only if fixup changed the state.
            if y_fixed == y_new {
                k[0] = k[6];
            } else {
                k[0] = match field(t, &y) {
                    Ok(v) => v,
                    Err(_) => return Err(trap(t, &y, h, rejects)),
                };
            }
            let err_bounded = err.max(1e-10);
            let fac = (err_bounded.powf(EXPO1) / facold.powf(BETA) / SAFE)
                .clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            facold = err_bounded;
            h /= fac;
        } else {
            rejects += 1;
            if rejects > ctrl.max_rejects {
                return Err(trap(t, &y, h, rejects));
            }
            if failed || !err.is_finite() || err <= 1.0 {
                // Field failure or guard veto: plain halving.
                h *= 0.5;
            } else {
                let fac = (err.powf(EXPO1) / SAFE).clamp(1.0, 1.0 / FAC_MIN);
                h /= fac;
            }
        }
    }

    // Trailing samples that coincide with t1 within rounding.
    while next_sample < sample_times.len() {
        samples_out.push(y);
        next_sample += 1;
    }
    Ok(RawResult { samples: samples_out })
}

/// Check that sample times run monotonically from `t0` toward `t1`.
fn check_samples(t0: f64, t1: f64, samples: &[f64]) {
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let mut prev = t0;
    for &s in samples {
        assert!(
            (s - prev) * dir >= -1e-12 && (t1 - s) * dir >= -1e-9,
            "sample times must run monotonically from t0 to t1"
        );
        prev = s;
    }
}

/// Integrate an arbitrary flow, with dense output at `samples`.
///
/// Positions are wrapped onto periodic domains and micro-overshoots past box
/// walls (rounding only, < 1e-12 of the box) are reflected back; larger
/// excursions reject the step.
pub fn integrate_flow<const D: usize>(
    flow: &(impl Flow<D> + ?Sized),
    q0: [f64; D],
    t0: f64,
    t1: f64,
    ctrl: &StepControl,
    samples: &[f64],
) -> Result<Vec<TrajectoryPoint<D>>, IntegrateError> {
    let domain = flow.domain();
    if !domain.contains(q0) {
        return Err(IntegrateError::StartOutsideDomain);
    }
    check_samples(t0, t1, samples);
    let guard_factor = ctrl.node_guard_factor;
    let mut field = |t: f64, y: &[f64; D]| flow.velocity(t, *y);
    let mut guard = |t: f64, y: &[f64; D]| {
        let inside = (0..D).all(|d| match domain.axes[d] {
            AxisDomain::Interval { lo, hi } => {
                let margin = 1e-12 * (hi - lo);
                y[d] > lo - margin && y[d] < hi + margin
            }
            AxisDomain::Periodic { .. } | AxisDomain::Line => y[d].is_finite(),
        });
        inside && flow.node_ratio(t, *y) >= guard_factor
    };
    let mut fixup = |_t: f64, y: &mut [f64; D]| {
        for d in 0..D {
            match domain.axes[d] {
                AxisDomain::Interval { lo, hi } => {
                    // Rounding-level overshoot past a wall reflects back.
                    if y[d] < lo {
                        y[d] = lo + (lo - y[d]);
                    } else if y[d] > hi {
                        y[d] = hi - (y[d] - hi);
                    }
                }
                AxisDomain::Periodic { period } => {
                    if y[d] < 0.0 || y[d] >= period {
                        y[d] = y[d].rem_euclid(period);
                    }
                }
                AxisDomain::Line => {}
            }
        }
    };
    let raw = rk45_core(&mut field, &mut guard, &mut fixup, q0, t0, t1, ctrl, samples)?;
    Ok(raw
        .samples
        .into_iter()
        .zip(samples)
        .map(|(q, &t)| TrajectoryPoint { q, t })
        .collect())
}

/// Integrate de Broglie's first-order law for a spectral state.
pub fn integrate_debroglie<const D: usize>(
    state: &SpectralState<D>,
    q0: [f64; D],
    t0: f64,
    t1: f64,
    ctrl: &StepControl,
    samples: &[f64],
) -> Result<Vec<TrajectoryPoint<D>>, IntegrateError> {
    integrate_flow(&DeBroglieFlow { state }, q0, t0, t1, ctrl, samples)
}

/// Classical potential gradient of the basis Hamiltonian at `q`.
fn grad_v<const D: usize>(state: &SpectralState<D>, q: [f64; D]) -> [f64; D] {
    match state.spec().basis {
        // Inside the box and on the ring the potential is flat; walls are
        // handled by reflection.
        Basis::BoxSine { .. } | Basis::RingExponential { .. } => [0.0; D],
        Basis::OscillatorHermite { frequency } => {
            let k = state.spec().mass * frequency * frequency;
            std::array::from_fn(|d| k * q[d])
        }
    }
}

/// Gradient of the quantum potential by guarded central differences of the
/// analytic Q (`h = 1e-5` of the domain scale).
///
/// Where a stencil point falls into a low-density region (wall skins, node
/// neighbourhoods) the evaluation of Q is dominated by the roundoff of the
/// cancelling mode sum, and differencing amplifies it by 1/h into the
/// force. The stencil is widened there until its probe points sit at a
/// healthy density; the O(h^2) bias this adds is confined to regions a
/// trajectory crosses in a vanishing fraction of the run.
fn grad_q<const D: usize>(
    state: &SpectralState<D>,
    q: [f64; D],
    t: f64,
) -> Result<[f64; D], FieldError> {
    let scale = match state.spec().basis {
        Basis::BoxSine { length } => length,
        Basis::RingExponential { circumference } => circumference,
        Basis::OscillatorHermite { frequency } => 1.0 / (state.spec().mass * frequency).sqrt(),
    };
    let rho_quiet = 1e-7 / state.characteristic_volume();
    let mut out = [0.0; D];
    for d in 0..D {
        let mut result = None;
        for widen in 0..=3 {
            let h = 1e-5 * scale * 10.0_f64.powi(widen);
            let mut qp = q;
            qp[d] += h;
            let mut qm = q;
            qm[d] -= h;
            let rho_min = state.sample(qp, t).density.min(state.sample(qm, t).density);
            if rho_min >= rho_quiet || widen == 3 {
                let gp = bohm_q(state, qp, t)?;
                let gm = bohm_q(state, qm, t)?;
                result = Some((gp - gm) / (2.0 * h));
                break;
            }
        }
        out[d] = result.expect("stencil widening always terminates");
    }
    Ok(out)
}

/// Quantum potential with a floor-level node threshold: Bohm trajectories
/// legitimately enter low-density regions, so only genuine zeros fail.
fn bohm_q<const D: usize>(
    state: &SpectralState<D>,
    q: [f64; D],
    t: f64,
) -> Result<f64, FieldError> {
    let w = state.sample(q, t);
    if !(w.density > 1e-280) {
        return Err(FieldError::Node { density: w.density });
    }
    crate::spectral::guidance_from_sample(&w, state.spec().mass, 1e-280)
        .map(|g| g.quantum_potential)
        .map_err(FieldError::from)
}

macro_rules! bohm_impl {
    ($name:ident, $d:literal, $n:literal) => {
        /// Integrate Bohm's second-order dynamics in phase space.
        ///
        /// Box walls reflect elastically (the infinite-well limit of the
        /// classical force); on periodic domains positions wrap.
        pub fn $name(
            state: &SpectralState<$d>,
            x0: PhasePoint<$d>,
            t1: f64,
            ctrl: &StepControl,
            samples: &[f64],
        ) -> Result<Vec<PhasePoint<$d>>, IntegrateError> {
            let domain = state.domain();
            if !domain.contains(x0.q) {
                return Err(IntegrateError::StartOutsideDomain);
            }
            check_samples(x0.t, t1, samples);
            let mass = state.spec().mass;
            let mut field = |t: f64, y: &[f64; $n]| -> Result<[f64; $n], FieldError> {
                let q: [f64; $d] = std::array::from_fn(|d| y[d]);
                let gq = grad_q(state, q, t)?;
                let gv = grad_v(state, q);
                let mut out = [0.0; $n];
                for d in 0..$d {
                    out[d] = y[$d + d] / mass;
                    out[$d + d] = -(gv[d] + gq[d]);
                }
                Ok(out)
            };
            let mut guard = |_t: f64, y: &[f64; $n]| {
                (0..$d).all(|d| match domain.axes[d] {
                    AxisDomain::Interval { lo, hi } => {
                        // Allow up to one wall reflection per step.
                        let w = hi - lo;
                        y[d] > lo - 0.5 * w && y[d] < hi + 0.5 * w
                    }
                    _ => y[d].is_finite(),
                })
            };
            let mut fixup = |_t: f64, y: &mut [f64; $n]| {
                for d in 0..$d {
                    match domain.axes[d] {
                        AxisDomain::Interval { lo, hi } => {
                            // Elastic wall bounce: mirror the position and
                            // flip the conjugate momentum.
                            if y[d] < lo {
                                y[d] = lo + (lo - y[d]);
                                y[$d + d] = -y[$d + d];
                            } else if y[d] > hi {
                                y[d] = hi - (y[d] - hi);
                                y[$d + d] = -y[$d + d];
                            }
                        }
                        AxisDomain::Periodic { period } => {
                            if y[d] < 0.0 || y[d] >= period {
                                y[d] = y[d].rem_euclid(period);
                            }
                        }
                        AxisDomain::Line => {}
                    }
                }
            };
            let mut y0 = [0.0; $n];
            for d in 0..$d {
                y0[d] = x0.q[d];
                y0[$d + d] = x0.p[d];
            }
            let raw = rk45_core(
                &mut field,
                &mut guard,
                &mut fixup,
                y0,
                x0.t,
                t1,
                ctrl,
                samples,
            )?;
            Ok(raw
                .samples
                .into_iter()
                .zip(samples)
                .map(|(y, &t)| PhasePoint {
                    q: std::array::from_fn(|d| y[d]),
                    p: std::array::from_fn(|d| y[$d + d]),
                    t,
                })
                .collect())
        }
    };
}

bohm_impl!(integrate_bohm, 1, 2);
bohm_impl!(integrate_bohm_2d, 2, 4);

#[cfg(test)]
mod tests;
