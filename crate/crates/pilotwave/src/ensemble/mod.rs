//! Ensembles, coarse-graining, and the H-theorem machinery.
//!
//! An ensemble is a seeded set of trajectories whose initial configurations
//! are drawn from a [`DensitySpec`] (Born or otherwise), evolved under de
//! Broglie guidance on a shared time grid. Relaxation toward the Born rule
//! is quantified by the coarse-grained H-function
//!
//! ```text
//! H = sum_cells vol * rho_bar * ln(rho_bar / born_bar),
//! ```
//!
//! which is nonnegative, vanishes exactly when the coarse densities agree
//! cellwise, and for smooth nonequilibrium initial data decays roughly
//! exponentially. Monte-Carlo estimates of H carry a positive bias of order
//! `cells / (2 N)`; [`noise_floor`] gives the calibrated scale below which a
//! measured H is indistinguishable from equilibrium.
//!
//! Initial densities are restricted to smooth families (Born densities of
//! spectral states, mixtures of them, uniform patches), so the no-fine-
//! grained-structure assumption behind the H-theorem holds at any
//! coarse-graining length used here.
//!
//! Everything is deterministic for a fixed seed: sampling uses one
//! counter-based stream per trajectory, trajectories are integrated
//! independently, and reductions run in index order, so results do not
//! depend on the worker count.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{CoarseGrid, DensityField, GridError};
use crate::integrate::{integrate_flow, DeBroglieFlow, Flow, StepControl};
use crate::quadrature::RuleNd;
use crate::rng::{lane_stream, Lane};
use crate::spectral::{SpectralState, WaveField};
use crate::stats;

/// Bootstrap resamples used for error bars throughout.
pub const BOOTSTRAP_RESAMPLES: usize = 48;

/// Calibrated coefficient of the equilibrium noise floor `c * cells / N`.
///
/// The multinomial plug-in bias of the H estimator is `(cells - 1) / (2N)`;
/// the calibration adds headroom for its sampling spread and for cells with
/// few expected counts (frozen from equilibrium runs of the acceptance
/// configuration; see the relaxation chapter of the guide).
pub const NOISE_FLOOR_COEFF: f64 = 0.9;

/// Scale below which a Monte-Carlo H value is considered zero.
///
/// The headroom over the bias shrinks like `sqrt(2 / cells)` in units of
/// the estimator's spread, so gates built on this floor are tightest on
/// coarse grids; 32 or more cells per run keeps several sigma of margin.
pub fn noise_floor(cells: usize, n: usize) -> f64 {
    NOISE_FLOOR_COEFF * cells as f64 / n as f64
}

#[derive(Debug, Clone, Error)]
pub enum EnsembleError {
    #[error("ensemble is empty")]
    Empty,
    #[error("invalid density spec: {0}")]
    InvalidSpec(String),
    #[error(
        "rejection envelope underestimated: density {density:.6e} above envelope {envelope:.6e} at {q:?}"
    )]
    EnvelopeUnderestimate {
        q: Vec<f64>,
        density: f64,
        envelope: f64,
    },
    #[error("time {t} is not on the run's grid")]
    TimeNotOnGrid { t: f64 },
    #[error("run invalid: {trapped} of {n} trajectories trapped (fraction {frac:.2e} >= 1e-3)")]
    InvalidRun { trapped: usize, n: usize, frac: f64 },
    #[error("{frac:.2e} of positions left the coarse grid (limit 1e-3)")]
    OutsideGrid { frac: f64 },
    #[error("fields live on different grids")]
    MismatchedGrids,
    #[error("rho is positive where the Born density vanishes (cell {cell}): H is infinite")]
    InfiniteH { cell: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("quadrature did not converge: refinements {coarse}x and {fine}x differ by {diff:.3e}")]
    QuadratureNonConvergence { coarse: usize, fine: usize, diff: f64 },
}

#[derive(Debug, Clone, Error)]
pub enum FitError {
    #[error("window has {0} points; at least 4 required")]
    WindowTooSmall(usize),
    #[error("non-positive H value in fit window")]
    NonPositive,
    #[error("series does not decay (slope {slope:.3e}); tau -> infinity")]
    NonDecaying { slope: f64 },
}

/// A normalized density on R^D that can drive rejection sampling.
pub trait Density<const D: usize>: Sync {
    fn density(&self, q: [f64; D]) -> f64;
    /// Bounding box containing (effectively) all of the mass.
    fn support(&self) -> ([f64; D], [f64; D]);
}

/// The smooth initial-density families of the laboratory.
#[derive(Debug, Clone)]
pub enum DensitySpec<const D: usize> {
    /// The Born density of a reference state, at that state's own time
    /// origin.
    BornOf(SpectralState<D>),
    /// Convex mixture of Born densities.
    Mixture(Vec<(f64, SpectralState<D>)>),
    /// Uniform on a sub-box of the domain.
    UniformOn { lo: [f64; D], hi: [f64; D] },
}

impl<const D: usize> DensitySpec<D> {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        match self {
            DensitySpec::BornOf(_) => Ok(()),
            DensitySpec::Mixture(parts) => {
                if parts.is_empty() {
                    return Err(EnsembleError::InvalidSpec("empty mixture".into()));
                }
                let total: f64 = parts.iter().map(|(w, _)| *w).sum();
                if parts.iter().any(|(w, _)| *w <= 0.0) || (total - 1.0).abs() > 1e-12 {
                    return Err(EnsembleError::InvalidSpec(format!(
                        "mixture weights must be positive and sum to 1, got {total}"
                    )));
                }
                Ok(())
            }
            DensitySpec::UniformOn { lo, hi } => {
                if (0..D).all(|d| hi[d] > lo[d]) {
                    Ok(())
                } else {
                    Err(EnsembleError::InvalidSpec(
                        "uniform sub-box must have positive volume".into(),
                    ))
                }
            }
        }
    }
}

impl<const D: usize> Density<D> for DensitySpec<D> {
    fn density(&self, q: [f64; D]) -> f64 {
        match self {
            DensitySpec::BornOf(state) => {
                if state.domain().contains(q) {
                    state.sample(q, state.t0()).density
                } else {
                    0.0
                }
            }
            DensitySpec::Mixture(parts) => parts
                .iter()
                .map(|(w, s)| {
                    if s.domain().contains(q) {
                        w * s.sample(q, s.t0()).density
                    } else {
                        0.0
                    }
                })
                .sum(),
            DensitySpec::UniformOn { lo, hi } => {
                let inside = (0..D).all(|d| q[d] >= lo[d] && q[d] <= hi[d]);
                if inside {
                    1.0 / (0..D).map(|d| hi[d] - lo[d]).product::<f64>()
                } else {
                    0.0
                }
            }
        }
    }

    fn support(&self) -> ([f64; D], [f64; D]) {
        match self {
            DensitySpec::BornOf(state) => state.quadrature_bounds(),
            DensitySpec::Mixture(parts) => {
                let mut lo = [f64::INFINITY; D];
                let mut hi = [f64::NEG_INFINITY; D];
                for (_, s) in parts {
                    let (l, h) = s.quadrature_bounds();
                    for d in 0..D {
                        lo[d] = lo[d].min(l[d]);
                        hi[d] = hi[d].max(h[d]);
                    }
                }
                (lo, hi)
            }
            DensitySpec::UniformOn { lo, hi } => (*lo, *hi),
        }
    }
}

/// Scan resolution per axis for the envelope maximum.
fn scan_resolution(d: usize) -> usize {
    match d {
        1 => 4096,
        2 => 256,
        _ => 64,
    }
}

/// Grid-estimated maximum of the density, times the 1.05 safety factor.
fn envelope_height<const D: usize>(density: &impl Density<D>) -> f64 {
    let (lo, hi) = density.support();
    let res = scan_resolution(D);
    let mut max = 0.0_f64;
    let mut idx = [0usize; D];
    loop {
        let q: [f64; D] =
            std::array::from_fn(|d| lo[d] + (hi[d] - lo[d]) * (idx[d] as f64 + 0.5) / res as f64);
        max = max.max(density.density(q));
        let mut d = 0;
        loop {
            idx[d] += 1;
            if idx[d] < res {
                break;
            }
            idx[d] = 0;
            d += 1;
            if d == D {
                return 1.05 * max;
            }
        }
    }
}

fn draw_one<const D: usize>(
    rng: &mut impl Rng,
    density: &impl Density<D>,
    lo: [f64; D],
    hi: [f64; D],
    envelope: f64,
) -> Result<[f64; D], EnsembleError> {
    loop {
        let q: [f64; D] = std::array::from_fn(|d| rng.gen_range(lo[d]..hi[d]));
        let rho = density.density(q);
        if rho > envelope {
            return Err(EnsembleError::EnvelopeUnderestimate {
                q: q.to_vec(),
                density: rho,
                envelope,
            });
        }
        if rng.gen_range(0.0..envelope) < rho {
            return Ok(q);
        }
    }
}

/// Draw `n` positions from an arbitrary density by rejection against a
/// uniform envelope; deterministic per `(seed, index)`.
pub fn sample_density<const D: usize>(
    density: &impl Density<D>,
    n: usize,
    seed: u64,
) -> Result<Vec<[f64; D]>, EnsembleError> {
    if n == 0 {
        return Err(EnsembleError::Empty);
    }
    let (lo, hi) = density.support();
    let envelope = envelope_height(density);
    if !(envelope > 0.0) {
        return Err(EnsembleError::InvalidSpec("density is identically zero".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = lane_stream(seed, Lane::Sample, i as u64);
            draw_one(&mut rng, density, lo, hi, envelope)
        })
        .collect()
}

/// Draw `n` positions from a validated [`DensitySpec`].
pub fn sample<const D: usize>(
    spec: &DensitySpec<D>,
    n: usize,
    seed: u64,
) -> Result<Vec<[f64; D]>, EnsembleError> {
    spec.validate()?;
    sample_density(spec, n, seed)
}

/// A seeded set of trajectories sampled on a common time grid.
#[derive(Debug, Clone)]
pub struct EnsembleRun<const D: usize> {
    pub seed: u64,
    pub times: Vec<f64>,
    pub initial: Vec<[f64; D]>,
    /// One path per trajectory, aligned with `times`; `None` if the
    /// trajectory was trapped near a node and excluded.
    pub paths: Vec<Option<Vec<[f64; D]>>>,
}

impl<const D: usize> EnsembleRun<D> {
    pub fn n(&self) -> usize {
        self.paths.len()
    }

    pub fn trapped(&self) -> usize {
        self.paths.iter().filter(|p| p.is_none()).count()
    }

    pub fn trapped_fraction(&self) -> f64 {
        self.trapped() as f64 / self.n().max(1) as f64
    }

    /// A run is valid while fewer than 1e-3 of its trajectories trapped.
    pub fn is_valid(&self) -> bool {
        self.trapped_fraction() < 1e-3
    }

    pub fn check_valid(&self) -> Result<(), EnsembleError> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(EnsembleError::InvalidRun {
                trapped: self.trapped(),
                n: self.n(),
                frac: self.trapped_fraction(),
            })
        }
    }

    pub fn time_index(&self, t: f64) -> Result<usize, EnsembleError> {
        self.times
            .iter()
            .position(|&ti| (ti - t).abs() <= 1e-9 * ti.abs().max(1.0))
            .ok_or(EnsembleError::TimeNotOnGrid { t })
    }

    /// Positions of surviving trajectories at grid time index `ti`.
    pub fn positions_at(&self, ti: usize) -> impl Iterator<Item = [f64; D]> + '_ {
        self.paths.iter().filter_map(move |p| p.as_ref().map(|path| path[ti]))
    }
}

/// Evolve given initial positions under an arbitrary flow.
///
/// `times[0]` is the initial time the positions refer to; each trajectory
/// integrates independently and in parallel.
pub fn evolve_flow<const D: usize>(
    flow: &(impl Flow<D> + Sync),
    positions: &[[f64; D]],
    times: &[f64],
    ctrl: &StepControl,
    seed: u64,
) -> Result<EnsembleRun<D>, EnsembleError> {
    if positions.is_empty() {
        return Err(EnsembleError::Empty);
    }
    assert!(!times.is_empty(), "time grid must not be empty");
    let t0 = times[0];
    let t1 = *times.last().unwrap();
    let paths: Vec<Option<Vec<[f64; D]>>> = positions
        .par_iter()
        .map(|&q0| {
            integrate_flow(flow, q0, t0, t1, ctrl, times)
                .ok()
                .map(|pts| pts.into_iter().map(|p| p.q).collect())
        })
        .collect();
    Ok(EnsembleRun {
        seed,
        times: times.to_vec(),
        initial: positions.to_vec(),
        paths,
    })
}

/// Evolve an ensemble under de Broglie guidance of `state`.
pub fn evolve<const D: usize>(
    state: &SpectralState<D>,
    positions: &[[f64; D]],
    times: &[f64],
    ctrl: &StepControl,
    seed: u64,
) -> Result<EnsembleRun<D>, EnsembleError> {
    evolve_flow(&DeBroglieFlow { state }, positions, times, ctrl, seed)
}

/// Histogram positions into a coarse density field.
fn histogram<const D: usize>(
    grid: &CoarseGrid<D>,
    positions: impl Iterator<Item = [f64; D]>,
) -> Result<DensityField<D>, EnsembleError> {
    let mut counts = vec![0u64; grid.cell_count()];
    let mut inside = 0u64;
    let mut outside = 0u64;
    for q in positions {
        match grid.cell_of(q) {
            Some(idx) => {
                counts[idx] += 1;
                inside += 1;
            }
            None => outside += 1,
        }
    }
    if inside == 0 {
        return Err(EnsembleError::Empty);
    }
    let frac_out = outside as f64 / (inside + outside) as f64;
    if frac_out >= 1e-3 {
        return Err(EnsembleError::OutsideGrid { frac: frac_out });
    }
    let norm = 1.0 / (inside as f64 * grid.cell_volume());
    let values = counts.iter().map(|&c| c as f64 * norm).collect();
    Ok(DensityField::new(grid.clone(), values)?)
}

/// Coarse-grained ensemble density at a grid time of the run.
pub fn coarse_rho<const D: usize>(
    run: &EnsembleRun<D>,
    t: f64,
    grid: &CoarseGrid<D>,
) -> Result<DensityField<D>, EnsembleError> {
    let ti = run.time_index(t)?;
    histogram(grid, run.positions_at(ti))
}

/// Cell-averaged Born density of `state` at time `t` by per-cell
/// Gauss-Legendre quadrature.
///
/// The default 4-point-per-axis cell rule is exact to well below 1e-9 for
/// the mode numbers used here; the order grows automatically when a state
/// oscillates faster than the cell size.
pub fn coarse_born<const D: usize>(
    state: &SpectralState<D>,
    t: f64,
    grid: &CoarseGrid<D>,
) -> Result<DensityField<D>, EnsembleError> {
    let cells_min = grid.cells_per_axis().iter().copied().min().unwrap_or(2);
    let order = (4usize).max(3 * state.max_mode() as usize / cells_min + 4);
    let vol = grid.cell_volume();
    let values: Vec<f64> = (0..grid.cell_count())
        .into_par_iter()
        .map(|idx| {
            let (lo, hi) = grid.cell_bounds(idx);
            let rule = RuleNd::<D>::new(order, lo, hi);
            rule.integrate(|q| state.sample(q, t).density) / vol
        })
        .collect();
    Ok(DensityField::new(grid.clone(), values)?)
}

/// The coarse-grained H-function `sum vol * rho * ln(rho / born)`,
/// with `0 ln 0 = 0`.
pub fn h_bar<const D: usize>(
    rho: &DensityField<D>,
    born: &DensityField<D>,
) -> Result<f64, EnsembleError> {
    if rho.grid() != born.grid() {
        return Err(EnsembleError::MismatchedGrids);
    }
    let vol = rho.grid().cell_volume();
    let mut h = 0.0;
    for (cell, (&r, &b)) in rho.values().iter().zip(born.values()).enumerate() {
        if r > 0.0 {
            if b <= 0.0 {
                return Err(EnsembleError::InfiniteH { cell });
            }
            h += vol * r * (r / b).ln();
        }
    }
    Ok(h)
}

/// One time point of an H-series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HPoint {
    pub t: f64,
    pub h_bar: f64,
    pub sigma_boot: f64,
}

/// Exponential-decay fit of an H-series: `H(t) ~ h0 exp(-t / tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpFit {
    pub h0: f64,
    pub tau: f64,
    pub r2: f64,
}

/// The H-function sampled along a run, with bootstrap error bars.
#[derive(Debug, Clone)]
pub struct HSeries {
    pub points: Vec<HPoint>,
    pub trapped_frac: f64,
    pub fit: Option<ExpFit>,
}

impl HSeries {
    /// Longest prefix of points with `h_bar` above `threshold`.
    pub fn window_above(&self, threshold: f64) -> std::ops::Range<usize> {
        let end = self
            .points
            .iter()
            .position(|p| p.h_bar <= threshold)
            .unwrap_or(self.points.len());
        0..end
    }
}

/// H-series of an existing run against precomputed Born fields
/// (one per run time). Bootstrap resampling is over trajectories.
pub fn h_series_from_run<const D: usize>(
    run: &EnsembleRun<D>,
    born: &[DensityField<D>],
    grid: &CoarseGrid<D>,
    seed: u64,
) -> Result<HSeries, EnsembleError> {
    assert_eq!(born.len(), run.times.len(), "one Born field per run time");
    run.check_valid()?;
    let survivors: Vec<&Vec<[f64; D]>> = run.paths.iter().flatten().collect();
    if survivors.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let n = survivors.len();
    let mut points = Vec::with_capacity(run.times.len());
    for (ti, (&t, born_t)) in run.times.iter().zip(born).enumerate() {
        let rho = histogram(grid, survivors.iter().map(|p| p[ti]))?;
        let h = h_bar(&rho, born_t)?;
        let mut rng = lane_stream(seed, Lane::Bootstrap, ti as u64);
        let mut hs = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
        for _ in 0..BOOTSTRAP_RESAMPLES {
            let resampled = (0..n).map(|_| survivors[rng.gen_range(0..n)][ti]);
            if let Ok(rho_b) = histogram(grid, resampled) {
                if let Ok(hb) = h_bar(&rho_b, born_t) {
                    hs.push(hb);
                }
            }
        }
        points.push(HPoint {
            t,
            h_bar: h,
            sigma_boot: stats::std_dev(&hs),
        });
    }
    Ok(HSeries {
        points,
        trapped_frac: run.trapped_fraction(),
        fit: None,
    })
}

/// Sample, evolve, coarse-grain: the full relaxation experiment.
///
/// The initial density is sampled at `times[0]`; H is measured at every
/// grid time against the cell-averaged Born density of `state`.
pub fn relaxation_series<const D: usize>(
    state: &SpectralState<D>,
    spec: &DensitySpec<D>,
    n: usize,
    seed: u64,
    grid: &CoarseGrid<D>,
    times: &[f64],
    ctrl: &StepControl,
) -> Result<HSeries, EnsembleError> {
    let positions = sample(spec, n, seed)?;
    let run = evolve(state, &positions, times, ctrl, seed)?;
    let born: Vec<DensityField<D>> = times
        .iter()
        .map(|&t| coarse_born(state, t, grid))
        .collect::<Result<_, _>>()?;
    let mut series = h_series_from_run(&run, &born, grid, seed)?;
    let floor = noise_floor(grid.cell_count(), n);
    let window = series.window_above(5.0 * floor);
    if window.len() >= 4 {
        series.fit = fit_exponential(&series, window).ok();
    }
    Ok(series)
}

/// Least squares of `ln H` on `t` over `window`.
pub fn fit_exponential(series: &HSeries, window: std::ops::Range<usize>) -> Result<ExpFit, FitError> {
    let pts = &series.points[window];
    if pts.len() < 4 {
        return Err(FitError::WindowTooSmall(pts.len()));
    }
    if pts.iter().any(|p| p.h_bar <= 0.0) {
        return Err(FitError::NonPositive);
    }
    let t: Vec<f64> = pts.iter().map(|p| p.t).collect();
    let ln_h: Vec<f64> = pts.iter().map(|p| p.h_bar.ln()).collect();
    let (slope, intercept, r2) = stats::linear_fit(&t, &ln_h);
    if slope >= -1e-12 {
        return Err(FitError::NonDecaying { slope });
    }
    Ok(ExpFit {
        h0: intercept.exp(),
        tau: -1.0 / slope,
        r2,
    })
}

/// Percentile bootstrap confidence interval for the decay time `tau`,
/// resampling the windowed points.
pub fn fit_tau_ci(
    series: &HSeries,
    window: std::ops::Range<usize>,
    seed: u64,
    level: f64,
) -> Result<(f64, f64), FitError> {
    let pts: Vec<HPoint> = series.points[window].to_vec();
    if pts.len() < 4 {
        return Err(FitError::WindowTooSmall(pts.len()));
    }
    if pts.iter().any(|p| p.h_bar <= 0.0) {
        return Err(FitError::NonPositive);
    }
    let mut rng = lane_stream(seed, Lane::Bootstrap, u64::MAX);
    let mut taus = Vec::new();
    let mut attempts = 0;
    while taus.len() < 200 && attempts < 4000 {
        attempts += 1;
        let resampled: Vec<HPoint> = (0..pts.len())
            .map(|_| pts[rng.gen_range(0..pts.len())])
            .collect();
        let t: Vec<f64> = resampled.iter().map(|p| p.t).collect();
        if t.windows(2).all(|w| w[0] == w[1]) {
            continue;
        }
        let ln_h: Vec<f64> = resampled.iter().map(|p| p.h_bar.ln()).collect();
        let (slope, _, _) = stats::linear_fit(&t, &ln_h);
        if slope < -1e-12 {
            taus.push(-1.0 / slope);
        }
    }
    if taus.len() < 50 {
        return Err(FitError::NonDecaying { slope: 0.0 });
    }
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    let lo = taus[((taus.len() as f64 - 1.0) * alpha).round() as usize];
    let hi = taus[((taus.len() as f64 - 1.0) * (1.0 - alpha)).round() as usize];
    Ok((lo, hi))
}

/// Equilibrium expectation values of the quantum-potential transfer rates.
#[derive(Debug, Clone, Copy)]
pub struct EquilibriumRates<const D: usize> {
    /// `int |psi|^2 dQ/dt dq`.
    pub energy_rate: f64,
    /// `int |psi|^2 grad Q dq`.
    pub momentum_rate: [f64; D],
}

fn quantum_potential_at<const D: usize>(state: &SpectralState<D>, q: [f64; D], t: f64) -> Option<f64> {
    state.guidance(q, t).ok().map(|g| g.quantum_potential)
}

/// Integrand helpers: dQ/dt by central time difference (h = 1e-6) and
/// grad Q by central space differences (h = 1e-5 of the domain scale).
fn dq_dt<const D: usize>(state: &SpectralState<D>, q: [f64; D], t: f64) -> Option<f64> {
    let h = 1e-6;
    let qp = quantum_potential_at(state, q, t + h)?;
    let qm = quantum_potential_at(state, q, t - h)?;
    Some((qp - qm) / (2.0 * h))
}

/// Central-difference step for grad Q: wide enough that the catastrophic
/// cancellation inside Q near density minima stays below the truncation
/// error of the difference itself.
fn grad_q_step<const D: usize>(state: &SpectralState<D>) -> f64 {
    let (lo, hi) = state.quadrature_bounds();
    1e-4 * (hi[0] - lo[0])
}

fn grad_q_fd<const D: usize>(state: &SpectralState<D>, q: [f64; D], t: f64) -> Option<[f64; D]> {
    let h = grad_q_step(state);
    let mut out = [0.0; D];
    for d in 0..D {
        let mut qp = q;
        qp[d] += h;
        let mut qm = q;
        qm[d] -= h;
        out[d] = (quantum_potential_at(state, qp, t)? - quantum_potential_at(state, qm, t)?)
            / (2.0 * h);
    }
    Some(out)
}

/// Composite quadrature for the rate integrands, which develop sharp
/// localized features near deep density minima that a single
/// Gauss-Legendre panel under-resolves.
fn rate_rule<const D: usize>(state: &SpectralState<D>, refine: usize) -> RuleNd<D> {
    let (lo, hi) = state.quadrature_bounds();
    let panels = (32usize).max(8 * state.max_mode() as usize) * refine;
    RuleNd::from_axes(std::array::from_fn(|d| {
        crate::quadrature::Rule1d::composite(10, panels, lo[d], hi[d])
    }))
}

fn equilibrium_rates_with_rule<const D: usize>(
    state: &SpectralState<D>,
    t: f64,
    rule: &RuleNd<D>,
) -> EquilibriumRates<D> {
    let mut energy = 0.0;
    let mut momentum = [0.0; D];
    rule.for_each(|q, w| {
        // A point at (or next to) a node contributes nothing: the integrand
        // carries a factor |psi|^2 that vanishes faster than Q diverges,
        // and skipping it avoids amplifying roundoff through the finite
        // differences.
        let rho = state.sample(q, t).density;
        if rho <= 1e-8 / state.characteristic_volume() {
            return;
        }
        if let Some(r) = dq_dt(state, q, t) {
            energy += w * rho * r;
        }
        if let Some(g) = grad_q_fd(state, q, t) {
            for d in 0..D {
                momentum[d] += w * rho * g[d];
            }
        }
    });
    EquilibriumRates {
        energy_rate: energy,
        momentum_rate: momentum,
    }
}

/// Both equilibrium transfer-rate integrals, checked for quadrature
/// convergence by comparing against a rule of twice the order.
///
/// Single eigenmodes short-circuit to exact zeros: their Q is a constant
/// in both space and time.
pub fn equilibrium_rate_check<const D: usize>(
    state: &SpectralState<D>,
    t: f64,
) -> Result<EquilibriumRates<D>, EnsembleError> {
    if state.terms().len() == 1 {
        return Ok(EquilibriumRates {
            energy_rate: 0.0,
            momentum_rate: [0.0; D],
        });
    }
    let coarse = equilibrium_rates_with_rule(state, t, &rate_rule(state, 1));
    let fine = equilibrium_rates_with_rule(state, t, &rate_rule(state, 2));
    let mut diff = (coarse.energy_rate - fine.energy_rate).abs();
    for d in 0..D {
        diff = diff.max((coarse.momentum_rate[d] - fine.momentum_rate[d]).abs());
    }
    if diff > 1e-7 {
        return Err(EnsembleError::QuadratureNonConvergence {
            coarse: 1,
            fine: 2,
            diff,
        });
    }
    Ok(fine)
}

/// Nonequilibrium correction to the mean-energy rate, estimated as the
/// ensemble average of dQ/dt minus its Born (quadrature) average.
#[derive(Debug, Clone, Copy)]
pub struct NoneqRate {
    pub estimate: f64,
    pub sigma_boot: f64,
}

pub fn noneq_rate_check<const D: usize>(
    state: &SpectralState<D>,
    samples: &[[f64; D]],
    t: f64,
    seed: u64,
) -> Result<NoneqRate, EnsembleError> {
    if samples.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if state.terms().len() == 1 {
        // Eigenmode: dQ/dt = 0 identically, whatever the ensemble.
        return Ok(NoneqRate { estimate: 0.0, sigma_boot: 0.0 });
    }
    let values: Vec<f64> = samples
        .iter()
        .map(|&q| dq_dt(state, q, t).unwrap_or(0.0))
        .collect();
    let born_avg = rate_rule(state, 1).integrate(|q| {
        let rho = state.sample(q, t).density;
        if rho <= 1e-8 / state.characteristic_volume() {
            return 0.0;
        }
        dq_dt(state, q, t).map(|r| rho * r).unwrap_or(0.0)
    });
    let mut rng = lane_stream(seed, Lane::Bootstrap, 0x00ff);
    let sigma = stats::bootstrap_se(&values, BOOTSTRAP_RESAMPLES, &mut rng, stats::mean);
    Ok(NoneqRate {
        estimate: stats::mean(&values) - born_avg,
        sigma_boot: sigma,
    })
}
