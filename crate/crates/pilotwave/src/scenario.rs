//! Scenario orchestration: from a validated configuration to output files.
//!
//! Rendering is separated from I/O so determinism can be checked in
//! memory: [`render_outputs`] produces the full list of `(name, content)`
//! pairs for a configuration, and its bytes depend only on the
//! configuration hash inputs (scenario parameters and seed), never on the
//! worker count. [`run_scenario`] writes those files plus a human-readable
//! `summary.txt` (which carries wall time and is therefore not
//! byte-stable).

use std::path::{Path, PathBuf};

use num_complex::Complex64 as C64;
use rand::Rng;
use thiserror::Error;

use crate::config::{
    CosmoRho, ExpansionSpec, MeasureRho, ObservableKind, Params, Rho0, ScenarioConfig, SignalRho,
};
use crate::cosmo::{evolve_mode, mode_relaxation, power_ratio, Expansion, ModeBorn, ModeOscillator};
use crate::ensemble::{
    self, noise_floor, sample, sample_density, Density, DensitySpec, HSeries,
};
use crate::grid::CoarseGrid;
use crate::integrate::{integrate_bohm_2d, PhasePoint, StepControl};
use crate::measure::{
    ensemble_outcomes, subquantum_measure, Observable, PointerDensity, PointerSetup, SgOutcome,
    SternGerlach,
};
use crate::nonlocal::{signal_experiment, PairBorn, PairState, SchmidtTerm, SwitchSpec};
use crate::output::{write_text, Csv, Field, OutputError};
use crate::rng::{lane_stream, Lane};
use crate::spectral::{Basis, BasisSpec, SpectralState, Term, WaveField};

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// A numerical failure: node-trap excess, truncation, non-convergence.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] OutputError),
}

macro_rules! numerical_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for ScenarioError {
            fn from(e: $ty) -> Self {
                ScenarioError::Numerical(e.to_string())
            }
        })*
    };
}

numerical_from!(
    crate::ensemble::EnsembleError,
    crate::measure::MeasureError,
    crate::nonlocal::NonlocalError,
    crate::cosmo::CosmoError,
    crate::integrate::IntegrateError,
    crate::spectral::SpectralError,
    crate::grid::GridError
);

/// File names and paths produced by a run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub files: Vec<PathBuf>,
    pub summary: PathBuf,
}

/// Equal-amplitude superposition of the lowest `m x m` box modes with
/// seeded random phases: the standard relaxing state.
pub fn random_phase_box_state(length: f64, modes_per_axis: usize, seed: u64) -> SpectralState<2> {
    let spec = BasisSpec {
        basis: Basis::BoxSine { length },
        mass: 1.0,
    };
    let mut rng = lane_stream(seed, Lane::Aux, 0xf0);
    let mut modes = Vec::new();
    let mut phases = Vec::new();
    for n1 in 1..=modes_per_axis as i32 {
        for n2 in 1..=modes_per_axis as i32 {
            modes.push([n1, n2]);
            phases.push(rng.gen_range(0.0..2.0 * std::f64::consts::PI));
        }
    }
    SpectralState::equal_superposition(spec, &modes, &phases).expect("valid superposition")
}

/// 1D variant of the random-phase box state.
pub fn random_phase_box_state_1d(length: f64, modes: usize, seed: u64) -> SpectralState<1> {
    let spec = BasisSpec {
        basis: Basis::BoxSine { length },
        mass: 1.0,
    };
    let mut rng = lane_stream(seed, Lane::Aux, 0xf1);
    let m: Vec<[i32; 1]> = (1..=modes as i32).map(|n| [n]).collect();
    let phases: Vec<f64> = (0..modes)
        .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
        .collect();
    SpectralState::equal_superposition(spec, &m, &phases).expect("valid superposition")
}

/// Recurrence time of a box state: all mode phases realign after
/// `4 m L^2 / pi` (energies are `n^2 pi^2 / (2 m L^2)`).
pub fn box_state_period(length: f64, mass: f64) -> f64 {
    4.0 * mass * length * length / std::f64::consts::PI
}

fn rho0_to_spec_2d(
    rho0: &Rho0,
    state: &SpectralState<2>,
    length: f64,
) -> Result<DensitySpec<2>, ScenarioError> {
    Ok(match rho0 {
        Rho0::Born => DensitySpec::BornOf(state.clone()),
        Rho0::BornMode(modes) => {
            if modes.len() != 2 {
                return Err(ScenarioError::Numerical(format!(
                    "born-mode needs 2 indices in 2D, got {modes:?}"
                )));
            }
            let spec = BasisSpec {
                basis: Basis::BoxSine { length },
                mass: 1.0,
            };
            DensitySpec::BornOf(
                SpectralState::eigenmode(spec, [modes[0], modes[1]])
                    .map_err(|e| ScenarioError::Numerical(e.to_string()))?,
            )
        }
        Rho0::Uniform(ranges) => {
            if ranges.len() != 2 {
                return Err(ScenarioError::Numerical(format!(
                    "uniform density needs 2 ranges in 2D, got {}",
                    ranges.len()
                )));
            }
            DensitySpec::UniformOn {
                lo: [ranges[0].0, ranges[1].0],
                hi: [ranges[0].1, ranges[1].1],
            }
        }
    })
}

fn h_series_csv(config: &ScenarioConfig, series: &HSeries) -> String {
    let mut csv = Csv::new(
        &config.hash(),
        config.seed,
        &["t", "h_bar", "sigma_boot", "trapped_frac"],
    );
    for p in &series.points {
        csv.row(&[
            p.t.into(),
            p.h_bar.into(),
            p.sigma_boot.into(),
            series.trapped_frac.into(),
        ]);
    }
    csv.into_string()
}

fn time_grid(t_end: f64, n_times: usize) -> Vec<f64> {
    (0..n_times)
        .map(|i| t_end * i as f64 / (n_times - 1) as f64)
        .collect()
}

/// Compute every output file of a scenario in memory.
///
/// The returned `(file name, content)` pairs are byte-identical for a
/// fixed configuration hash and seed, whatever `workers` says.
pub fn render_outputs(config: &ScenarioConfig) -> Result<Vec<(String, String)>, ScenarioError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| ScenarioError::Numerical(format!("worker pool: {e}")))?;
    pool.install(|| render_in_pool(config))
}

fn render_in_pool(config: &ScenarioConfig) -> Result<Vec<(String, String)>, ScenarioError> {
    let hash = config.hash();
    let seed = config.seed;
    match &config.params {
        Params::Relax(p) => {
            let state = random_phase_box_state(p.length, p.modes_per_axis, seed);
            let spec = rho0_to_spec_2d(&p.rho0, &state, p.length)?;
            let grid = CoarseGrid::<2>::square(0.0, p.length, p.cells)?;
            let times = time_grid(p.t_end, p.n_times);
            let ctrl = StepControl::with_tolerances(p.rtol, p.atol);
            let series =
                ensemble::relaxation_series(&state, &spec, p.n_traj, seed, &grid, &times, &ctrl)?;
            let mut files = vec![("h_series.csv".to_string(), h_series_csv(config, &series))];
            let mut fit_csv = Csv::new(&hash, seed, &["h0", "tau", "r2", "noise_floor"]);
            if let Some(fit) = &series.fit {
                fit_csv.row(&[
                    fit.h0.into(),
                    fit.tau.into(),
                    fit.r2.into(),
                    noise_floor(grid.cell_count(), p.n_traj).into(),
                ]);
            }
            files.push(("fit.csv".to_string(), fit_csv.into_string()));
            Ok(files)
        }
        Params::Measure(p) => {
            let ring = BasisSpec {
                basis: Basis::RingExponential {
                    circumference: 2.0 * std::f64::consts::PI,
                },
                mass: 1.0,
            };
            let c_plus = C64::new(p.weight_plus.sqrt(), 0.0);
            let c_minus = C64::new((1.0 - p.weight_plus).sqrt(), 0.0);
            let system = SpectralState::new(
                ring,
                vec![
                    Term::new([p.momentum], c_plus),
                    Term::new([-p.momentum], c_minus),
                ],
                0.0,
            )?;
            let observable = match p.observable {
                ObservableKind::Position => Observable::Position,
                ObservableKind::Momentum => Observable::Momentum,
                ObservableKind::KineticEnergy => Observable::KineticEnergy,
            };
            let setup = PointerSetup::new(p.coupling, p.sigma, p.duration);
            let (system_density, pointer_density) = match &p.rho0 {
                MeasureRho::Equilibrium => {
                    (DensitySpec::BornOf(system.clone()), PointerDensity::Born)
                }
                MeasureRho::Patch { x, y } => (
                    DensitySpec::UniformOn { lo: [x.0], hi: [x.1] },
                    PointerDensity::UniformOn { lo: y.0, hi: y.1 },
                ),
            };
            let ctrl = StepControl::with_tolerances(p.rtol, p.atol);
            let stats = ensemble_outcomes(
                &system,
                observable,
                &setup,
                &system_density,
                pointer_density,
                p.n_trials,
                seed,
                &ctrl,
            )?;
            let mut trials = Csv::new(
                &hash,
                seed,
                &["trial", "q0", "y0", "outcome", "y_final", "separated"],
            );
            for (i, t) in stats.trials.iter().enumerate() {
                let (outcome, y_final, separated) = match &t.record {
                    Some(r) => (
                        r.outcome.map(|w| Field::Float(w)).unwrap_or(Field::Text("nan".into())),
                        Field::Float(r.pointer_reading),
                        Field::Int(r.collapse_declared as i64),
                    ),
                    None => (
                        Field::Text("trapped".into()),
                        Field::Text("nan".into()),
                        Field::Int(0),
                    ),
                };
                trials.row(&[i.into(), t.q0.into(), t.y0.into(), outcome, y_final, separated]);
            }
            let mut outcomes = Csv::new(&hash, seed, &["omega", "count", "frequency", "sigma"]);
            for &(w, count) in &stats.counts {
                outcomes.row(&[
                    w.into(),
                    count.into(),
                    stats.frequency(w).into(),
                    stats.binomial_sigma(w).into(),
                ]);
            }
            outcomes.row(&[
                "undeclared".into(),
                stats.undeclared.into(),
                (stats.undeclared as f64 / stats.n() as f64).into(),
                0.0.into(),
            ]);
            outcomes.row(&[
                "trapped".into(),
                stats.trapped.into(),
                (stats.trapped as f64 / stats.n() as f64).into(),
                0.0.into(),
            ]);
            Ok(vec![
                ("trials.csv".to_string(), trials.into_string()),
                ("outcomes.csv".to_string(), outcomes.into_string()),
            ])
        }
        Params::Signal(p) => {
            let pair = canonical_signal_pair(p.width_a, p.width_b, p.t_switch, p.width_b_post)?;
            let ctrl = StepControl::with_tolerances(p.rtol, p.atol);
            let result = match p.rho0 {
                SignalRho::Equilibrium => {
                    let born = PairBorn { pair: &pair, t: 0.0 };
                    signal_experiment(&pair, &born, p.n_traj, seed, p.t_probe, p.cells_a, &ctrl)?
                }
                SignalRho::NoneqProduct => {
                    let density = NoneqProduct {
                        width_a: p.width_a,
                        width_b: p.width_b,
                    };
                    signal_experiment(&pair, &density, p.n_traj, seed, p.t_probe, p.cells_a, &ctrl)?
                }
            };
            let mut marginals = Csv::new(
                &hash,
                seed,
                &["cell_lo", "cell_hi", "rho_switched", "rho_unswitched"],
            );
            let grid = result.marginal_switched.grid().clone();
            for i in 0..grid.cell_count() {
                let (lo, hi) = grid.cell_bounds(i);
                marginals.row(&[
                    lo[0].into(),
                    hi[0].into(),
                    result.marginal_switched.values()[i].into(),
                    result.marginal_unswitched.values()[i].into(),
                ]);
            }
            let mut summary = Csv::new(
                &hash,
                seed,
                &["l1_raw", "null_mean", "null_sigma", "l1", "sigma_boot", "trapped"],
            );
            summary.row(&[
                result.l1_raw.into(),
                result.null_mean.into(),
                result.null_sigma.into(),
                result.l1.into(),
                result.sigma_boot.into(),
                result.trapped.into(),
            ]);
            Ok(vec![
                ("marginals.csv".to_string(), marginals.into_string()),
                ("signal.csv".to_string(), summary.into_string()),
            ])
        }
        Params::SternGerlach(p) => {
            let c_up = C64::new(p.weight_up.sqrt(), 0.0);
            let c_down = C64::new((1.0 - p.weight_up).sqrt(), 0.0);
            let sg = SternGerlach::new(c_up, c_down, p.width, p.kick, p.t_end)?;
            let ctrl = StepControl::with_tolerances(p.rtol, p.atol);
            let stats = sg.ensemble(p.n_traj, seed, &ctrl);
            let mut trials = Csv::new(&hash, seed, &["trial", "z0", "outcome"]);
            for (i, (z0, outcome)) in stats.trials.iter().enumerate() {
                let label = match outcome {
                    Some(SgOutcome::Up) => "up",
                    Some(SgOutcome::Down) => "down",
                    None => "failed",
                };
                trials.row(&[i.into(), (*z0).into(), label.into()]);
            }
            let mut outcomes = Csv::new(
                &hash,
                seed,
                &["up", "down", "failed", "up_frequency", "sigma"],
            );
            outcomes.row(&[
                stats.up.into(),
                stats.down.into(),
                stats.failed.into(),
                stats.up_frequency().into(),
                stats.binomial_sigma().into(),
            ]);
            Ok(vec![
                ("trials.csv".to_string(), trials.into_string()),
                ("outcomes.csv".to_string(), outcomes.into_string()),
            ])
        }
        Params::Bohm(p) => {
            let state = random_phase_box_state(p.length, p.modes_per_axis, seed);
            let period = box_state_period(p.length, 1.0);
            let t_end = p.periods * period;
            let times = time_grid(t_end, p.n_times);
            let ctrl = StepControl::with_tolerances(p.rtol, p.atol);
            // Phase-space-perturbed Bohm ensemble.
            let positions = sample(&DensitySpec::BornOf(state.clone()), p.n_bohm, seed)?;
            let deviations = bohm_deviation_series(&state, &positions, p.delta, &times, &ctrl);
            let mut dev_csv = Csv::new(&hash, seed, &["t", "mean_deviation", "surviving"]);
            for (t, dev, n) in &deviations {
                dev_csv.row(&[(*t).into(), (*dev).into(), (*n).into()]);
            }
            // Matched de Broglie relaxation run.
            let spec = rho0_to_spec_2d(&Rho0::BornMode(vec![1, 1]), &state, p.length)?;
            let grid = CoarseGrid::<2>::square(0.0, p.length, p.cells)?;
            let relax_times = time_grid(2.0 * period, p.n_times);
            let series = ensemble::relaxation_series(
                &state,
                &spec,
                p.n_relax,
                seed,
                &grid,
                &relax_times,
                &ctrl,
            )?;
            Ok(vec![
                ("deviation.csv".to_string(), dev_csv.into_string()),
                ("h_series.csv".to_string(), h_series_csv(config, &series)),
            ])
        }
        Params::Subquantum(p) => {
            let box_spec = BasisSpec {
                basis: Basis::BoxSine {
                    length: std::f64::consts::PI,
                },
                mass: 1.0,
            };
            let c = C64::new(0.5_f64.sqrt(), 0.0);
            let system = SpectralState::new(
                box_spec,
                vec![Term::new([1], c), Term::new([2], c)],
                0.0,
            )?;
            let main = subquantum_measure(
                &system,
                p.sigma,
                p.noneq_width,
                p.coupling,
                p.duration,
                p.n_trials,
                seed,
            )?;
            // Equilibrium-width control on the same harness.
            let control = subquantum_measure(
                &system,
                p.sigma,
                p.sigma,
                p.coupling,
                p.duration,
                p.n_trials,
                seed.wrapping_add(1),
            )?;
            let mut trials = Csv::new(&hash, seed, &["trial", "x_true", "x_estimate", "abs_error"]);
            for (i, (x, e)) in main.trials.iter().enumerate() {
                trials.row(&[i.into(), (*x).into(), (*e).into(), (e - x).abs().into()]);
            }
            let mut summary = Csv::new(
                &hash,
                seed,
                &["mean_abs_error", "disturbance", "control_mean_abs_error", "noneq_width", "sigma"],
            );
            summary.row(&[
                main.mean_abs_error.into(),
                main.disturbance.into(),
                control.mean_abs_error.into(),
                p.noneq_width.into(),
                p.sigma.into(),
            ]);
            Ok(vec![
                ("trials.csv".to_string(), trials.into_string()),
                ("subq.csv".to_string(), summary.into_string()),
            ])
        }
        Params::Cosmo(p) => {
            let expansion = match p.expansion {
                ExpansionSpec::Static => Expansion::Static,
                ExpansionSpec::DeSitter { hubble, a0 } => Expansion::DeSitter { hubble, a0 },
                ExpansionSpec::PowerLaw { t0, p: pw, a0 } => {
                    Expansion::PowerLaw { t0: t0, p: pw, a0 }
                }
            };
            let mode = random_phase_mode(p.wavenumber, p.n_lev, p.levels_per_axis, seed)?;
            let half_width = if p.half_width > 0.0 {
                p.half_width
            } else {
                (2.0 * (p.levels_per_axis as f64 + 2.0) + 1.0).sqrt() + 4.0
            };
            let grid = CoarseGrid::<2>::square(-half_width, half_width, p.cells)?;
            let times = time_grid(p.t_end, p.n_times);
            let ctrl = StepControl::with_tolerances(p.rtol, p.atol);
            let ground = ModeOscillator::from_levels(
                p.wavenumber,
                p.n_lev,
                &[((0, 0), C64::new(1.0, 0.0))],
                0.0,
            )?;
            let ground_history = evolve_mode(&ground, &Expansion::Static, 1e-6, Some(1e-6))?;
            let (series, history) = match &p.rho0 {
                CosmoRho::Born => {
                    let pre = evolve_mode(&mode, &expansion, *times.last().unwrap(), None)?;
                    let born = ModeBorn { history: &pre, t: 0.0 };
                    mode_relaxation(&mode, &expansion, &born, p.n_traj, seed, &grid, &times, &ctrl)?
                }
                CosmoRho::GroundBorn => {
                    let born = ModeBorn {
                        history: &ground_history,
                        t: 0.0,
                    };
                    mode_relaxation(&mode, &expansion, &born, p.n_traj, seed, &grid, &times, &ctrl)?
                }
                CosmoRho::Patch { half_width } => {
                    let patch = SquarePatch { half_width: *half_width };
                    mode_relaxation(&mode, &expansion, &patch, p.n_traj, seed, &grid, &times, &ctrl)?
                }
            };
            // Re-run the ensemble to collect positions for xi (the series
            // discards them); reuse the deterministic sampling.
            let positions = match &p.rho0 {
                CosmoRho::Born => {
                    let born = ModeBorn { history: &history, t: 0.0 };
                    sample_density(&born, p.n_traj, seed)?
                }
                CosmoRho::GroundBorn => {
                    let born = ModeBorn {
                        history: &ground_history,
                        t: 0.0,
                    };
                    sample_density(&born, p.n_traj, seed)?
                }
                CosmoRho::Patch { half_width } => {
                    sample_density(&SquarePatch { half_width: *half_width }, p.n_traj, seed)?
                }
            };
            let flow = crate::cosmo::ModeFlow { history: &history };
            let run = ensemble::evolve_flow(&flow, &positions, &times, &ctrl, seed)?;
            let mut csv = Csv::new(&hash, seed, &["t", "h_bar", "xi", "leakage"]);
            for point in &series.points {
                let ratio = power_ratio(&run, &history, point.t, seed)?;
                csv.row(&[
                    point.t.into(),
                    point.h_bar.into(),
                    ratio.xi.into(),
                    history.leakage_at(point.t).into(),
                ]);
            }
            Ok(vec![("mode.csv".to_string(), csv.into_string())])
        }
    }
}

/// Ground-Born at A times uniform on the lower half of B's box.
struct NoneqProduct {
    width_a: f64,
    width_b: f64,
}

impl Density<2> for NoneqProduct {
    fn density(&self, q: [f64; 2]) -> f64 {
        if q[0] < 0.0 || q[0] > self.width_a || q[1] < 0.0 || q[1] > self.width_b / 2.0 {
            return 0.0;
        }
        let k = std::f64::consts::PI / self.width_a;
        let a = 2.0 / self.width_a * (k * q[0]).sin().powi(2);
        a * 2.0 / self.width_b
    }

    fn support(&self) -> ([f64; 2], [f64; 2]) {
        ([0.0, 0.0], [self.width_a, self.width_b / 2.0])
    }
}

struct SquarePatch {
    half_width: f64,
}

impl Density<2> for SquarePatch {
    fn density(&self, q: [f64; 2]) -> f64 {
        if q[0].abs() <= self.half_width && q[1].abs() <= self.half_width {
            1.0 / (4.0 * self.half_width * self.half_width)
        } else {
            0.0
        }
    }

    fn support(&self) -> ([f64; 2], [f64; 2]) {
        (
            [-self.half_width, -self.half_width],
            [self.half_width, self.half_width],
        )
    }
}

/// The canonical entangled pair for signalling runs: two Schmidt terms
/// whose B factors have vanishing slope at B's outer wall, so the sudden
/// widening at `t_switch` re-expands compactly. The switch times on the
/// lattice `t_s = j pi (m L_B^2 / pi^2)`-style recurrences keep that
/// property; the default configuration uses `t_s = pi`.
pub fn canonical_signal_pair(
    width_a: f64,
    width_b: f64,
    t_switch: f64,
    width_b_post: f64,
) -> Result<PairState, ScenarioError> {
    let a_spec = BasisSpec {
        basis: Basis::BoxSine { length: width_a },
        mass: 1.0,
    };
    let b_spec = BasisSpec {
        basis: Basis::BoxSine { length: width_b },
        mass: 1.0,
    };
    let a1 = SpectralState::eigenmode(a_spec, [1])?;
    let a2 = SpectralState::eigenmode(a_spec, [2])?;
    // Slopes of sin(k n x) at x = L are n k cos(n pi) = n k (-1)^n; the
    // combinations (1, -1/3 on modes 1,3) and (1, -1/2 on modes 2,4) have
    // zero wall slope.
    let b1 = SpectralState::normalized(
        b_spec,
        vec![
            Term::new([1], C64::new(1.0, 0.0)),
            Term::new([3], C64::new(-1.0 / 3.0, 0.0)),
        ],
        0.0,
    )?;
    let b2 = SpectralState::normalized(
        b_spec,
        vec![
            Term::new([2], C64::new(1.0, 0.0)),
            Term::new([4], C64::new(-0.5, 0.0)),
        ],
        0.0,
    )?;
    let c = C64::new(0.5_f64.sqrt(), 0.0);
    Ok(PairState::new(
        vec![
            SchmidtTerm { coeff: c, a: a1, b: b1 },
            SchmidtTerm { coeff: c, a: a2, b: b2 },
        ],
        Some(SwitchSpec::new(t_switch, width_b_post)),
    )?)
}

/// Mean |p - grad S| over a phase-space-perturbed Bohm ensemble at each
/// sample time, excluding trapped trajectories (their count shows up as
/// `n - surviving`).
pub fn bohm_deviation_series(
    state: &SpectralState<2>,
    positions: &[[f64; 2]],
    delta: f64,
    times: &[f64],
    ctrl: &StepControl,
) -> Vec<(f64, f64, usize)> {
    use rayon::prelude::*;
    let mass = state.spec().mass;
    let paths: Vec<Option<Vec<PhasePoint<2>>>> = positions
        .par_iter()
        .map(|&q0| {
            let g = state.guidance(q0, times[0]).ok()?;
            let p0 = [
                mass * g.velocity[0] + delta,
                mass * g.velocity[1] + delta,
            ];
            integrate_bohm_2d(
                state,
                PhasePoint { q: q0, p: p0, t: times[0] },
                *times.last().unwrap(),
                ctrl,
                times,
            )
            .ok()
        })
        .collect();
    times
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let mut total = 0.0;
            let mut n = 0usize;
            for path in paths.iter().flatten() {
                let pt = &path[ti];
                if let Ok(g) = state.guidance(pt.q, t) {
                    let dx = pt.p[0] - mass * g.velocity[0];
                    let dy = pt.p[1] - mass * g.velocity[1];
                    total += (dx * dx + dy * dy).sqrt();
                    n += 1;
                }
            }
            (t, if n > 0 { total / n as f64 } else { f64::NAN }, n)
        })
        .collect()
}

/// Superposition of the lowest `l x l` oscillator levels with seeded
/// random phases.
pub fn random_phase_mode(
    wavenumber: f64,
    n_lev: usize,
    levels_per_axis: usize,
    seed: u64,
) -> Result<ModeOscillator, crate::cosmo::CosmoError> {
    let mut rng = lane_stream(seed, Lane::Aux, 0xf2);
    let amp = 1.0 / (levels_per_axis as f64);
    let mut levels = Vec::new();
    for n1 in 0..levels_per_axis {
        for n2 in 0..levels_per_axis {
            let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            levels.push(((n1, n2), C64::from_polar(amp, phase)));
        }
    }
    ModeOscillator::from_levels(wavenumber, n_lev, &levels, 0.0)
}

/// Run a scenario and write its artifacts under `out_dir`.
pub fn run_scenario(config: &ScenarioConfig, out_dir: &Path) -> Result<RunArtifacts, ScenarioError> {
    let started = std::time::Instant::now();
    let outputs = render_outputs(config)?;
    let mut files = Vec::new();
    for (name, content) in &outputs {
        let path = out_dir.join(name);
        write_text(&path, content)?;
        files.push(path);
    }
    let mut summary = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(summary, "scenario = {}", config.scenario.name());
    let _ = writeln!(summary, "config_hash = {}", config.hash());
    let _ = writeln!(summary, "seed = {}", config.seed);
    let _ = writeln!(summary, "workers = {}", config.workers);
    let _ = writeln!(summary, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(summary, "wall_time_s = {:.3}", started.elapsed().as_secs_f64());
    for (name, _) in &outputs {
        let _ = writeln!(summary, "file = {name}");
    }
    let summary_path = out_dir.join("summary.txt");
    write_text(&summary_path, &summary)?;
    write_text(&out_dir.join("config.txt"), &config.emit_canonical())?;
    Ok(RunArtifacts {
        files,
        summary: summary_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scenario;

    fn smoke_config(scenario: Scenario) -> ScenarioConfig {
        let mut config = ScenarioConfig::defaults(scenario);
        config.seed = 7;
        match &mut config.params {
            Params::Relax(p) => {
                p.n_traj = 400;
                p.cells = 8;
                p.t_end = 2.0;
                p.n_times = 3;
            }
            Params::Measure(p) => p.n_trials = 200,
            Params::Signal(p) => {
                p.n_traj = 300;
                p.cells_a = 8;
                p.t_probe = p.t_switch + 0.4;
            }
            Params::SternGerlach(p) => p.n_traj = 200,
            Params::Bohm(p) => {
                p.n_bohm = 20;
                p.n_relax = 300;
                p.cells = 8;
                p.periods = 0.25;
                p.n_times = 3;
            }
            Params::Subquantum(p) => p.n_trials = 100,
            Params::Cosmo(p) => {
                p.n_traj = 300;
                p.cells = 8;
                p.t_end = 1.0;
                p.n_times = 3;
                p.n_lev = 12;
            }
        }
        config
    }

    #[test]
    fn every_scenario_renders_smoke_outputs() {
        for scenario in Scenario::all() {
            let config = smoke_config(scenario);
            let outputs = render_outputs(&config)
                .unwrap_or_else(|e| panic!("{} failed: {e}", scenario.name()));
            assert!(!outputs.is_empty());
            for (name, content) in &outputs {
                assert!(name.ends_with(".csv"));
                assert!(
                    content.starts_with(&format!("# config_hash={}", config.hash())),
                    "{name} missing hash header"
                );
            }
        }
    }

    #[test]
    fn worker_count_does_not_change_output_bytes() {
        for scenario in [Scenario::Relax, Scenario::Measure, Scenario::Cosmo] {
            let mut config = smoke_config(scenario);
            config.workers = 1;
            let one = render_outputs(&config).unwrap();
            config.workers = 2;
            let two = render_outputs(&config).unwrap();
            // The hash ignores workers, so contents must be identical.
            assert_eq!(one, two, "{}", scenario.name());
        }
    }

    #[test]
    fn run_scenario_writes_files_and_summary() {
        let dir = std::env::temp_dir().join(format!("pilotwave-test-{}", std::process::id()));
        let config = smoke_config(Scenario::SternGerlach);
        let artifacts = run_scenario(&config, &dir).unwrap();
        assert!(artifacts.summary.exists());
        for f in &artifacts.files {
            assert!(f.exists());
        }
        let summary = std::fs::read_to_string(&artifacts.summary).unwrap();
        assert!(summary.contains(&format!("config_hash = {}", config.hash())));
        std::fs::remove_dir_all(&dir).ok();
    }
}
