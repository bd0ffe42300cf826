//! Acceptance suite: one test per headline criterion, each printing a
//! PASS/FAIL line. Run with
//! `cargo test -p pilotwave --test acceptance -- --nocapture`.
//!
//! Heavy configurations are shared between criteria through lazy statics,
//! so e.g. the relaxation run backs both the H-theorem criterion and the
//! de Broglie side of the Bohm-instability comparison.

use std::sync::OnceLock;

use num_complex::Complex64 as C64;
use pilotwave::config::{Params, Scenario, ScenarioConfig, SignalRho};
use pilotwave::cosmo::{
    evolve_mode, mode_relaxation, power_ratio, Expansion, ModeBorn, ModeOscillator,
};
use pilotwave::ensemble::{
    self, coarse_born, fit_exponential, h_bar, noise_floor, sample, DensitySpec, HSeries,
};
use pilotwave::grid::{CoarseGrid, DensityField};
use pilotwave::integrate::{integrate_debroglie, StepControl};
use pilotwave::measure::{
    ensemble_outcomes, run_pointer, subquantum_measure, JointState, Observable, PointerDensity,
    PointerSetup, SgOutcome, SternGerlach,
};
use pilotwave::nonlocal::{signal_experiment, PairBorn};
use pilotwave::rng::{lane_stream, Lane};
use pilotwave::scenario::{
    bohm_deviation_series, box_state_period, canonical_signal_pair, random_phase_box_state,
    render_outputs,
};
use pilotwave::spectral::{Basis, BasisSpec, SpectralState, Term, WaveField};
use pilotwave::stats;

use rand::Rng;
use std::f64::consts::PI;

const SEED: u64 = 20260810;

fn check(criterion: &str, ok: bool, detail: String) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {verdict} ({detail})");
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn box_spec() -> BasisSpec {
    BasisSpec {
        basis: Basis::BoxSine { length: PI },
        mass: 1.0,
    }
}

fn ring_spec() -> BasisSpec {
    BasisSpec {
        basis: Basis::RingExponential {
            circumference: 2.0 * PI,
        },
        mass: 1.0,
    }
}

/// The canonical relaxing configuration: 16-mode random-phase state on the
/// 2D box, rho0 = |phi_11|^2, N = 1e5 trajectories, 32^2 cells, ten sample
/// times over two wave-function periods.
struct RelaxRun {
    state: SpectralState<2>,
    series: HSeries,
    grid: CoarseGrid<2>,
    n: usize,
    times: Vec<f64>,
}

fn relax_run() -> &'static RelaxRun {
    static RUN: OnceLock<RelaxRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let state = random_phase_box_state(PI, 4, SEED);
        let grid = CoarseGrid::<2>::square(0.0, PI, 32).unwrap();
        let n = 100_000;
        let period = box_state_period(PI, 1.0);
        let times: Vec<f64> = (0..10).map(|i| 2.0 * period * i as f64 / 9.0).collect();
        let mode11 = SpectralState::eigenmode(box_spec(), [1, 1]).unwrap();
        let series = ensemble::relaxation_series(
            &state,
            &DensitySpec::BornOf(mode11),
            n,
            SEED,
            &grid,
            &times,
            &StepControl::with_tolerances(1e-6, 1e-8),
        )
        .expect("relaxation run");
        RelaxRun {
            state,
            series,
            grid,
            n,
            times,
        }
    })
}

#[test]
fn criterion_01_h_function_suite() {
    let mut rng = lane_stream(SEED, Lane::Aux, 1);
    let grid = CoarseGrid::<1>::new([0.0], [2.0], [8]).unwrap();
    let vol = grid.cell_volume();
    let random_field = |rng: &mut rand_chacha::ChaCha8Rng| {
        let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.01..10.0)).collect();
        let total: f64 = raw.iter().sum::<f64>() * vol;
        DensityField::new(grid.clone(), raw.iter().map(|x| x / total).collect()).unwrap()
    };
    let mut ok = true;
    let mut worst = 0.0_f64;
    for i in 0..1000 {
        let rho = random_field(&mut rng);
        let born = if i % 5 == 0 {
            rho.clone()
        } else {
            random_field(&mut rng)
        };
        let h = h_bar(&rho, &born).unwrap();
        worst = worst.min(h);
        let equal = rho
            .values()
            .iter()
            .zip(born.values())
            .all(|(a, b)| (a - b).abs() < 1e-12);
        ok &= h >= -1e-12;
        if equal {
            ok &= h.abs() <= 1e-12;
        } else {
            ok &= h > 0.0;
        }
    }
    // Frozen two-cell value of the direct sum.
    let g2 = CoarseGrid::<1>::new([0.0], [1.0], [2]).unwrap();
    let rho = DensityField::new(g2.clone(), vec![1.6, 0.4]).unwrap();
    let born = DensityField::new(g2, vec![1.0, 1.0]).unwrap();
    let expect = 0.5 * (1.6 * 1.6_f64.ln() + 0.4 * 0.4_f64.ln());
    let got = h_bar(&rho, &born).unwrap();
    ok &= (got - expect).abs() < 1e-12;
    check(
        "01 h-function",
        ok,
        format!("1000 field pairs, min H = {worst:.2e}, two-cell |err| = {:.2e}", (got - expect).abs()),
    );
}

#[test]
fn criterion_02_equilibrium_preservation() {
    let state = random_phase_box_state(PI, 4, SEED);
    let grid = CoarseGrid::<2>::square(0.0, PI, 32).unwrap();
    let n = 100_000;
    let period = box_state_period(PI, 1.0);
    let times: Vec<f64> = (0..10).map(|i| 2.0 * period * i as f64 / 9.0).collect();
    let series = ensemble::relaxation_series(
        &state,
        &DensitySpec::BornOf(state.clone()),
        n,
        SEED + 1,
        &grid,
        &times,
        &StepControl::with_tolerances(1e-6, 1e-8),
    )
    .expect("equilibrium run");
    let floor = noise_floor(grid.cell_count(), n);
    let max_h = series
        .points
        .iter()
        .map(|p| p.h_bar)
        .fold(f64::NEG_INFINITY, f64::max);
    let ok = series.points.iter().all(|p| p.h_bar < floor) && series.trapped_frac < 1e-3;
    check(
        "02 equilibrium-preservation",
        ok,
        format!(
            "max H = {max_h:.3e} vs floor {floor:.3e}, trapped {:.1e}",
            series.trapped_frac
        ),
    );
}

#[test]
fn criterion_03_relaxation_decay() {
    let run = relax_run();
    let series = &run.series;
    let h0 = series.points[0].h_bar;
    let h_end = series.points.last().unwrap().h_bar;
    let decayed = h_end < 0.2 * h0;
    let mut no_big_rise = true;
    for w in series.points.windows(2) {
        let sigma = w[0].sigma_boot.max(w[1].sigma_boot);
        if w[1].h_bar - w[0].h_bar > 3.0 * sigma {
            no_big_rise = false;
        }
    }
    let floor = noise_floor(run.grid.cell_count(), run.n);
    let window = series.window_above(5.0 * floor);
    let fit = fit_exponential(series, window).expect("fit window");
    let ok = decayed && no_big_rise && fit.r2 > 0.9 && series.trapped_frac < 1e-3;
    check(
        "03 relaxation",
        ok,
        format!(
            "H(0) = {h0:.3}, H(end) = {h_end:.3e} ({}x), fit tau = {:.2}, R^2 = {:.3}, trapped {:.1e}",
            h_end / h0,
            fit.tau,
            fit.r2,
            series.trapped_frac
        ),
    );
}

#[test]
fn criterion_04_trivial_fields_do_not_relax() {
    let mode = SpectralState::eigenmode(box_spec(), [2, 1]).unwrap();
    let grid = CoarseGrid::<2>::square(0.0, PI, 16).unwrap();
    let times: Vec<f64> = (0..6).map(|i| i as f64 * 2.0).collect();
    let series = ensemble::relaxation_series(
        &mode,
        &DensitySpec::UniformOn {
            lo: [0.4, 0.6],
            hi: [2.2, 2.6],
        },
        20_000,
        SEED + 2,
        &grid,
        &times,
        &StepControl::default(),
    )
    .expect("static run");
    let h0 = series.points[0].h_bar;
    let max_dev = series
        .points
        .iter()
        .map(|p| (p.h_bar - h0).abs())
        .fold(0.0, f64::max);
    // v = 0 freezes the ensemble: H is constant to roundoff, far inside
    // any noise allowance.
    let ok = h0 > 0.1 && max_dev < 1e-9;
    check(
        "04 non-relaxing",
        ok,
        format!("H(0) = {h0:.3}, max |H(t) - H(0)| = {max_dev:.2e}"),
    );
}

#[test]
fn criterion_05_measurement_examples() {
    let ctrl = StepControl::default();
    // Position: the pointer reads a T x0 exactly; the particle never moves.
    let sys_box = {
        let c = C64::new(0.5_f64.sqrt(), 0.0);
        SpectralState::new(box_spec(), vec![Term::new([1], c), Term::new([2], c)], 0.0).unwrap()
    };
    let setup = PointerSetup::new(1.0, 0.1, 1.0);
    let mut pos_ok = true;
    let mut worst_pos = 0.0_f64;
    for (q0, y0) in [(0.6, 0.02), (1.5, -0.07), (2.7, 0.11)] {
        let (path, record) =
            run_pointer(&sys_box, Observable::Position, &setup, q0, y0, &ctrl).unwrap();
        let y_err = (record.pointer_reading - (y0 + q0)).abs();
        worst_pos = worst_pos.max(y_err);
        pos_ok &= y_err < 1e-6;
        pos_ok &= path.iter().all(|p| (p.q[0] - q0).abs() < 1e-9);
    }

    // Momentum on cos(2x): outcomes +-2 while the initial velocity is 0.
    let cos_state = {
        let c = C64::new(0.5_f64.sqrt(), 0.0);
        SpectralState::new(ring_spec(), vec![Term::new([2], c), Term::new([-2], c)], 0.0).unwrap()
    };
    let joint = JointState::new(cos_state.clone(), Observable::Momentum, setup).unwrap();
    let stats_p = ensemble_outcomes(
        &cos_state,
        Observable::Momentum,
        &setup,
        &DensitySpec::BornOf(cos_state.clone()),
        PointerDensity::Born,
        400,
        SEED + 3,
        &StepControl::with_tolerances(1e-7, 1e-9),
    )
    .unwrap();
    let mut mom_ok = stats_p.trapped == 0 && stats_p.undeclared == 0;
    mom_ok &= stats_p
        .counts
        .iter()
        .all(|(w, _)| (w.abs() - 2.0).abs() < 1e-9);
    mom_ok &= stats_p.counts.len() == 2;
    for trial in stats_p.trials.iter().take(100) {
        let v0 = joint.velocity(trial.q0, trial.y0, 0.0).unwrap();
        mom_ok &= v0[0].abs() < 1e-9;
    }

    // Kinetic energy on the same state: outcome p^2/2m always, the wave
    // function is undisturbed, and x never moves.
    let stats_k = ensemble_outcomes(
        &cos_state,
        Observable::KineticEnergy,
        &setup,
        &DensitySpec::BornOf(cos_state.clone()),
        PointerDensity::Born,
        400,
        SEED + 4,
        &StepControl::with_tolerances(1e-7, 1e-9),
    )
    .unwrap();
    let mut kin_ok = stats_k.trapped == 0 && stats_k.undeclared == 0;
    kin_ok &= stats_k.counts.len() == 1 && (stats_k.counts[0].0 - 2.0).abs() < 1e-9;
    kin_ok &= stats_k.counts[0].1 == 400;
    // Fidelity of the effective state with psi0.
    let rule = cos_state.quadrature_rule();
    let mut min_fidelity = 1.0_f64;
    for trial in stats_k.trials.iter().take(50) {
        let record = trial.record.as_ref().unwrap();
        let eff = record.effective_state.as_ref().unwrap();
        let mut overlap = C64::new(0.0, 0.0);
        rule.for_each(|q, w| {
            overlap += w * cos_state.sample(q, 0.0).value.conj() * eff.sample(q, 0.0).value;
        });
        min_fidelity = min_fidelity.min(overlap.norm());
    }
    kin_ok &= min_fidelity > 1.0 - 1e-6;
    // x at rest: v_x vanishes identically along the run.
    let (path_k, _) =
        run_pointer(&cos_state, Observable::KineticEnergy, &setup, 1.3, 0.05, &ctrl).unwrap();
    kin_ok &= path_k.iter().all(|p| (p.q[0] - 1.3).abs() < 1e-9);

    check(
        "05 measurement-examples",
        pos_ok && mom_ok && kin_ok,
        format!(
            "position max err {worst_pos:.1e}; momentum outcomes {:?}; kinetic fidelity >= {min_fidelity:.9}",
            stats_p.counts.iter().map(|(w, c)| (*w, *c)).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_06_born_outcome_statistics() {
    let c_plus = C64::new(0.8, 0.0);
    let c_minus = C64::new(0.0, 0.6);
    let system = SpectralState::new(
        ring_spec(),
        vec![Term::new([2], c_plus), Term::new([-2], c_minus)],
        0.0,
    )
    .unwrap();
    let setup = PointerSetup::new(1.0, 0.1, 1.0);
    let n = 10_000;
    let stats = ensemble_outcomes(
        &system,
        Observable::Momentum,
        &setup,
        &DensitySpec::BornOf(system.clone()),
        PointerDensity::Born,
        n,
        SEED + 5,
        &StepControl::with_tolerances(1e-7, 1e-9),
    )
    .unwrap();
    let f = stats.frequency(2.0);
    let sigma = (0.64 * 0.36 / n as f64).sqrt();
    let ok = (f - 0.64).abs() <= 3.0 * sigma && stats.trapped == 0;
    check(
        "06 born-statistics",
        ok,
        format!("freq(+2) = {f:.4} vs 0.64 +- {:.4} (3 sigma)", 3.0 * sigma),
    );
}

#[test]
fn criterion_07_stern_gerlach() {
    let ctrl = StepControl::with_tolerances(1e-7, 1e-9);
    // Symmetric case: the outcome is exactly the sign of z0.
    let c = C64::new(0.5_f64.sqrt(), 0.0);
    let sg_sym = SternGerlach::new(c, c, 1.0, 2.0, 4.0).unwrap();
    let mut rng = lane_stream(SEED, Lane::Aux, 7);
    let mut sign_ok = true;
    for _ in 0..1000 {
        let z0: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
        if z0 == 0.0 {
            continue;
        }
        let (_, outcome) = sg_sym.run(z0, &ctrl).unwrap();
        let want = if z0 > 0.0 { SgOutcome::Up } else { SgOutcome::Down };
        sign_ok &= outcome == want;
    }
    // Equilibrium frequencies match the Born weights.
    let sg = SternGerlach::new(
        C64::new(0.3_f64.sqrt(), 0.0),
        C64::new(0.7_f64.sqrt(), 0.0),
        1.0,
        2.0,
        4.0,
    )
    .unwrap();
    let stats = sg.ensemble(10_000, SEED + 6, &ctrl);
    let f = stats.up_frequency();
    let sigma = (0.3 * 0.7 / stats.n as f64).sqrt();
    let freq_ok = (f - 0.3).abs() <= 3.0 * sigma && stats.failed == 0;
    check(
        "07 stern-gerlach",
        sign_ok && freq_ok,
        format!("sign test exact on 1000; up-freq {f:.4} vs 0.3 +- {:.4}", 3.0 * sigma),
    );
}

#[test]
fn criterion_08_no_signalling_vs_signalling() {
    let t_switch = PI;
    let t_probe = PI + 1.2;
    let pair = canonical_signal_pair(PI, PI, t_switch, 2.0 * PI).unwrap();
    let ctrl = StepControl::with_tolerances(1e-6, 1e-8);
    let n_eq = 100_000;
    let born = PairBorn { pair: &pair, t: 0.0 };
    let eq = signal_experiment(&pair, &born, n_eq, SEED + 7, t_probe, 32, &ctrl).unwrap();
    let eq_ok = eq.l1 < 3.0 * eq.null_sigma && eq.trapped < n_eq / 1000;

    struct NoneqProduct;
    impl ensemble::Density<2> for NoneqProduct {
        fn density(&self, q: [f64; 2]) -> f64 {
            if q[0] < 0.0 || q[0] > PI || q[1] < 0.0 || q[1] > PI / 2.0 {
                return 0.0;
            }
            (2.0 / PI * q[0].sin().powi(2)) * (2.0 / PI)
        }
        fn support(&self) -> ([f64; 2], [f64; 2]) {
            ([0.0, 0.0], [PI, PI / 2.0])
        }
    }
    let n_neq = 40_000;
    let neq = signal_experiment(&pair, &NoneqProduct, n_neq, SEED + 8, t_probe, 32, &ctrl).unwrap();
    let neq_ok = neq.l1 > 5.0 * eq.noise_floor();
    check(
        "08 signalling",
        eq_ok && neq_ok,
        format!(
            "equilibrium L1 = {:.4e} (3 null sigma {:.4e}); noneq L1 = {:.4} vs 5x floor {:.4}",
            eq.l1,
            3.0 * eq.null_sigma,
            neq.l1,
            5.0 * eq.noise_floor()
        ),
    );
}

#[test]
fn criterion_09_bohm_instability() {
    let run = relax_run();
    // The de Broglie side relaxes (checked independently by criterion 3);
    // here the matched Bohm ensemble's momentum deviation must not decay.
    let h0 = run.series.points[0].h_bar;
    let h_end = run.series.points.last().unwrap().h_bar;
    let debroglie_ok = h_end < 0.2 * h0;

    let period = box_state_period(PI, 1.0);
    let times: Vec<f64> = (0..11).map(|i| 10.0 * period * i as f64 / 10.0).collect();
    let n = 400;
    let positions = sample(&DensitySpec::BornOf(run.state.clone()), n, SEED + 9).unwrap();
    let ctrl = StepControl::with_tolerances(1e-6, 1e-8);
    let deviations = bohm_deviation_series(&run.state, &positions, 0.1, &times, &ctrl);
    let (t0, dev0, n0) = deviations[0];
    let (t_end, dev_end, n_end) = *deviations.last().unwrap();
    let surviving_frac = n_end as f64 / n as f64;
    let ok = debroglie_ok && dev_end >= dev0 && surviving_frac > 0.9;
    check(
        "09 bohm-instability",
        ok,
        format!(
            "|p - grad S|: {dev0:.4} (t={t0:.1}, n={n0}) -> {dev_end:.4} (t={t_end:.1}, n={n_end}); de Broglie H {h0:.3} -> {h_end:.3e}"
        ),
    );
}

#[test]
fn criterion_10_subquantum_measurement() {
    let c = C64::new(0.5_f64.sqrt(), 0.0);
    let system =
        SpectralState::new(box_spec(), vec![Term::new([1], c), Term::new([2], c)], 0.0).unwrap();
    let sigma = 100.0;
    let w = sigma / 100.0;
    let n = 10_000;
    let main = subquantum_measure(&system, sigma, w, 1.0, 1.0, n, SEED + 10).unwrap();
    let control = subquantum_measure(&system, sigma, sigma, 1.0, 1.0, n, SEED + 11).unwrap();
    let ok = main.mean_abs_error <= 1.1 * w
        && main.disturbance <= 1e-4
        && control.mean_abs_error > 0.5 * sigma
        && control.mean_abs_error < 1.2 * sigma;
    check(
        "10 subquantum",
        ok,
        format!(
            "error {:.4} (<= {:.2}), disturbance {:.2e} (<= 1e-4), control error {:.1} ~ sigma {sigma}",
            main.mean_abs_error,
            1.1 * w,
            main.disturbance,
            control.mean_abs_error
        ),
    );
}

#[test]
fn criterion_11_conservation_diagnostics() {
    // Reflection-symmetric two-mode state: in a box the momentum-rate
    // integral keeps a wall boundary term unless the state is symmetric,
    // so the free-space identities are probed on odd modes 1 and 3.
    let c = C64::new(0.5_f64.sqrt(), 0.0);
    let state =
        SpectralState::new(box_spec(), vec![Term::new([1], c), Term::new([3], c)], 0.0).unwrap();
    let mut rng = lane_stream(SEED, Lane::Aux, 11);
    let mut ok = true;
    let mut worst = 0.0_f64;
    for _ in 0..5 {
        let t = rng.gen_range(0.0..4.0 * PI);
        let rates = ensemble::equilibrium_rate_check(&state, t).unwrap();
        let bound = rates
            .energy_rate
            .abs()
            .max(rates.momentum_rate[0].abs());
        worst = worst.max(bound);
        ok &= bound < 1e-6;
    }
    check(
        "11 conservation",
        ok,
        format!("max |integral| over 5 random times = {worst:.2e} (< 1e-6)"),
    );
}

#[test]
fn criterion_12_cosmology_retardation() {
    // Paired de Sitter runs, k/(a0 H) = 10 vs 0.1, prepared matched to the
    // reference basis (a0 = k^{-1/2}).
    let hubble = 0.02;
    let k_sub = (10.0_f64 * hubble).powf(2.0 / 3.0);
    let k_sup = (0.1_f64 * hubble).powf(2.0 / 3.0);
    let n_lev = 24;
    let levels: Vec<((usize, usize), C64)> = {
        let mut rng = lane_stream(SEED, Lane::Aux, 12);
        let mut out = Vec::new();
        for n1 in 0..3 {
            for n2 in 0..3 {
                out.push((
                    (n1, n2),
                    C64::from_polar(1.0 / 3.0, rng.gen_range(0.0..2.0 * PI)),
                ));
            }
        }
        out
    };
    let grid = CoarseGrid::<2>::square(-6.0, 6.0, 32).unwrap();
    let n = 30_000;
    let t_end = 16.0;
    let times: Vec<f64> = (0..9).map(|i| t_end * i as f64 / 8.0).collect();
    let ctrl = StepControl::with_tolerances(1e-6, 1e-8);
    let floor = noise_floor(grid.cell_count(), n);

    let ground = ModeOscillator::from_levels(k_sub, n_lev, &[((0, 0), C64::new(1.0, 0.0))], 0.0)
        .unwrap();
    let ground_history = evolve_mode(&ground, &Expansion::Static, 1e-6, Some(1e-6)).unwrap();
    let rho0 = ModeBorn {
        history: &ground_history,
        t: 0.0,
    };

    let tau_of = |k: f64| -> (f64, bool, HSeries) {
        let mode = ModeOscillator::from_levels(k, n_lev, &levels, 0.0).unwrap();
        let expansion = Expansion::DeSitter {
            hubble,
            a0: 1.0 / k.sqrt(),
        };
        let (series, _history) =
            mode_relaxation(&mode, &expansion, &rho0, n, SEED + 12, &grid, &times, &ctrl)
                .expect("mode relaxation");
        let window = series.window_above(5.0 * floor);
        match fit_exponential(&series, window) {
            Ok(fit) => (fit.tau, true, series),
            // A flat series has no decay to fit: infinitely retarded.
            Err(_) => (f64::INFINITY, false, series),
        }
    };
    let (tau_sub, sub_fitted, sub_series) = tau_of(k_sub);
    let (tau_sup, _, sup_series) = tau_of(k_sup);
    let ratio = tau_sup / tau_sub;
    let retard_ok = sub_fitted && ratio > 2.0;

    // Static limit: the module must reproduce the ensemble machinery on
    // the plain 2D oscillator within statistical error.
    let static_mode = ModeOscillator::from_levels(1.0, n_lev, &levels, 0.0).unwrap();
    let static_times: Vec<f64> = (0..6).map(|i| 6.0 * i as f64 / 5.0).collect();
    let n_static = 20_000;
    let (cosmo_series, _) = mode_relaxation(
        &static_mode,
        &Expansion::Static,
        &rho0,
        n_static,
        SEED + 13,
        &grid,
        &static_times,
        &ctrl,
    )
    .unwrap();
    let osc_spec = BasisSpec {
        basis: Basis::OscillatorHermite { frequency: 1.0 },
        mass: 1.0,
    };
    let terms: Vec<Term<2>> = levels
        .iter()
        .map(|&((n1, n2), c)| Term::new([n1 as i32, n2 as i32], c))
        .collect();
    let spectral = SpectralState::new(osc_spec, terms, 0.0).unwrap();
    let ground_spectral = SpectralState::eigenmode(osc_spec, [0, 0]).unwrap();
    let ens_series = ensemble::relaxation_series(
        &spectral,
        &DensitySpec::BornOf(ground_spectral),
        n_static,
        SEED + 13,
        &grid,
        &static_times,
        &ctrl,
    )
    .unwrap();
    let mut static_ok = true;
    let mut max_gap = 0.0_f64;
    for (a, b) in cosmo_series.points.iter().zip(&ens_series.points) {
        let tol = 3.0 * (a.sigma_boot + b.sigma_boot) + 0.05 * a.h_bar.max(b.h_bar);
        max_gap = max_gap.max((a.h_bar - b.h_bar).abs());
        static_ok &= (a.h_bar - b.h_bar).abs() <= tol;
    }

    // Equilibrium power ratio: xi = 1 within errors.
    let eq_mode = ModeOscillator::from_levels(1.0, n_lev, &levels, 0.0).unwrap();
    let eq_history = evolve_mode(&eq_mode, &Expansion::Static, 1.0, None).unwrap();
    let eq_born = ModeBorn {
        history: &eq_history,
        t: 0.0,
    };
    let eq_positions = ensemble::sample_density(&eq_born, 20_000, SEED + 14).unwrap();
    let flow = pilotwave::cosmo::ModeFlow {
        history: &eq_history,
    };
    let eq_times = [0.0, 0.5, 1.0];
    let eq_run = ensemble::evolve_flow(&flow, &eq_positions, &eq_times, &ctrl, SEED + 14).unwrap();
    let xi = power_ratio(&eq_run, &eq_history, 1.0, SEED + 14).unwrap();
    let xi_ok = (xi.xi - 1.0).abs() <= 3.0 * xi.sigma_boot;

    check(
        "12 cosmology",
        retard_ok && static_ok && xi_ok,
        format!(
            "tau_sub = {tau_sub:.2}, tau_super = {tau_sup:.2} (ratio {ratio:.2} > 2); sub H: {:.3} -> {:.3e}, super H: {:.3} -> {:.3}; static max gap {max_gap:.3e}; xi = {:.4} +- {:.4}",
            sub_series.points[0].h_bar,
            sub_series.points.last().unwrap().h_bar,
            sup_series.points[0].h_bar,
            sup_series.points.last().unwrap().h_bar,
            xi.xi,
            xi.sigma_boot
        ),
    );
}

#[test]
fn criterion_13_engineering() {
    // Bit-identical outputs across worker counts 1/2/8.
    let mut config = ScenarioConfig::defaults(Scenario::Relax);
    config.seed = SEED;
    if let Params::Relax(p) = &mut config.params {
        p.n_traj = 2000;
        p.cells = 16;
        p.t_end = 2.0;
        p.n_times = 4;
    }
    let mut renders = Vec::new();
    for workers in [1usize, 2, 8] {
        config.workers = workers;
        renders.push(render_outputs(&config).unwrap());
    }
    let deterministic = renders[0] == renders[1] && renders[0] == renders[2];

    // Integrator time reversal on the two-mode state.
    let c = C64::new(0.5_f64.sqrt(), 0.0);
    let state =
        SpectralState::new(box_spec(), vec![Term::new([1], c), Term::new([2], c)], 0.0).unwrap();
    let ctrl = StepControl::default();
    let fwd = integrate_debroglie(&state, [1.3], 0.0, 2.0 * PI, &ctrl, &[2.0 * PI]).unwrap();
    let back = integrate_debroglie(&state, fwd[0].q, 2.0 * PI, 0.0, &ctrl, &[0.0]).unwrap();
    let reversal_err = (back[0].q[0] - 1.3).abs();

    // Canonical-form round trip for every scenario.
    let mut round_trip = true;
    for scenario in Scenario::all() {
        let mut cfg = ScenarioConfig::defaults(scenario);
        cfg.seed = 987;
        cfg.workers = 3;
        let text = cfg.emit_canonical();
        round_trip &= pilotwave::config::parse_config(&text).map(|p| p == cfg).unwrap_or(false);
    }

    let ok = deterministic && reversal_err < 1e-6 && round_trip;
    check(
        "13 engineering",
        ok,
        format!(
            "workers 1/2/8 byte-identical: {deterministic}; reversal error {reversal_err:.2e}; round-trip all scenarios: {round_trip}"
        ),
    );
}

/// Extra guard used by several criteria: the Born field of the relaxing
/// state keeps unit mass on the coarse grid at every sample time.
#[test]
fn born_fields_stay_normalized_along_the_run() {
    let run = relax_run();
    for &t in run.times.iter().step_by(3) {
        let field = coarse_born(&run.state, t, &run.grid).unwrap();
        let mass: f64 = field.values().iter().sum::<f64>() * run.grid.cell_volume();
        assert!((mass - 1.0).abs() < 1e-9, "mass {mass} at t = {t}");
    }
}
