use super::*;
use crate::spectral::{Basis, BasisSpec, SpectralState, Term};
use approx::assert_abs_diff_eq;
use num_complex::Complex64 as C64;
use std::f64::consts::PI;

fn box_spec() -> BasisSpec {
    BasisSpec {
        basis: Basis::BoxSine { length: PI },
        mass: 1.0,
    }
}

fn two_mode_box() -> SpectralState<1> {
    let c = C64::new(0.5_f64.sqrt(), 0.0);
    SpectralState::new(box_spec(), vec![Term::new([1], c), Term::new([2], c)], 0.0).unwrap()
}

/// Independent brute-force oracle: classical RK4 at a fixed small step.
fn rk4_oracle(state: &SpectralState<1>, q0: f64, t0: f64, t1: f64, dt: f64) -> f64 {
    let f = |t: f64, q: f64| state.guidance([q], t).unwrap().velocity[0];
    let n = ((t1 - t0).abs() / dt).round().max(1.0) as usize;
    let h = (t1 - t0) / n as f64;
    let mut q = q0;
    let mut t = t0;
    for _ in 0..n {
        let k1 = f(t, q);
        let k2 = f(t + 0.5 * h, q + 0.5 * h * k1);
        let k3 = f(t + 0.5 * h, q + 0.5 * h * k2);
        let k4 = f(t + h, q + h * k3);
        q += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t += h;
    }
    q
}

#[test]
fn eigenmode_trajectories_stay_put() {
    let state = SpectralState::eigenmode(box_spec(), [3]).unwrap();
    let samples: Vec<f64> = (0..=8).map(|i| i as f64).collect();
    for &q0 in &[0.4, 1.3, 2.8] {
        let pts =
            integrate_debroglie(&state, [q0], 0.0, 8.0, &StepControl::default(), &samples).unwrap();
        for p in pts {
            assert_abs_diff_eq!(p.q[0], q0, epsilon = 1e-9);
        }
    }
}

#[test]
fn forward_backward_returns_to_start() {
    let state = two_mode_box();
    let ctrl = StepControl::default();
    let q0 = 1.3;
    let fwd = integrate_debroglie(&state, [q0], 0.0, 2.0 * PI, &ctrl, &[2.0 * PI]).unwrap();
    let back =
        integrate_debroglie(&state, fwd[0].q, 2.0 * PI, 0.0, &ctrl, &[0.0]).unwrap();
    assert_abs_diff_eq!(back[0].q[0], q0, epsilon = 1e-6);
}

#[test]
fn matches_small_step_rk4_oracle() {
    let state = two_mode_box();
    let t1 = 2.0 * PI;
    let got = integrate_debroglie(&state, [1.3], 0.0, t1, &StepControl::default(), &[t1]).unwrap();
    let want = rk4_oracle(&state, 1.3, 0.0, t1, 1e-5);
    assert_abs_diff_eq!(got[0].q[0], want, epsilon = 1e-5);
}

#[test]
fn dense_output_matches_oracle_between_steps() {
    let state = two_mode_box();
    let samples: Vec<f64> = (1..=10).map(|i| 0.37 * i as f64).collect();
    let pts =
        integrate_debroglie(&state, [0.9], 0.0, 3.7, &StepControl::default(), &samples).unwrap();
    for p in &pts {
        let want = rk4_oracle(&state, 0.9, 0.0, p.t, 1e-5);
        assert_abs_diff_eq!(p.q[0], want, epsilon = 2e-5);
    }
}

#[test]
fn identical_inputs_give_bit_identical_trajectories() {
    let state = two_mode_box();
    let samples: Vec<f64> = (1..=20).map(|i| 0.3 * i as f64).collect();
    let ctrl = StepControl::default();
    let a = integrate_debroglie(&state, [0.7], 0.0, 6.0, &ctrl, &samples).unwrap();
    let b = integrate_debroglie(&state, [0.7], 0.0, 6.0, &ctrl, &samples).unwrap();
    for (pa, pb) in a.iter().zip(&b) {
        assert!(pa.q[0].to_bits() == pb.q[0].to_bits());
    }
}

#[test]
fn halving_tolerances_reduces_error_monotonically() {
    let state = two_mode_box();
    let t1 = 2.0 * PI;
    let want = rk4_oracle(&state, 1.3, 0.0, t1, 1e-5);
    let mut errors = Vec::new();
    let mut rtol = 1e-4;
    for _ in 0..4 {
        let ctrl = StepControl::with_tolerances(rtol, rtol * 1e-2);
        let got = integrate_debroglie(&state, [1.3], 0.0, t1, &ctrl, &[t1]).unwrap();
        errors.push((got[0].q[0] - want).abs());
        rtol *= 0.5;
    }
    for w in errors.windows(2) {
        assert!(
            w[1] <= w[0] * 1.05 + 1e-12,
            "errors not monotone: {errors:?}"
        );
    }
}

#[test]
fn reflection_symmetric_state_gives_reflected_trajectories() {
    // Odd box modes are symmetric under x -> L - x, so the velocity field
    // is antisymmetric and trajectories reflect exactly.
    let c = C64::new(0.5_f64.sqrt(), 0.0);
    let state = SpectralState::new(
        box_spec(),
        vec![Term::new([1], c), Term::new([3], c)],
        0.0,
    )
    .unwrap();
    let samples: Vec<f64> = (1..=10).map(|i| 0.2 * i as f64).collect();
    let ctrl = StepControl::with_tolerances(1e-11, 1e-13);
    let a = integrate_debroglie(&state, [0.8], 0.0, 2.0, &ctrl, &samples).unwrap();
    let b = integrate_debroglie(&state, [PI - 0.8], 0.0, 2.0, &ctrl, &samples).unwrap();
    for (pa, pb) in a.iter().zip(&b) {
        assert_abs_diff_eq!(pa.q[0], PI - pb.q[0], epsilon = 1e-8);
    }
}

#[test]
fn node_trap_reports_last_good_point() {
    // A synthetic flow that fails for q > 0.5: constant drift to the right
    // must end in a trap whose last good point is at or below the barrier.
    struct Barrier;
    impl Flow<1> for Barrier {
        fn velocity(&self, _t: f64, q: [f64; 1]) -> Result<[f64; 1], FieldError> {
            if q[0] > 0.5 {
                Err(FieldError::Node { density: 0.0 })
            } else {
                Ok([1.0])
            }
        }
        fn domain(&self) -> Domain<1> {
            Domain::uniform(AxisDomain::Line)
        }
    }
    match integrate_flow(&Barrier, [0.0], 0.0, 2.0, &StepControl::default(), &[2.0]) {
        Err(IntegrateError::NodeTrap { t, q, .. }) => {
            assert!(q[0] <= 0.5 + 1e-9);
            assert!(t < 2.0);
        }
        other => panic!("expected node trap, got {other:?}"),
    }
}

#[test]
fn bohm_with_equilibrium_momentum_tracks_de_broglie() {
    let state = two_mode_box();
    let q0 = [1.1];
    let p0 = [state.guidance(q0, 0.0).unwrap().velocity[0] * state.spec().mass];
    let t1 = 4.0 * PI;
    let samples: Vec<f64> = (1..=16).map(|i| t1 * i as f64 / 16.0).collect();
    let ctrl = StepControl::default();
    let bohm = integrate_bohm(
        &state,
        PhasePoint { q: q0, p: p0, t: 0.0 },
        t1,
        &ctrl,
        &samples,
    )
    .unwrap();
    let debroglie = integrate_debroglie(&state, q0, 0.0, t1, &ctrl, &samples).unwrap();
    for (b, d) in bohm.iter().zip(&debroglie) {
        assert!(
            (b.q[0] - d.q[0]).abs() < 1e-5,
            "t={} bohm={} debroglie={}",
            b.t,
            b.q[0],
            d.q[0]
        );
    }
}

#[test]
fn bohm_eigenmode_at_rest_stays_at_rest() {
    // For an eigenmode Q is constant inside the box, so grad(V + Q) = 0.
    let state = SpectralState::eigenmode(box_spec(), [2]).unwrap();
    let samples = [1.0, 2.0, 3.0];
    let out = integrate_bohm(
        &state,
        PhasePoint { q: [0.7], p: [0.0], t: 0.0 },
        3.0,
        &StepControl::default(),
        &samples,
    )
    .unwrap();
    for p in out {
        assert_abs_diff_eq!(p.q[0], 0.7, epsilon = 1e-8);
        assert_abs_diff_eq!(p.p[0], 0.0, epsilon = 1e-8);
    }
}

#[test]
fn bohm_momentum_perturbation_does_not_relax() {
    let state = two_mode_box();
    let q0 = [1.1];
    let v0 = state.guidance(q0, 0.0).unwrap().velocity[0];
    let t1 = 40.0 * PI; // ten wave-function periods
    let samples = [t1];
    let out = integrate_bohm(
        &state,
        PhasePoint { q: q0, p: [v0 + 0.1], t: 0.0 },
        t1,
        &StepControl::with_tolerances(1e-8, 1e-10),
        &samples,
    )
    .unwrap();
    let end = &out[0];
    let v_end = state.guidance(end.q, end.t).unwrap().velocity[0];
    let deviation = (end.p[0] - v_end).abs();
    assert!(
        deviation > 1e-2,
        "momentum deviation decayed to {deviation}"
    );
}
