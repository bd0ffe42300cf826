use super::*;
use approx::assert_abs_diff_eq;
use num_complex::Complex64 as C64;
use std::f64::consts::PI;

fn box_state(width: f64, terms: &[(i32, f64)]) -> SpectralState<1> {
    let spec = BasisSpec {
        basis: Basis::BoxSine { length: width },
        mass: 1.0,
    };
    let t: Vec<Term<1>> = terms
        .iter()
        .map(|&(n, c)| Term::new([n], C64::new(c, 0.0)))
        .collect();
    SpectralState::normalized(spec, t, 0.0).unwrap()
}

/// B factors whose slope vanishes at the outer wall, so a sudden widening
/// needs only a handful of modes.
fn wall_smooth_pair(switch: Option<SwitchSpec>) -> PairState {
    let c = C64::new(0.5_f64.sqrt(), 0.0);
    PairState::new(
        vec![
            SchmidtTerm {
                coeff: c,
                a: box_state(PI, &[(1, 1.0)]),
                b: box_state(PI, &[(1, 1.0), (3, -1.0 / 3.0)]),
            },
            SchmidtTerm {
                coeff: c,
                a: box_state(PI, &[(2, 1.0)]),
                b: box_state(PI, &[(2, 1.0), (4, -0.5)]),
            },
        ],
        switch,
    )
    .unwrap()
}

#[test]
fn product_states_factorize() {
    let term = SchmidtTerm {
        coeff: C64::new(1.0, 0.0),
        a: box_state(PI, &[(1, 1.0), (2, 1.0)]),
        b: box_state(PI, &[(1, 1.0)]),
    };
    let a_solo = term.a.clone();
    let pair = PairState::new(vec![term], None).unwrap();
    let t = 0.6;
    for x_a in [0.8, 1.7] {
        let v1 = pair.velocity(x_a, 0.9, t, false).unwrap();
        let v2 = pair.velocity(x_a, 2.2, t, false).unwrap();
        // No entanglement: A's velocity ignores B entirely.
        assert_abs_diff_eq!(v1[0], v2[0], epsilon = 1e-12);
        let solo = a_solo.guidance([x_a], t).unwrap().velocity[0];
        assert_abs_diff_eq!(v1[0], solo, epsilon = 1e-10);
        // B sits in its ground state: at rest.
        assert_abs_diff_eq!(v1[1], 0.0, epsilon = 1e-12);
    }
}

#[test]
fn unswitched_density_matches_the_direct_schmidt_sum() {
    let pair = wall_smooth_pair(None);
    let t = 1.3;
    for (x_a, x_b) in [(0.7, 1.1), (2.0, 2.6), (1.2, 0.4)] {
        let direct: C64 = pair
            .terms()
            .iter()
            .map(|term| {
                term.coeff * term.a.sample([x_a], t).value * term.b.sample([x_b], t).value
            })
            .sum();
        assert_abs_diff_eq!(
            pair.density(x_a, x_b, t, false),
            direct.norm_sqr(),
            epsilon = 1e-14
        );
    }
}

#[test]
fn entangled_velocity_at_a_depends_on_b() {
    let pair = wall_smooth_pair(None);
    let v1 = pair.velocity(1.0, 0.9, 0.8, false).unwrap();
    let v2 = pair.velocity(1.0, 2.1, 0.8, false).unwrap();
    assert!(
        (v1[0] - v2[0]).abs() > 1e-3,
        "vA should respond to xB: {} vs {}",
        v1[0],
        v2[0]
    );
}

#[test]
fn exchange_symmetric_state_has_symmetric_velocities() {
    let c = C64::new(0.5_f64.sqrt(), 0.0);
    let pair = PairState::new(
        vec![
            SchmidtTerm {
                coeff: c,
                a: box_state(PI, &[(1, 1.0)]),
                b: box_state(PI, &[(1, 1.0)]),
            },
            SchmidtTerm {
                coeff: c,
                a: box_state(PI, &[(2, 1.0)]),
                b: box_state(PI, &[(2, 1.0)]),
            },
        ],
        None,
    )
    .unwrap();
    for (x, t) in [(0.9, 0.4), (1.8, 1.1)] {
        let v = pair.velocity(x, x, t, false).unwrap();
        assert_abs_diff_eq!(v[0], v[1], epsilon = 1e-12);
    }
}

#[test]
fn half_box_ground_state_expansion_matches_closed_form() {
    // Ground state of a box of width W/2 re-expanded in the width-W basis:
    // d_2 = 1/sqrt(2) and d_m = -4 sqrt(2) sin(m pi/2) / (pi (m^2 - 4))
    // for odd m (even m vanish).
    let w = 2.0 * PI;
    let ground = box_state(w / 2.0, &[(1, 1.0)]);
    let pair = PairState::new(
        vec![SchmidtTerm {
            coeff: C64::new(1.0, 0.0),
            a: box_state(PI, &[(1, 1.0)]),
            b: ground,
        }],
        Some(SwitchSpec::new(0.0, w)),
    )
    .unwrap();
    let post = &pair.post_factors().unwrap()[0];
    let coeff_of = |m: i32| -> f64 {
        post.terms()
            .iter()
            .find(|t| t.mode[0] == m)
            .map(|t| t.coeff.re)
            .unwrap_or(0.0)
    };
    assert_abs_diff_eq!(coeff_of(2), 1.0 / 2.0_f64.sqrt(), epsilon = 1e-8);
    for m in [1i32, 3, 5, 7, 9] {
        let mf = m as f64;
        let expect = -4.0 * 2.0_f64.sqrt() * (mf * PI / 2.0).sin() / (PI * (mf * mf - 4.0));
        assert_abs_diff_eq!(coeff_of(m), expect, epsilon = 1e-8);
    }
    for m in [4i32, 6, 8] {
        assert_abs_diff_eq!(coeff_of(m), 0.0, epsilon = 1e-10);
    }
    // Norm retained within the budget.
    assert!(1.0 - pair.retained()[0] <= 1e-8, "retained {}", pair.retained()[0]);
}

#[test]
fn wall_smooth_states_need_few_modes() {
    let pair = wall_smooth_pair(Some(SwitchSpec::new(PI, 2.0 * PI)));
    for (post, &kept) in pair.post_factors().unwrap().iter().zip(pair.retained()) {
        assert!(1.0 - kept <= 1e-8);
        assert!(
            post.terms().len() <= 64,
            "wall-smooth expansion used {} modes",
            post.terms().len()
        );
    }
}

#[test]
fn truncation_budget_error_reports_required_size() {
    let w = 2.0 * PI;
    let mut sw = SwitchSpec::new(0.0, w);
    sw.max_modes = 8;
    let err = PairState::new(
        vec![SchmidtTerm {
            coeff: C64::new(1.0, 0.0),
            a: box_state(PI, &[(1, 1.0)]),
            b: box_state(w / 2.0, &[(1, 1.0)]),
        }],
        Some(sw),
    )
    .unwrap_err();
    match err {
        NonlocalError::TruncationBudget { used, suggested, .. } => {
            assert_eq!(used, 8);
            assert!(suggested > 8);
        }
        other => panic!("expected truncation error, got {other}"),
    }
}

#[test]
fn narrowing_switches_are_rejected() {
    let err = PairState::new(
        vec![SchmidtTerm {
            coeff: C64::new(1.0, 0.0),
            a: box_state(PI, &[(1, 1.0)]),
            b: box_state(PI, &[(1, 1.0)]),
        }],
        Some(SwitchSpec::new(0.5, PI / 2.0)),
    )
    .unwrap_err();
    assert!(matches!(err, NonlocalError::NarrowingSwitch { .. }));
}

#[test]
fn non_orthogonal_schmidt_factors_are_rejected() {
    let c = C64::new(0.5_f64.sqrt(), 0.0);
    let err = PairState::new(
        vec![
            SchmidtTerm {
                coeff: c,
                a: box_state(PI, &[(1, 1.0)]),
                b: box_state(PI, &[(1, 1.0)]),
            },
            SchmidtTerm {
                coeff: c,
                a: box_state(PI, &[(1, 1.0), (2, 0.4)]),
                b: box_state(PI, &[(2, 1.0)]),
            },
        ],
        None,
    )
    .unwrap_err();
    assert!(matches!(err, NonlocalError::NotOrthonormal { station: 'A', .. }));
}

#[test]
fn equilibrium_marginal_at_a_ignores_the_switch() {
    let pair = wall_smooth_pair(Some(SwitchSpec::new(0.0, 2.0 * PI)));
    let born = PairBorn { pair: &pair, t: 0.0 };
    let n = 3000;
    let result = signal_experiment(
        &pair,
        &born,
        n,
        31415,
        1.2,
        16,
        &StepControl::with_tolerances(1e-6, 1e-8),
    )
    .unwrap();
    assert_eq!(result.trapped, 0);
    assert!(
        result.l1 < 3.0 * result.null_sigma,
        "corrected equilibrium L1 {} vs 3 null sigma {}",
        result.l1,
        3.0 * result.null_sigma
    );
    let p = permutation_pvalue(&result, PI, 16, 200, 7).unwrap();
    assert!(p > 0.001, "permutation p-value {p}");
}

#[test]
fn nonequilibrium_marginal_at_a_responds_to_the_switch() {
    struct ProductDensity;
    impl Density<2> for ProductDensity {
        fn density(&self, q: [f64; 2]) -> f64 {
            // Ground-Born at A, uniform on the lower half-box at B.
            let a = 2.0 / PI * q[0].sin().powi(2);
            let b = if q[1] <= PI / 2.0 { 2.0 / PI } else { 0.0 };
            a * b
        }
        fn support(&self) -> ([f64; 2], [f64; 2]) {
            ([0.0, 0.0], [PI, PI / 2.0])
        }
    }
    let pair = wall_smooth_pair(Some(SwitchSpec::new(0.0, 2.0 * PI)));
    let n = 3000;
    let ctrl = StepControl::with_tolerances(1e-6, 1e-8);
    let noneq = signal_experiment(&pair, &ProductDensity, n, 2718, 1.2, 16, &ctrl).unwrap();
    let born = PairBorn { pair: &pair, t: 0.0 };
    let eq = signal_experiment(&pair, &born, n, 2718, 1.2, 16, &ctrl).unwrap();
    // Clear detection at this modest n; the 5x-floor margin is an
    // N = 1e5 property exercised by the acceptance suite.
    assert!(
        noneq.l1 > 3.0 * noneq.null_sigma,
        "corrected nonequilibrium L1 {} vs 3 null sigma {}",
        noneq.l1,
        3.0 * noneq.null_sigma
    );
    assert!(noneq.l1 > 3.0 * eq.l1.abs());
    let p = permutation_pvalue(&noneq, PI, 16, 200, 7).unwrap();
    assert!(p < 0.01, "nonequilibrium permutation p-value {p} not significant");
}
