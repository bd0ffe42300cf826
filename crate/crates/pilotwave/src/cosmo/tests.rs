use super::*;
use approx::assert_abs_diff_eq;
use num_complex::Complex64 as C64;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Four low levels with assorted phases.
fn four_level(n_lev: usize) -> ModeOscillator {
    ModeOscillator::from_levels(
        1.0,
        n_lev,
        &[
            ((0, 0), c(0.5, 0.0)),
            ((1, 0), c(0.0, 0.5)),
            ((0, 1), c(0.5, 0.0)),
            ((1, 1), c(-0.3, 0.4)),
        ],
        0.0,
    )
    .unwrap()
}

#[test]
fn static_evolution_is_pure_phases() {
    // With a = 1 and k = 1 the reference basis is the exact eigenbasis:
    // E(n1, n2) = n1 + n2 + 1 and coefficients only rotate.
    let mode = four_level(8);
    let dt = 0.7;
    let stepped = step_mode(&mode, &Expansion::Static, dt).unwrap();
    for n1 in 0..8 {
        for n2 in 0..8 {
            let idx = n1 * 8 + n2;
            let energy = (n1 + n2) as f64 + 1.0;
            let expect = mode.coeffs[idx] * C64::from_polar(1.0, -energy * dt);
            let got = stepped.coeffs[idx];
            assert!(
                (got - expect).norm() < 1e-8,
                "level ({n1},{n2}): got {got}, want {expect}"
            );
        }
    }
    assert_abs_diff_eq!(stepped.norm(), 1.0, epsilon = 1e-8);
}

#[test]
fn norm_and_hermiticity_are_preserved_on_de_sitter() {
    let mode = four_level(24);
    let expansion = Expansion::DeSitter { hubble: 0.2, a0: 1.0 };
    let stepped = step_mode(&mode, &expansion, 2.0).unwrap();
    assert!(
        (stepped.norm() - 1.0).abs() < 2e-8,
        "norm drifted to {}",
        stepped.norm()
    );
    let e = stepped.energy_expectation(&expansion);
    assert!(e.im.abs() < 1e-10, "energy expectation not real: {e}");
    assert!(e.re > 0.0);
}

#[test]
fn doubling_the_truncation_leaves_coefficients_unchanged() {
    let expansion = Expansion::DeSitter { hubble: 0.2, a0: 1.0 };
    let coarse = step_mode(&four_level(32), &expansion, 2.0).unwrap();
    let fine = step_mode(&four_level(64), &expansion, 2.0).unwrap();
    let mut max_diff = 0.0_f64;
    for n1 in 0..32 {
        for n2 in 0..32 {
            let diff = (coarse.coeffs[n1 * 32 + n2] - fine.coeffs[n1 * 64 + n2]).norm();
            max_diff = max_diff.max(diff);
        }
    }
    assert!(max_diff < 1e-6, "truncation moved coefficients by {max_diff}");
}

#[test]
fn leakage_puts_a_hard_stop_on_underresolved_modes() {
    let mode = ModeOscillator::from_levels(1.0, 8, &[((7, 0), c(1.0, 0.0))], 0.0).unwrap();
    match step_mode(&mode, &Expansion::DeSitter { hubble: 0.5, a0: 1.0 }, 1.0) {
        Err(CosmoError::Truncation { suggested, .. }) => assert_eq!(suggested, 16),
        other => panic!("expected truncation error, got {other:?}"),
    }
}

#[test]
fn ground_state_guidance_vanishes() {
    let mode = ModeOscillator::from_levels(1.3, 10, &[((0, 0), c(1.0, 0.0))], 0.0).unwrap();
    for q in [[0.2, -0.4], [1.0, 0.7]] {
        let v = mode_guidance(&mode, &Expansion::Static, q).unwrap();
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-12);
    }
}

#[test]
fn guidance_matches_the_phase_difference_oracle() {
    // v_d = Im(d_d psi / psi) / a^3 equals the centered difference of the
    // wave's phase along that axis.
    let mut mode = four_level(10);
    mode = step_mode(&mode, &Expansion::Static, 0.45).unwrap();
    let q = [0.6, -0.3];
    let h = 1e-6;
    let v = mode_guidance(&mode, &Expansion::Static, q).unwrap();
    for d in 0..2 {
        let mut qp = q;
        qp[d] += h;
        let mut qm = q;
        qm[d] -= h;
        let wp = mode_sample(&mode.coeffs, mode.n_lev, qp).value;
        let wm = mode_sample(&mode.coeffs, mode.n_lev, qm).value;
        let fd = (wp / wm).arg() / (2.0 * h);
        assert_abs_diff_eq!(v[d], fd, epsilon = 1e-5 * v[d].abs().max(1.0));
    }
}

#[test]
fn history_interpolation_matches_snapshots_and_midpoints() {
    let mode = four_level(16);
    let expansion = Expansion::DeSitter { hubble: 0.3, a0: 1.0 };
    let history = evolve_mode(&mode, &expansion, 1.0, None).unwrap();
    assert!(history.max_leakage() < 1e-6);
    // At a midpoint, compare against a freshly stepped mode.
    let t_mid = 0.513;
    let direct = {
        let mut m = mode.clone();
        m = step_mode(&m, &expansion, t_mid).unwrap();
        m
    };
    for q in [[0.3, 0.1], [-0.8, 0.6]] {
        let a = history.sample(q, t_mid).value;
        let b = mode_sample(&direct.coeffs, direct.n_lev, q).value;
        assert!(
            (a - b).norm() < 1e-6,
            "interpolated wave differs at {q:?}: {a} vs {b}"
        );
    }
}

#[test]
fn equilibrium_power_ratio_is_unity() {
    let mode = four_level(10);
    let history = evolve_mode(&mode, &Expansion::Static, 0.1, None).unwrap();
    let born = ModeBorn { history: &history, t: 0.0 };
    let n = 4000;
    let positions = sample_density(&born, n, 99).unwrap();
    let run = crate::ensemble::EnsembleRun {
        seed: 99,
        times: vec![0.0],
        initial: positions.clone(),
        paths: positions.iter().map(|&q| Some(vec![q])).collect(),
    };
    let ratio = power_ratio(&run, &history, 0.0, 99).unwrap();
    assert!(
        (ratio.xi - 1.0).abs() <= 3.0 * ratio.sigma_boot,
        "xi = {} +- {}",
        ratio.xi,
        ratio.sigma_boot
    );
}

#[test]
fn narrowed_ensembles_show_a_power_deficit() {
    let mode = ModeOscillator::from_levels(1.0, 10, &[((0, 0), c(1.0, 0.0))], 0.0).unwrap();
    let history = evolve_mode(&mode, &Expansion::Static, 0.1, None).unwrap();
    struct Patch;
    impl Density<2> for Patch {
        fn density(&self, q: [f64; 2]) -> f64 {
            if q[0].abs() < 0.2 && q[1].abs() < 0.2 {
                1.0 / 0.16
            } else {
                0.0
            }
        }
        fn support(&self) -> ([f64; 2], [f64; 2]) {
            ([-0.2, -0.2], [0.2, 0.2])
        }
    }
    let positions = sample_density(&Patch, 2000, 5).unwrap();
    let run = crate::ensemble::EnsembleRun {
        seed: 5,
        times: vec![0.0],
        initial: positions.clone(),
        paths: positions.iter().map(|&q| Some(vec![q])).collect(),
    };
    let ratio = power_ratio(&run, &history, 0.0, 5).unwrap();
    // Ground-state Born moment is <q1^2 + q2^2> = 1; the patch gives ~0.03.
    assert!(ratio.xi < 0.1, "xi = {}", ratio.xi);
    assert_abs_diff_eq!(ratio.born_moment, 1.0, epsilon = 1e-6);
}

#[test]
fn slow_expansion_preserves_instantaneous_occupations() {
    // Adiabatic theorem check: with H = 1e-3 the occupations of the
    // instantaneous eigenbasis move by far less than 1e-4, while the
    // squeeze of the basis itself is an order larger.
    let mode = ModeOscillator::from_levels(
        1.0,
        10,
        &[((0, 0), c(0.8, 0.0)), ((1, 1), c(0.0, 0.6))],
        0.0,
    )
    .unwrap();
    let expansion = Expansion::DeSitter { hubble: 1e-3, a0: 1.0 };
    let before = instantaneous_occupations(&mode, &expansion);
    let mut m = mode;
    for _ in 0..10 {
        m = step_mode(&m, &expansion, 5.0).unwrap();
    }
    let after = instantaneous_occupations(&m, &expansion);
    let mut max_shift = 0.0_f64;
    for (b, a) in before.iter().zip(&after) {
        max_shift = max_shift.max((b - a).abs());
    }
    assert!(max_shift < 1e-4, "occupations shifted by {max_shift}");
    // The reference-basis occupations shift measurably more, so the
    // instantaneous projection is doing real work.
    let ref_shift = (m.coeffs[0].norm_sqr() - 0.64).abs();
    assert!(ref_shift > 1e-4, "reference shift only {ref_shift}");
}

#[test]
fn super_hubble_guidance_is_slower_than_sub_hubble() {
    // Matched states, k / (a0 H) = 10 vs 0.1: the frozen super-Hubble mode
    // moves its trajectories far more slowly.
    let hubble = 0.25;
    let levels: Vec<((usize, usize), C64)> = vec![
        ((0, 0), c(0.6, 0.0)),
        ((1, 0), c(0.0, 0.5)),
        ((0, 2), c(0.45, 0.3)),
    ];
    // k / (a0 H) = 10 and 0.1, with a0 = k^{-1/2} so both runs start
    // matched to the reference basis.
    let k_sub = (10.0_f64 * hubble).powf(2.0 / 3.0);
    let k_sup = (0.1_f64 * hubble).powf(2.0 / 3.0);
    let sub = ModeOscillator::from_levels(k_sub, 24, &levels, 0.0).unwrap();
    let sup = ModeOscillator::from_levels(k_sup, 24, &levels, 0.0).unwrap();
    let h_sub = evolve_mode(
        &sub,
        &Expansion::DeSitter { hubble, a0: 1.0 / k_sub.sqrt() },
        1.6,
        None,
    )
    .unwrap();
    let h_sup = evolve_mode(
        &sup,
        &Expansion::DeSitter { hubble, a0: 1.0 / k_sup.sqrt() },
        1.6,
        None,
    )
    .unwrap();
    let mut speed_sub = 0.0;
    let mut speed_sup = 0.0;
    for q in [[0.5, 0.3], [-0.7, 0.9], [0.2, -1.1]] {
        for t in [0.5, 1.0, 1.5] {
            let vs = ModeFlow { history: &h_sub }.velocity(t, q).unwrap();
            let vp = ModeFlow { history: &h_sup }.velocity(t, q).unwrap();
            speed_sub += (vs[0] * vs[0] + vs[1] * vs[1]).sqrt();
            speed_sup += (vp[0] * vp[0] + vp[1] * vp[1]).sqrt();
        }
    }
    assert!(
        speed_sup < 0.2 * speed_sub,
        "super-Hubble speeds {speed_sup} not frozen relative to sub-Hubble {speed_sub}"
    );
}
