use pilotwave::integrate::{integrate_debroglie, StepControl};
use pilotwave::scenario::random_phase_box_state;
use pilotwave::spectral::WaveField;
use std::time::Instant;

fn main() {
    let state = random_phase_box_state(std::f64::consts::PI, 4, 20260810);
    let ctrl = StepControl::with_tolerances(1e-6, 1e-8);
    let t_end = 8.0 * std::f64::consts::PI;
    let samples: Vec<f64> = (0..10).map(|i| t_end * i as f64 / 9.0).collect();
    let start = Instant::now();
    let n = 50;
    let mut trapped = 0;
    for i in 0..n {
        let q0 = [0.3 + 2.5 * (i as f64 / n as f64), 1.1 + 0.02 * i as f64];
        if integrate_debroglie(&state, q0, 0.0, t_end, &ctrl, &samples).is_err() { trapped += 1; }
    }
    let per = start.elapsed().as_secs_f64() / n as f64;
    println!("{per:.3} s/trajectory, trapped {trapped}/{n}");
    println!("implied wall for 1e5 on 2 cores: {:.0} min", per * 1e5 / 2.0 / 60.0);
    let start = Instant::now();
    let mut acc = 0.0;
    let m = 200_000;
    for i in 0..m {
        let q = [0.5 + 1e-7 * i as f64, 1.3];
        acc += state.guidance(q, 1.0).map(|g| g.velocity[0]).unwrap_or(0.0);
    }
    let per_eval = start.elapsed().as_secs_f64() / m as f64;
    println!("guidance eval: {:.0} ns (checksum {acc:.3})", per_eval * 1e9);
}
