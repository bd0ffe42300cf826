//! Analytic Gaussian packets.
//!
//! Apparatus pointers and Stern-Gerlach components are Gaussians that either
//! stay rigid (while a measurement coupling dominates the Hamiltonian) or
//! spread and drift freely. Both cases have closed forms, so packets are
//! represented analytically rather than spectrally.

use num_complex::Complex64 as C64;

use super::{AxisDomain, Domain, WaveField, WaveSample};

/// A (possibly weighted) Gaussian wave packet in one dimension.
///
/// At its reference time the packet is
/// `weight * (2 pi w^2)^{-1/4} exp(-(z - z0)^2 / (4 w^2)) exp(i m u (z - z0))`,
/// a minimum-uncertainty Gaussian whose density has standard deviation `w`,
/// centred at `z0`, carrying drift velocity `u`. With `free_evolution` the
/// packet follows the exact free-particle solution (moving centre, complex
/// spreading width); without it the packet is frozen at its initial shape.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPacket {
    pub weight: C64,
    pub center: f64,
    pub width: f64,
    pub drift: f64,
    pub mass: f64,
    pub free_evolution: bool,
    pub t_ref: f64,
}

impl GaussianPacket {
    /// Unit-weight packet at rest, frozen in time (an apparatus pointer).
    pub fn pointer(center: f64, width: f64) -> Self {
        GaussianPacket {
            weight: C64::new(1.0, 0.0),
            center,
            width,
            drift: 0.0,
            mass: 1.0,
            free_evolution: false,
            t_ref: 0.0,
        }
    }

    /// Freely evolving packet with the given drift velocity.
    pub fn free(center: f64, width: f64, drift: f64, mass: f64) -> Self {
        GaussianPacket {
            weight: C64::new(1.0, 0.0),
            center,
            width,
            drift,
            mass,
            free_evolution: true,
            t_ref: 0.0,
        }
    }

    pub fn with_weight(mut self, weight: C64) -> Self {
        self.weight = weight;
        self
    }

    /// Centre of the density at time `t`.
    pub fn center_at(&self, t: f64) -> f64 {
        let tau = if self.free_evolution { t - self.t_ref } else { 0.0 };
        self.center + self.drift * tau
    }

    /// Standard deviation of the density at time `t`.
    pub fn width_at(&self, t: f64) -> f64 {
        let tau = if self.free_evolution { t - self.t_ref } else { 0.0 };
        let s = tau / (2.0 * self.mass * self.width * self.width);
        self.width * (1.0 + s * s).sqrt()
    }

    /// Wave value and its first two derivatives at `(z, t)`.
    pub fn value_grad_lap(&self, z: f64, t: f64) -> (C64, C64, C64) {
        let tau = if self.free_evolution { t - self.t_ref } else { 0.0 };
        let w2 = self.width * self.width;
        // Complex spreading parameter a = w^2 + i tau / (2m); beta = a / w^2.
        let a = C64::new(w2, tau / (2.0 * self.mass));
        let beta = a / w2;
        let zeta = z - self.center - self.drift * tau;
        let mu = self.mass * self.drift;
        let phase = C64::new(0.0, mu * (z - self.center - 0.5 * self.drift * tau));
        let norm = (2.0 * std::f64::consts::PI * w2).powf(-0.25);
        let value =
            self.weight * norm / beta.sqrt() * (-(zeta * zeta) / (4.0 * a) + phase).exp();
        // psi' = psi (-(zeta)/(2a) + i m u); psi'' adds the -1/(2a) curvature.
        let log_grad = -zeta / (2.0 * a) + C64::new(0.0, mu);
        let grad = value * log_grad;
        let lap = value * (log_grad * log_grad - 1.0 / (2.0 * a));
        (value, grad, lap)
    }
}

impl WaveField<1> for GaussianPacket {
    fn sample(&self, q: [f64; 1], t: f64) -> WaveSample<1> {
        let (value, grad, lap) = self.value_grad_lap(q[0], t);
        WaveSample {
            value,
            gradient: [grad],
            laplacian: lap,
            density: value.norm_sqr(),
        }
    }

    fn mass(&self) -> f64 {
        self.mass
    }

    fn domain(&self) -> Domain<1> {
        Domain::uniform(AxisDomain::Line)
    }

    fn node_threshold(&self) -> f64 {
        // Probability-per-length scale of the packet, times the usual 1e-12.
        1e-12 / (8.0 * self.width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn norm_by_quadrature(p: &GaussianPacket, t: f64) -> f64 {
        let r = crate::quadrature::Rule1d::new(
            200,
            p.center_at(t) - 12.0 * p.width_at(t),
            p.center_at(t) + 12.0 * p.width_at(t),
        );
        r.integrate(|z| p.value_grad_lap(z, t).0.norm_sqr())
    }

    #[test]
    fn packet_is_normalized_at_all_times() {
        let p = GaussianPacket::free(0.3, 0.7, 1.5, 2.0);
        for &t in &[0.0, 0.5, 3.0] {
            assert_abs_diff_eq!(norm_by_quadrature(&p, t), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn frozen_packet_does_not_move() {
        let p = GaussianPacket::pointer(0.0, 0.2);
        let (v0, _, _) = p.value_grad_lap(0.1, 0.0);
        let (v1, _, _) = p.value_grad_lap(0.1, 5.0);
        assert_eq!(v0, v1);
    }

    #[test]
    fn free_packet_satisfies_schroedinger_equation() {
        // i dpsi/dt = -(1/2m) psi'' checked by a central time difference.
        let p = GaussianPacket::free(-0.2, 0.5, 0.8, 1.3);
        let (z, t, h) = (0.4, 0.7, 1e-6);
        let (_, _, lap) = p.value_grad_lap(z, t);
        let (vp, _, _) = p.value_grad_lap(z, t + h);
        let (vm, _, _) = p.value_grad_lap(z, t - h);
        let dt = (vp - vm) / (2.0 * h);
        let lhs = C64::new(0.0, 1.0) * dt;
        let rhs = -lap / (2.0 * p.mass);
        assert_abs_diff_eq!(lhs.re, rhs.re, epsilon = 1e-7);
        assert_abs_diff_eq!(lhs.im, rhs.im, epsilon = 1e-7);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = GaussianPacket::free(0.0, 0.4, -0.6, 1.0);
        let (z, t, h) = (0.25, 1.2, 1e-6);
        let (_, grad, _) = p.value_grad_lap(z, t);
        let (vp, _, _) = p.value_grad_lap(z + h, t);
        let (vm, _, _) = p.value_grad_lap(z - h, t);
        let fd = (vp - vm) / (2.0 * h);
        assert_abs_diff_eq!(grad.re, fd.re, epsilon = 1e-6);
        assert_abs_diff_eq!(grad.im, fd.im, epsilon = 1e-6);
    }

    #[test]
    fn drift_sets_the_guidance_velocity() {
        let p = GaussianPacket::free(0.0, 0.5, 1.25, 2.0);
        let g = p.guidance([0.3], 0.0).unwrap();
        assert_abs_diff_eq!(g.velocity[0], 1.25, epsilon = 1e-12);
    }
}
