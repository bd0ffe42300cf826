//! Gauss-Legendre quadrature on intervals, cells, and tensor-product domains.

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
///
/// Computed by Newton iteration on the Legendre polynomial with the usual
/// Chebyshev-like initial guesses; accurate to machine precision for the
/// orders used here (n <= a few hundred).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature order must be at least 1");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        // Initial guess for the i-th root of P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by upward recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// An `n`-point Gauss-Legendre rule mapped onto `[a, b]`.
#[derive(Debug, Clone)]
pub struct Rule1d {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1d {
    pub fn new(n: usize, a: f64, b: f64) -> Self {
        let (x, w) = gauss_legendre(n);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        Rule1d {
            nodes: x.iter().map(|&xi| mid + half * xi).collect(),
            weights: w.iter().map(|&wi| half * wi).collect(),
        }
    }

    /// Composite rule: `panels` adjacent `n`-point rules tiling `[a, b]`.
    ///
    /// Plain Gauss-Legendre clusters its nodes at the interval ends, which
    /// starves localized integrands (Gaussian tails of oscillator states)
    /// of resolution; short panels restore geometric convergence.
    pub fn composite(n: usize, panels: usize, a: f64, b: f64) -> Self {
        assert!(panels >= 1);
        let mut nodes = Vec::with_capacity(n * panels);
        let mut weights = Vec::with_capacity(n * panels);
        let w = (b - a) / panels as f64;
        for p in 0..panels {
            let rule = Rule1d::new(n, a + p as f64 * w, a + (p + 1) as f64 * w);
            nodes.extend(rule.nodes);
            weights.extend(rule.weights);
        }
        Rule1d { nodes, weights }
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Tensor-product Gauss-Legendre rule over a `D`-dimensional axis-aligned box.
#[derive(Debug, Clone)]
pub struct RuleNd<const D: usize> {
    axes: [Rule1d; D],
}

impl<const D: usize> RuleNd<D> {
    pub fn new(n: usize, lo: [f64; D], hi: [f64; D]) -> Self {
        RuleNd {
            axes: std::array::from_fn(|d| Rule1d::new(n, lo[d], hi[d])),
        }
    }

    pub fn from_axes(axes: [Rule1d; D]) -> Self {
        RuleNd { axes }
    }

    /// Visit every tensor node with its weight.
    pub fn for_each(&self, mut f: impl FnMut([f64; D], f64)) {
        let counts: [usize; D] = std::array::from_fn(|d| self.axes[d].nodes.len());
        let mut idx = [0usize; D];
        loop {
            let q: [f64; D] = std::array::from_fn(|d| self.axes[d].nodes[idx[d]]);
            let w: f64 = (0..D).map(|d| self.axes[d].weights[idx[d]]).product();
            f(q, w);
            // Odometer increment over the tensor grid.
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < counts[d] {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == D {
                    return;
                }
            }
        }
    }

    /// Integrate `f` over the box.
    pub fn integrate(&self, mut f: impl FnMut([f64; D]) -> f64) -> f64 {
        let mut total = 0.0;
        self.for_each(|q, w| total += w * f(q));
        total
    }
}
