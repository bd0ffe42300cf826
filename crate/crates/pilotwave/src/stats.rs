//! Small statistics toolkit: goodness-of-fit tests, bootstrap resampling,
//! and least-squares exponential fits used by the experiment modules.

use rand::Rng;

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (denominator `n - 1`).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Regularized lower incomplete gamma function P(a, x).
///
/// Series expansion for x < a + 1, continued fraction (modified Lentz)
/// otherwise. Good to ~1e-12 over the parameter range used here.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    let lg = ln_gamma(a);
    if x < a + 1.0 {
        // Series representation.
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        sum * (-x + a * x.ln() - lg).exp()
    } else {
        // Continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (-x + a * x.ln() - lg).exp() * h;
        1.0 - q
    }
}

/// Natural log of the gamma function (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    // g = 7, n = 9 Lanczos coefficients.
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEFFS[0];
    let t = x + 7.5;
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// p-value of a chi-square statistic with `dof` degrees of freedom.
pub fn chi_square_pvalue(chi2: f64, dof: usize) -> f64 {
    1.0 - gamma_p(dof as f64 / 2.0, chi2 / 2.0)
}

/// Pearson chi-square test of observed counts against expected cell masses.
///
/// `expected` are probabilities summing to one; returns `(chi2, p_value)`.
pub fn chi_square_test(observed: &[u64], expected: &[f64]) -> (f64, f64) {
    assert_eq!(observed.len(), expected.len());
    let n: u64 = observed.iter().sum();
    let mut chi2 = 0.0;
    let mut dof = 0usize;
    for (&o, &p) in observed.iter().zip(expected) {
        let e = p * n as f64;
        if e <= 0.0 {
            assert!(o == 0, "observed counts in a zero-probability cell");
            continue;
        }
        chi2 += (o as f64 - e) * (o as f64 - e) / e;
        dof += 1;
    }
    (chi2, chi_square_pvalue(chi2, dof.saturating_sub(1)))
}

/// Kolmogorov-Smirnov statistic of a sample against a CDF.
///
/// `cdf` must be the continuous target distribution function.
pub fn ks_statistic(sample: &[f64], mut cdf: impl FnMut(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("NaN in KS sample"));
    let n = xs.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// KS acceptance threshold at the 1% level: `D < 1.63 / sqrt(N)`.
pub fn ks_threshold(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

/// Bootstrap standard error of a statistic over items.
///
/// Resamples `items` with replacement `resamples` times using the supplied
/// RNG and returns the standard deviation of the statistic.
pub fn bootstrap_se<T: Copy>(
    items: &[T],
    resamples: usize,
    rng: &mut impl Rng,
    mut statistic: impl FnMut(&[T]) -> f64,
) -> f64 {
    let n = items.len();
    assert!(n > 0);
    let mut buf = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        buf.clear();
        for _ in 0..n {
            buf.push(items[rng.gen_range(0..n)]);
        }
        values.push(statistic(&buf));
    }
    std_dev(&values)
}

/// Percentile bootstrap confidence interval `(lo, hi)` for a statistic.
pub fn bootstrap_ci<T: Copy>(
    items: &[T],
    resamples: usize,
    level: f64,
    rng: &mut impl Rng,
    mut statistic: impl FnMut(&[T]) -> f64,
) -> (f64, f64) {
    let n = items.len();
    let mut buf = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        buf.clear();
        for _ in 0..n {
            buf.push(items[rng.gen_range(0..n)]);
        }
        values.push(statistic(&buf));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    let lo = values[((values.len() as f64 - 1.0) * alpha).round() as usize];
    let hi = values[((values.len() as f64 - 1.0) * (1.0 - alpha)).round() as usize];
    (lo, hi)
}

/// Ordinary least squares of `y` on `x`; returns `(slope, intercept, r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2);
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|xi| (xi - mx) * (xi - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|yi| (yi - my) * (yi - my)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| {
            let r = yi - (intercept + slope * xi);
            r * r
        })
        .sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res < 1e-30 * n {
        1.0
    } else {
        0.0
    };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn gamma_p_known_values() {
        // P(1, x) = 1 - exp(-x).
        assert_abs_diff_eq!(gamma_p(1.0, 2.0), 1.0 - (-2.0_f64).exp(), epsilon = 1e-12);
        // Chi-square with 1 dof at its 95% point.
        assert_abs_diff_eq!(chi_square_pvalue(3.841458820694124, 1), 0.05, epsilon = 1e-6);
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        assert_abs_diff_eq!(ln_gamma(5.0), (24.0_f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), epsilon = 1e-12);
    }

    #[test]
    fn chi_square_accepts_exact_counts() {
        let (chi2, p) = chi_square_test(&[250, 250, 250, 250], &[0.25; 4]);
        assert_abs_diff_eq!(chi2, 0.0);
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ks_statistic_of_uniform_grid_is_small() {
        let n = 1000;
        let sample: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_statistic(&sample, |x| x.clamp(0.0, 1.0));
        assert!(d <= 0.5 / n as f64 + 1e-12, "d = {d}");
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|xi| 3.0 * xi - 1.0).collect();
        let (a, b, r2) = linear_fit(&x, &y);
        assert_abs_diff_eq!(a, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bootstrap_se_scales_like_standard_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..400).map(|i| (i % 20) as f64).collect();
        let se = bootstrap_se(&xs, 200, &mut rng, mean);
        let expect = std_dev(&xs) / (xs.len() as f64).sqrt();
        assert!((se - expect).abs() < 0.3 * expect, "se={se} expect={expect}");
    }
}
