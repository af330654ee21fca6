//! Small statistics toolbox: least-squares lines, Kolmogorov-Smirnov tests,
//! trend tests and Richardson extrapolation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (`NaN` with two points).
    pub slope_se: f64,
    pub points: usize,
}

/// Ordinary least squares `y = a + b x`.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<LineFit> {
    let n = points.len();
    if n < 2 {
        return Err(invalid("a line fit needs at least two points"));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(invalid("degenerate abscissae in line fit"));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = points
            .iter()
            .map(|p| (p.1 - intercept - slope * p.0).powi(2))
            .sum();
        (rss / (nf - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(LineFit { slope, intercept, slope_se, points: n })
}

/// Slope of `log y` against `log x` over strictly positive pairs.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    linear_fit(&pts)
}

/// One-sided t-test of `H0: slope <= 0` against an increasing trend. Returns the p-value.
pub fn increasing_trend_p_value(fit: &LineFit) -> f64 {
    if fit.points <= 2 || !fit.slope_se.is_finite() {
        return 1.0;
    }
    if fit.slope_se == 0.0 {
        return if fit.slope > 0.0 { 0.0 } else { 1.0 };
    }
    let t = StudentsT::new(0.0, 1.0, (fit.points - 2) as f64).expect("positive dof");
    1.0 - t.cdf(fit.slope / fit.slope_se)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov distribution tail `P(K > λ)`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

/// Stephens' finite-sample correction for the effective size `n`.
fn ks_p(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d)
}

/// One-sample test of `sample` against the continuous CDF `cdf`.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if sample.is_empty() || sample.iter().any(|v| !v.is_finite()) {
        return Err(invalid("KS sample must be nonempty and finite"));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, v) in s.iter().enumerate() {
        let f = cdf(*v);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(KsResult { statistic: d, p_value: ks_p(d, n) })
}

/// Two-sample test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() || a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("KS samples must be nonempty and finite"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(KsResult { statistic: d, p_value: ks_p(d, na * nb / (na + nb)) })
}

/// Richardson extrapolation to `h → 0` of values computed at steps `h_i`, assuming an
/// expansion in integer powers of `h` (Neville's scheme).
pub fn richardson(hs: &[f64], values: &[f64]) -> Result<f64> {
    if hs.is_empty() || hs.len() != values.len() {
        return Err(invalid("Richardson needs matching nonempty step and value lists"));
    }
    let mut p = values.to_vec();
    let n = hs.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (hs[i + m] * p[i] - hs[i] * p[i + 1]) / (hs[i + m] - hs[i]);
        }
    }
    Ok(p[0])
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    use statrs::distribution::Normal as SNormal;

    #[test]
    fn exact_line() {
        let f = linear_fit(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-14 && (f.intercept - 1.0).abs() < 1e-14);
        assert!(f.slope_se.abs() < 1e-12);
    }

    #[test]
    fn kolmogorov_tail_known_values() {
        // P(K > 1.36) ≈ 0.049, P(K > 1.63) ≈ 0.0098
        assert!((kolmogorov_tail(1.36) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_tail(1.63) - 0.0098).abs() < 5e-4);
    }

    #[test]
    fn ks_accepts_normal_and_rejects_shift() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 1.0).unwrap();
        let s: Vec<f64> = (0..2000).map(|_| n.sample(&mut rng)).collect();
        let cdf = SNormal::new(0.0, 1.0).unwrap();
        assert!(ks_one_sample(&s, |x| cdf.cdf(x)).unwrap().p_value > 0.01);
        let shifted: Vec<f64> = s.iter().map(|v| v + 0.3).collect();
        assert!(ks_one_sample(&shifted, |x| cdf.cdf(x)).unwrap().p_value < 1e-6);
        let t: Vec<f64> = (0..2000).map(|_| n.sample(&mut rng)).collect();
        assert!(ks_two_sample(&s, &t).unwrap().p_value > 0.01);
        assert!(ks_two_sample(&shifted, &t).unwrap().p_value < 1e-6);
    }

    #[test]
    fn richardson_removes_polynomial_error() {
        let f = |h: f64| 2.0 + 3.0 * h - 5.0 * h * h;
        let hs = [0.4, 0.2, 0.1];
        let v: Vec<f64> = hs.iter().map(|h| f(*h)).collect();
        assert!((richardson(&hs, &v).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trend_detection() {
        let up: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, i as f64 + ((i * 7) % 3) as f64 * 0.1)).collect();
        assert!(increasing_trend_p_value(&linear_fit(&up).unwrap()) < 0.01);
        let flat: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, -(i as f64) * 0.01 + ((i * 7) % 3) as f64)).collect();
        assert!(increasing_trend_p_value(&linear_fit(&flat).unwrap()) > 0.05);
    }
}
