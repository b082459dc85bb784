//! Distribution helpers shared by the tests and the simulation harness.

use statrs::distribution::{Beta, ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

/// `P(Z > z)` for a standard normal `Z`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// `P(Z ≤ z)` for a standard normal `Z`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail of a central chi-square with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    match ChiSquared::new(df) {
        Ok(d) => d.sf(x),
        Err(_) => f64::NAN,
    }
}

/// Upper tail of a non-central chi-square, summed as a Poisson mixture of
/// central tails.
pub fn noncentral_chi_square_sf(x: f64, df: f64, ncp: f64) -> f64 {
    if ncp <= 0.0 {
        return chi_square_sf(x, df);
    }
    if x <= 0.0 {
        return 1.0;
    }
    let half = 0.5 * ncp;
    // start at the Poisson mode and walk both ways until terms vanish
    let mode = half.floor() as i64;
    let log_weight = |k: i64| -> f64 {
        -half + k as f64 * half.ln() - statrs::function::gamma::ln_gamma(k as f64 + 1.0)
    };
    let mut total = 0.0;
    let mut k = mode;
    loop {
        let w = log_weight(k).exp();
        total += w * chi_square_sf(x, df + 2.0 * k as f64);
        if w < 1e-17 || k > mode + 10_000 {
            break;
        }
        k += 1;
    }
    let mut k = mode - 1;
    while k >= 0 {
        let w = log_weight(k).exp();
        total += w * chi_square_sf(x, df + 2.0 * k as f64);
        if w < 1e-17 {
            break;
        }
        k -= 1;
    }
    total.clamp(0.0, 1.0)
}

/// Clopper–Pearson interval for `successes` out of `trials`.
pub fn clopper_pearson(successes: usize, trials: usize, level: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let alpha = 1.0 - level;
    let (k, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0)
            .map(|b| b.inverse_cdf(alpha / 2.0))
            .unwrap_or(0.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        Beta::new(k + 1.0, n - k)
            .map(|b| b.inverse_cdf(1.0 - alpha / 2.0))
            .unwrap_or(1.0)
    };
    (lo, hi)
}

/// Two-sided one-sample Kolmogorov–Smirnov statistic against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov distribution tail `P(K > sqrt(n)·d)`.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sqrt_n = (n as f64).sqrt();
    let t = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    let mut sum = 0.0;
    for k in 1..200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * t * t).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn normal_tails() {
        assert_relative_eq!(normal_sf(0.0), 0.5);
        assert_relative_eq!(normal_sf(1.0), 0.158_655_253_931_457_05, max_relative = 1e-9);
        assert_relative_eq!(normal_cdf(-1.0), normal_sf(1.0), max_relative = 1e-14);
    }

    #[test]
    fn chi_square_tails() {
        assert_relative_eq!(chi_square_sf(5.991, 2.0), (-5.991f64 / 2.0).exp(), max_relative = 1e-10);
        assert_relative_eq!(chi_square_sf(3.841, 1.0), 0.05, epsilon = 1e-4);
        assert_eq!(chi_square_sf(0.0, 3.0), 1.0);
    }

    #[test]
    fn noncentral_reduces_to_central() {
        assert_relative_eq!(noncentral_chi_square_sf(4.0, 3.0, 0.0), chi_square_sf(4.0, 3.0));
        let p = noncentral_chi_square_sf(7.0, 3.0, 4.0);
        assert_relative_eq!(p, 0.421_149_105_265_612, epsilon = 1e-9);
        assert!(noncentral_chi_square_sf(7.0, 3.0, 8.0) > p);
    }

    #[test]
    fn clopper_pearson_contains_rate() {
        let (lo, hi) = clopper_pearson(25, 500, 0.95);
        assert!(lo < 0.05 && hi > 0.05);
        assert_relative_eq!(lo, 0.032_615_180, epsilon = 1e-7);
        let (lo, hi) = clopper_pearson(0, 1, 0.95);
        assert_eq!(lo, 0.0);
        assert_relative_eq!(hi, 0.975, epsilon = 1e-9);
    }
}
