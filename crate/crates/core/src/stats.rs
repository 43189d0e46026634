//! Scalar distribution helpers shared across modules.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::erf::erfc;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Latent-scale residual variance of the logistic distribution, π²/3.
pub const LOGISTIC_VARIANCE: f64 = std::f64::consts::PI * std::f64::consts::PI / 3.0;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Φ(x)` without cancellation for large `x`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Two-sided normal p-value for a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    (2.0 * normal_sf(z.abs())).min(1.0)
}

/// Upper tail of the chi-squared distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if df == 1.0 {
        // exact and accurate far into the tail
        return erfc((x / 2.0).sqrt());
    }
    match ChiSquared::new(df) {
        Ok(dist) => dist.sf(x),
        Err(_) => f64::NAN,
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` evaluated stably.
pub fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood of `y` under success log-odds `eta`.
pub fn bernoulli_logit_ll(y: f64, eta: f64) -> f64 {
    y * eta - log1pexp(eta)
}

/// Significance stars: `***` p<0.01, `**` p<0.05, `*` p<0.10.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); `None` below two points.
pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_tails() {
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_sf(1.959_963_984_540_054), 0.025, epsilon = 1e-10);
        assert_abs_diff_eq!(normal_quantile(0.95), 1.644_853_626_951_472_2, epsilon = 1e-9);
        assert_abs_diff_eq!(two_sided_p(-1.263), 0.2066, epsilon = 1e-3);
    }

    #[test]
    fn chi2_tail_df1_matches_general() {
        for &x in &[0.1, 1.0, 2.706, 7.3] {
            let general = ChiSquared::new(1.0).unwrap().sf(x);
            assert_abs_diff_eq!(chi2_sf(x, 1.0), general, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(chi2_sf(5.991, 2.0), 0.05, epsilon = 1e-4);
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(800.0) <= 1.0);
        assert!(logistic(-800.0) >= 0.0);
        assert_abs_diff_eq!(log1pexp(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(bernoulli_logit_ll(1.0, 100.0), 0.0, epsilon = 1e-40);
    }

    #[test]
    fn star_cutoffs() {
        assert_eq!(stars(0.026), "**");
        assert_eq!(stars(0.207), "");
        assert_eq!(stars(0.0099), "***");
        assert_eq!(stars(0.07), "*");
    }
}
