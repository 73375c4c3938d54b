//! Normal-theory inference helpers.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// `z_{1-alpha/2}`.
pub fn two_sided_z(alpha: f64) -> f64 {
    std_normal().inverse_cdf(1.0 - alpha / 2.0)
}

pub fn two_sided_p(z: f64) -> f64 {
    2.0 * std_normal().cdf(-z.abs())
}

/// Interval and test for one variance flavor. `variance` is the
/// per-observation asymptotic variance; the standard error is
/// `sqrt(variance / n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Inference {
    pub variance: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

impl Inference {
    /// Wald interval on the natural scale.
    pub fn wald(estimate: f64, variance: f64, n: usize, alpha: f64, null: f64) -> Self {
        let se = (variance.max(0.0) / n as f64).sqrt();
        let z = two_sided_z(alpha);
        let p_value = if se > 0.0 {
            two_sided_p((estimate - null) / se)
        } else if estimate == null {
            1.0
        } else {
            0.0
        };
        Self { variance, se, ci_low: estimate - z * se, ci_high: estimate + z * se, p_value }
    }

    /// Interval built on the log scale and exponentiated. `variance` is on
    /// the natural scale; the log-scale variance is `variance / estimate^2`.
    pub fn log_scale(estimate: f64, variance: f64, n: usize, alpha: f64, null: f64) -> Self {
        let log_var = variance / (estimate * estimate);
        let inner = Self::wald(estimate.ln(), log_var, n, alpha, null.ln());
        Self {
            variance,
            se: (variance.max(0.0) / n as f64).sqrt(),
            ci_low: inner.ci_low.exp(),
            ci_high: inner.ci_high.exp(),
            p_value: inner.p_value,
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor `n - 1`; zero for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
