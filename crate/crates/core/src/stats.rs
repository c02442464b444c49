//! Normal-approximation confidence intervals and two-sided significance
//! tests for comparing experiment arms.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("confidence level {0} outside (0,1)")]
    Level(f64),
    #[error("no intervention instances to measure")]
    NoInterventions,
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Two-sided critical value: 1.959964 at 0.95.
pub fn z_critical(level: f64) -> Result<f64, StatsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Level(level));
    }
    Ok(standard_normal().inverse_cdf(0.5 + level / 2.0))
}

/// Sample mean and CI halfwidth `z * s / sqrt(n)`, with `s` the sample
/// standard deviation.
pub fn mean_ci(samples: &[f64], level: f64) -> Result<(f64, f64), StatsError> {
    let n = samples.len();
    if n < 2 {
        return Err(StatsError::InsufficientSamples(n));
    }
    let z = z_critical(level)?;
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, z * (var / n as f64).sqrt()))
}

/// Proportion and its Wald halfwidth `z * sqrt(p(1-p)/n)`.
pub fn proportion_ci(successes: u64, trials: u64, level: f64) -> Result<(f64, f64), StatsError> {
    if trials == 0 {
        return Err(StatsError::InsufficientSamples(0));
    }
    let z = z_critical(level)?;
    let p = successes as f64 / trials as f64;
    Ok((p, z * (p * (1.0 - p) / trials as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mark {
    #[serde(rename = "")]
    None,
    #[serde(rename = "*")]
    Significant90,
    #[serde(rename = "**")]
    Significant95,
}

impl Mark {
    pub fn from_p_value(p: f64) -> Self {
        if p < 0.05 {
            Mark::Significant95
        } else if p < 0.10 {
            Mark::Significant90
        } else {
            Mark::None
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mark::None => "",
            Mark::Significant90 => "*",
            Mark::Significant95 => "**",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Positive when the first sample is larger.
    pub statistic: f64,
    pub p_value: f64,
    pub mark: Mark,
}

impl TestResult {
    fn new(statistic: f64, p_value: f64) -> Self {
        Self {
            statistic,
            p_value,
            mark: Mark::from_p_value(p_value),
        }
    }
}

fn two_sided_normal_p(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    2.0 * (1.0 - standard_normal().cdf(z.abs()))
}

/// Welch's unequal-variance t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::InsufficientSamples(s.len()));
        }
    }
    let moments = |s: &[f64]| {
        let n = s.len() as f64;
        let m = s.iter().sum::<f64>() / n;
        let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = moments(a);
    let (nb, mb, vb) = moments(b);
    let (qa, qb) = (va / na, vb / nb);
    let se2 = qa + qb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            TestResult::new(0.0, 1.0)
        } else {
            TestResult::new(f64::INFINITY.copysign(ma - mb), 0.0)
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    Ok(TestResult::new(t, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

/// Two-proportion z-test with pooled variance.
pub fn two_proportion_z_test(x1: u64, n1: u64, x2: u64, n2: u64) -> Result<TestResult, StatsError> {
    for n in [n1, n2] {
        if n == 0 {
            return Err(StatsError::InsufficientSamples(0));
        }
    }
    let (p1, p2) = (x1 as f64 / n1 as f64, x2 as f64 / n2 as f64);
    let pooled = (x1 + x2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return Ok(TestResult::new(0.0, 1.0));
    }
    let z = (p1 - p2) / se;
    Ok(TestResult::new(z, two_sided_normal_p(z)))
}
