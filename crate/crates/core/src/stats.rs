//! Rank statistics: Spearman correlation, first-order partial Spearman
//! correlation and their significance.
//!
//! Ranks are fractional (tied values share the average of the ranks they
//! span) and 1-based. P-values use the asymptotic Student-t approximation,
//! with `n - 2` degrees of freedom for plain correlations and `n - 3` for a
//! partial correlation with a single confounder.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Tolerance on `1 - |r|` below which a confounder is treated as collinear.
pub const COLLINEAR_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("degenerate input: vector has fewer than two distinct values")]
    DegenerateInput,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("confounder is collinear with an argument (|r| = {0})")]
    ConfounderCollinear(f64),
    #[error("p-value {0} outside [0, 1]")]
    InvalidProbability(f64),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Significance marker following the usual `* / ** / ***` convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum Stars {
    #[default]
    #[serde(rename = "")]
    None,
    #[serde(rename = "*")]
    One,
    #[serde(rename = "**")]
    Two,
    #[serde(rename = "***")]
    Three,
}

impl Stars {
    pub fn as_str(self) -> &'static str {
        match self {
            Stars::None => "",
            Stars::One => "*",
            Stars::Two => "**",
            Stars::Three => "***",
        }
    }
}

impl std::fmt::Display for Stars {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A correlation coefficient together with its sample size and significance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationValue {
    pub rho: f64,
    pub n: usize,
    pub p_value: Option<f64>,
    pub stars: Stars,
}

impl CorrelationValue {
    /// Builds a value from a coefficient, attaching the t-approximation
    /// p-value for `df` degrees of freedom.
    pub fn with_t_test(rho: f64, n: usize, df: usize) -> Self {
        let rho = rho.clamp(-1.0, 1.0);
        let p = t_test_p_value(rho, df);
        CorrelationValue {
            rho,
            n,
            p_value: Some(p),
            stars: significance_stars(p).unwrap_or_default(),
        }
    }
}

/// Values paired with their fractional ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedVector {
    values: Vec<f64>,
    ranks: Vec<f64>,
}

impl RankedVector {
    pub fn new(values: &[f64]) -> Result<Self> {
        check_finite(values)?;
        if values.len() < 3 {
            return Err(StatsError::TooFewSamples { n: values.len(), min: 3 });
        }
        Ok(RankedVector {
            values: values.to_vec(),
            ranks: average_ranks(values),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn ranks(&self) -> &[f64] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// 1-based fractional ranks; ties receive the mean of the ranks they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson product-moment correlation of two equal-length slices.
///
/// Returns `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(StatsError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_pair(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < min {
        return Err(StatsError::TooFewSamples { n: a.len(), min });
    }
    check_finite(a)?;
    check_finite(b)
}

fn rank_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b)).ok_or(StatsError::DegenerateInput)
}

/// Spearman rank correlation with a two-sided t-approximation p-value.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<CorrelationValue> {
    check_pair(a, b, 3)?;
    let rho = rank_rho(a, b)?;
    Ok(CorrelationValue::with_t_test(rho, a.len(), a.len() - 2))
}

/// First-order partial correlation from three pairwise coefficients.
pub fn partial_from_coefficients(r_ab: f64, r_az: f64, r_bz: f64) -> Result<f64> {
    for r in [r_az, r_bz] {
        if r.abs() >= 1.0 - COLLINEAR_EPS {
            return Err(StatsError::ConfounderCollinear(r.abs()));
        }
    }
    let denom = ((1.0 - r_az * r_az) * (1.0 - r_bz * r_bz)).sqrt();
    Ok(((r_ab - r_az * r_bz) / denom).clamp(-1.0, 1.0))
}

/// Spearman correlation of `a` and `b` controlling for the single confounder `z`.
pub fn partial_spearman(a: &[f64], b: &[f64], z: &[f64]) -> Result<CorrelationValue> {
    check_pair(a, b, 4)?;
    check_pair(a, z, 4)?;
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let rz = average_ranks(z);
    let deg = StatsError::DegenerateInput;
    let r_ab = pearson(&ra, &rb).ok_or(deg.clone())?;
    let r_az = pearson(&ra, &rz).ok_or(deg.clone())?;
    let r_bz = pearson(&rb, &rz).ok_or(deg)?;
    let rho = partial_from_coefficients(r_ab, r_az, r_bz)?;
    Ok(CorrelationValue::with_t_test(rho, a.len(), a.len() - 3))
}

/// Two-sided p-value of `rho` under the t-approximation with `df` degrees of freedom.
pub fn t_test_p_value(rho: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let r2 = rho * rho;
    if r2 >= 1.0 {
        return 0.0;
    }
    let t = rho.abs() * (df as f64 / (1.0 - r2)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df > 0");
    (2.0 * dist.sf(t)).clamp(0.0, 1.0)
}

/// Maps a p-value onto the half-open thresholds 0.05 / 0.01 / 0.001.
pub fn significance_stars(p: f64) -> Result<Stars> {
    if !(0.0..=1.0).contains(&p) {
        return Err(StatsError::InvalidProbability(p));
    }
    Ok(if p < 0.001 {
        Stars::Three
    } else if p < 0.01 {
        Stars::Two
    } else if p < 0.05 {
        Stars::One
    } else {
        Stars::None
    })
}

/// Arithmetic mean and population standard deviation.
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}
