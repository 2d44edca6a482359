//! Log-domain arithmetic and divergences.
//!
//! Probabilities that are multiplied along HMM paths live in the log domain;
//! sums of such quantities go through [`log_add`], which shifts by the larger
//! argument before exponentiating so that long utterances never underflow.

use std::fmt;
use std::ops::Add;

use crate::error::{Error, Result};

/// Floor applied to distributions before taking a KL divergence.
pub const KL_FLOOR: f64 = 1e-10;

/// Tolerance used when validating that a distribution sums to one.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Natural logarithm of a probability.
///
/// `LogProb::ZERO` (negative infinity) represents probability zero and is the
/// identity of [`log_add`].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Default)]
pub struct LogProb(pub f64);

impl LogProb {
    pub const ZERO: LogProb = LogProb(f64::NEG_INFINITY);
    pub const ONE: LogProb = LogProb(0.0);

    pub fn from_prob(p: f64) -> Self {
        LogProb(p.ln())
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }

    pub fn is_zero(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }

    pub fn ln_add(self, other: LogProb) -> LogProb {
        LogProb(log_add(self.0, other.0))
    }
}

impl Add for LogProb {
    type Output = LogProb;

    /// Product of the underlying probabilities.
    fn add(self, rhs: LogProb) -> LogProb {
        LogProb(self.0 + rhs.0)
    }
}

impl fmt::Display for LogProb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            write!(f, "LOG_ZERO")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// `ln(e^a + e^b)`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln Σ e^x` over a slice; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// A discrete probability distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates non-negativity and unit sum.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Dimension("empty distribution".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Dimension(format!(
                "distribution entry {bad} is negative or not finite"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::Dimension(format!("distribution sums to {sum}")));
        }
        Ok(Distribution { probs })
    }

    /// Rescales non-negative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Dimension(format!(
                "cannot normalize weights with sum {sum}"
            )));
        }
        Ok(Distribution {
            probs: weights.into_iter().map(|w| w / sum).collect(),
        })
    }

    pub fn uniform(n: usize) -> Self {
        Distribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Entries floored at [`KL_FLOOR`] and renormalized.
    pub fn smoothed(&self) -> Distribution {
        floor_renormalize(&self.probs, KL_FLOOR)
    }
}

pub(crate) fn floor_renormalize(probs: &[f64], floor: f64) -> Distribution {
    let floored: Vec<f64> = probs.iter().map(|p| p.max(floor)).collect();
    let sum: f64 = floored.iter().sum();
    Distribution {
        probs: floored.into_iter().map(|p| p / sum).collect(),
    }
}

/// `Σ p_i ln(p_i / q_i)` with `0 · ln(0/q) = 0`.
///
/// `q` is floored and renormalized first so that rounded-to-zero softmax
/// outputs do not produce infinities.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "kl_divergence over {} vs {} classes",
            p.len(),
            q.len()
        )));
    }
    let q = q.smoothed();
    Ok(kl_raw(p.probs(), q.probs()))
}

/// KL divergence without smoothing. Callers guarantee `q_i > 0` wherever `p_i > 0`.
pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum();
    kl.max(0.0)
}
