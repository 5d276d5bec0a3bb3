//! Categorical policies over an enumerated outcome space.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on `Σ p = 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Explicit probability vector, one entry per outcome index.
///
/// Exact zeros are allowed; softmax-built policies never contain them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoricalPolicy {
    probs: Vec<f64>,
}

impl CategoricalPolicy {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPolicy("no outcomes".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidPolicy(format!(
                "entry {i} is {} (must be finite and non-negative)",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidPolicy(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a policy.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidPolicy(format!(
                "weight {i} is {} (must be finite and non-negative)",
                weights[i]
            )));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidPolicy("weights sum to zero".into()));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(outcomes: usize) -> Result<Self> {
        if outcomes == 0 {
            return Err(Error::InvalidPolicy("no outcomes".into()));
        }
        Ok(Self {
            probs: vec![1.0 / outcomes as f64; outcomes],
        })
    }

    pub fn one_hot(outcomes: usize, index: usize) -> Result<Self> {
        if index >= outcomes {
            return Err(Error::IndexOutOfRange {
                index,
                count: outcomes,
            });
        }
        let mut probs = vec![0.0; outcomes];
        probs[index] = 1.0;
        Ok(Self { probs })
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

    pub fn entropy(&self) -> f64 {
        entropy(self)
    }

    pub fn support(&self, tol: f64) -> BTreeSet<usize> {
        support(self, tol)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<usize> {
        sample(self, rng, count)
    }

    pub(crate) fn check_same_len(&self, other: &CategoricalPolicy) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::SizeMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for CategoricalPolicy {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<CategoricalPolicy> for Vec<f64> {
    fn from(policy: CategoricalPolicy) -> Self {
        policy.probs
    }
}

/// Unconstrained, finite logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PolicyLogits {
    logits: Vec<f64>,
}

impl PolicyLogits {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidPolicy("no logits".into()));
        }
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(Error::InvalidPolicy(format!("logit {i} is not finite")));
        }
        Ok(Self { logits })
    }

    pub fn zeros(outcomes: usize) -> Result<Self> {
        Self::new(vec![0.0; outcomes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.logits
    }
}

impl TryFrom<Vec<f64>> for PolicyLogits {
    type Error = Error;

    fn try_from(logits: Vec<f64>) -> Result<Self> {
        Self::new(logits)
    }
}

impl From<PolicyLogits> for Vec<f64> {
    fn from(logits: PolicyLogits) -> Self {
        logits.logits
    }
}

pub fn softmax(logits: &PolicyLogits) -> CategoricalPolicy {
    CategoricalPolicy {
        probs: softmax_slice(logits.as_slice()),
    }
}

/// Max-shifted softmax. `-inf` entries map to exactly zero; at least one
/// entry must be finite.
pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "softmax needs a finite logit");
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(policy: &CategoricalPolicy) -> f64 {
    entropy_slice(policy.probs())
}

pub(crate) fn entropy_slice(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `count` i.i.d. outcome draws.
pub fn sample<R: Rng + ?Sized>(
    policy: &CategoricalPolicy,
    rng: &mut R,
    count: usize,
) -> Vec<usize> {
    let dist = WeightedIndex::new(policy.probs()).expect("policy weights are a valid distribution");
    (0..count).map(|_| dist.sample(rng)).collect()
}

/// Outcomes with probability strictly above `tol`.
pub fn support(policy: &CategoricalPolicy, tol: f64) -> BTreeSet<usize> {
    policy
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > tol)
        .map(|(i, _)| i)
        .collect()
}
