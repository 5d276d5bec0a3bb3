//! Optimizers for the regularized objectives.
//!
//! [`exact`] runs gradient ascent on the full-distribution objective and is
//! the numerical counterpart of the closed-form optima. [`sampled`] is the
//! group-sampled training loop with clipped surrogate, KL penalty, entropy
//! bonus and periodic reference refresh.

pub mod exact;
pub mod sampled;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::CategoricalPolicy;
use crate::reweight::{reweight_reference, ReweightSpec};

pub use exact::{exact_gradient, exact_objective, gradient_ascent, AscentSettings};
pub use sampled::{
    clipped_surrogate, group_advantages, group_loss_gradient, initial_logits, rapo_train,
    GroupLoss, TrainOutcome,
};

/// Which KL divergence regularizes the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(π ‖ ref)`: mode seeking, confined to the reference support.
    Reverse,
    /// `KL(ref ‖ π)`: mass covering.
    Forward,
}

/// Which reference the KL term is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    Raw,
    Reweighted { phi: ReweightSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kl_direction: KlDirection,
    pub reference: ReferenceSpec,
    pub alpha: f64,
    pub beta: f64,
}

/// Default KL coefficient.
pub const DEFAULT_ALPHA: f64 = 0.001;
/// Default entropy coefficient.
pub const DEFAULT_BETA: f64 = 0.01;

impl Default for ObjectiveSpec {
    /// Forward KL against the reweighted reference.
    fn default() -> Self {
        Self {
            kl_direction: KlDirection::Forward,
            reference: ReferenceSpec::Reweighted {
                phi: ReweightSpec::default(),
            },
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

impl ObjectiveSpec {
    pub fn forward(alpha: f64, beta: f64) -> Self {
        Self {
            kl_direction: KlDirection::Forward,
            reference: ReferenceSpec::Raw,
            alpha,
            beta,
        }
    }

    pub fn reverse(alpha: f64, beta: f64) -> Self {
        Self {
            kl_direction: KlDirection::Reverse,
            reference: ReferenceSpec::Raw,
            alpha,
            beta,
        }
    }

    pub fn with_reweighting(mut self, phi: ReweightSpec) -> Self {
        self.reference = ReferenceSpec::Reweighted { phi };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// The reference the KL term uses for a task with these rewards.
    pub fn effective_reference(
        &self,
        reference: &CategoricalPolicy,
        rewards: &[f64],
    ) -> Result<CategoricalPolicy> {
        match self.reference {
            ReferenceSpec::Raw => Ok(reference.clone()),
            ReferenceSpec::Reweighted { phi } => reweight_reference(reference, rewards, phi),
        }
    }
}

/// Hyperparameters of the sampled training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Samples per task per batch (G).
    pub group_size: usize,
    pub clip_eps: f64,
    /// Updates per batch (K).
    pub inner_epochs: usize,
    /// Batches between reference refreshes (M).
    pub batches_per_refresh: usize,
    /// Reference refreshes (N).
    pub refresh_rounds: usize,
    pub learning_rate: f64,
    /// Tasks drawn (with replacement) per batch.
    pub batch_size: usize,
    pub adv_std_floor: f64,
    /// Initial mass given to outcomes the reference excludes, when the
    /// objective tolerates it (forward direction only).
    pub init_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            inner_epochs: 1,
            batches_per_refresh: 10,
            refresh_rounds: 10,
            learning_rate: 0.5,
            batch_size: 512,
            adv_std_floor: 1e-8,
            init_floor: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("group_size", self.group_size),
            ("inner_epochs", self.inner_epochs),
            ("batches_per_refresh", self.batches_per_refresh),
            ("refresh_rounds", self.refresh_rounds),
            ("batch_size", self.batch_size),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.group_size < 2 {
            return Err(Error::InvalidArgument(
                "group_size must be at least 2 for group-relative advantages".into(),
            ));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.adv_std_floor > 0.0) {
            return Err(Error::InvalidArgument(
                "adv_std_floor must be positive".into(),
            ));
        }
        if !(self.init_floor > 0.0 && self.init_floor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "init_floor must lie in (0, 1), got {}",
                self.init_floor
            )));
        }
        Ok(())
    }
}

/// One row of a training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub expected_reward: f64,
    /// `KL(ref ‖ π)` against the original (unrefreshed, raw) reference.
    pub forward_kl: f64,
    /// `KL(π ‖ ref)` against the original reference.
    pub reverse_kl: f64,
    pub entropy: f64,
    /// Exact objective value at this step.
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Writes `step,expected_reward,forward_kl,reverse_kl,entropy,grad_norm`
    /// rows, preceded by `# `-prefixed header lines.
    pub fn write_csv<W: Write>(&self, mut out: W, header_lines: &[String]) -> Result<()> {
        for line in header_lines {
            writeln!(out, "# {line}")?;
        }
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record([
            "step",
            "expected_reward",
            "forward_kl",
            "reverse_kl",
            "entropy",
            "grad_norm",
        ])?;
        for r in &self.records {
            writer.write_record([
                r.step.to_string(),
                r.expected_reward.to_string(),
                r.forward_kl.to_string(),
                r.reverse_kl.to_string(),
                r.entropy.to_string(),
                r.grad_norm.to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}
