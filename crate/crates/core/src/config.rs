//! Experiment configuration.
//!
//! A config is a single JSON document. Unknown keys are rejected and every
//! field is validated by [`ExperimentConfig::resolve`] before any work
//! starts. All randomness derives from the top-level `seed`: each consumer
//! (training, evaluation, Hard membership, verification instances, random
//! task generation, reference generation) gets its own sub-seed from
//! [`derive_seed`].

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalSpec;
use crate::policy::CategoricalPolicy;
use crate::reweight::ReweightSpec;
use crate::seqspace::{
    make_needle_task, make_random_task, RewardDistribution, SequenceSpace, Task, TaskSet,
};
use crate::trainer::{ObjectiveSpec, ReferenceSpec, TrainConfig};

/// Consumers of the top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPurpose {
    Train = 1,
    Eval = 2,
    Hard = 3,
    Verify = 4,
    Tasks = 5,
    Reference = 6,
}

/// First word of ChaCha8 stream `2^32 + purpose` seeded with `seed`.
pub fn derive_seed(seed: u64, purpose: SeedPurpose) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 32) + purpose as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for SpaceSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            max_len: 1,
        }
    }
}

/// How the task set is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskGenSpec {
    /// One task per entry of `needles`, rewarding the listed outcomes.
    Needle {
        needles: Vec<Vec<usize>>,
        #[serde(default = "one")]
        high: f64,
        #[serde(default)]
        low: f64,
    },
    /// `count` tasks with i.i.d. rewards.
    Random {
        count: usize,
        #[serde(default)]
        distribution: RewardDistribution,
    },
    /// A task-set JSON file; its space must match `space`.
    File { path: PathBuf },
}

fn one() -> f64 {
    1.0
}

impl Default for TaskGenSpec {
    fn default() -> Self {
        Self::Needle {
            needles: vec![vec![15]],
            high: 1.0,
            low: 0.0,
        }
    }
}

/// How the reference policy is produced. `zero` lists outcomes forced to
/// zero mass before normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceGenSpec {
    Uniform {
        #[serde(default)]
        zero: Vec<usize>,
    },
    /// Weight `ratio^i` on outcome `i`.
    Geometric {
        ratio: f64,
        #[serde(default)]
        zero: Vec<usize>,
    },
    /// Weights drawn uniformly from `[0.05, 1)`.
    Random {
        #[serde(default)]
        zero: Vec<usize>,
    },
    /// Explicit weights, normalized.
    Weights { weights: Vec<f64> },
}

impl Default for ReferenceGenSpec {
    fn default() -> Self {
        Self::Geometric {
            ratio: 0.7,
            zero: vec![15],
        }
    }
}

impl ReferenceGenSpec {
    pub fn build(&self, outcomes: usize, seed: u64) -> Result<CategoricalPolicy> {
        let (mut weights, zero): (Vec<f64>, &[usize]) = match self {
            Self::Uniform { zero } => (vec![1.0; outcomes], zero),
            Self::Geometric { ratio, zero } => {
                if !(*ratio > 0.0) || !ratio.is_finite() {
                    return Err(Error::Config(format!(
                        "geometric ratio {ratio} must be positive"
                    )));
                }
                ((0..outcomes).map(|i| ratio.powi(i as i32)).collect(), zero)
            }
            Self::Random { zero } => {
                use rand::Rng;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (
                    (0..outcomes).map(|_| rng.gen_range(0.05..1.0)).collect(),
                    zero,
                )
            }
            Self::Weights { weights } => {
                if weights.len() != outcomes {
                    return Err(Error::Config(format!(
                        "reference has {} weights for {outcomes} outcomes",
                        weights.len()
                    )));
                }
                (weights.clone(), &[])
            }
        };
        for &i in zero {
            *weights
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("zero outcome {i} out of range")))? = 0.0;
        }
        CategoricalPolicy::from_weights(weights).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Settings of the optimum-vs-ascent verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    /// Random instances per check.
    pub instances: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Outcomes of the forward-KL check and its zero-reference outcomes.
    pub forward_outcomes: usize,
    pub forward_zero: Vec<usize>,
    /// Inclusive range of outcome counts for the lemma checks.
    pub lemma_outcomes: (usize, usize),
    pub forward_tolerance: f64,
    pub lemma_tolerance: f64,
    /// Use Fisher-preconditioned ascent steps.
    pub natural_gradient: bool,
    pub max_steps: usize,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            instances: 20,
            alpha: 0.1,
            beta: 0.1,
            forward_outcomes: 16,
            forward_zero: vec![0, 1, 2, 13, 14, 15],
            lemma_outcomes: (10, 100),
            forward_tolerance: 1e-4,
            lemma_tolerance: 1e-6,
            natural_gradient: true,
            max_steps: 20_000,
        }
    }
}

impl VerifySpec {
    fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.max_steps == 0 {
            return Err(Error::Config(
                "verify.instances and verify.max_steps must be at least 1".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(
                "verify alpha and beta must be positive".into(),
            ));
        }
        let (lo, hi) = self.lemma_outcomes;
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!(
                "invalid lemma_outcomes range ({lo}, {hi})"
            )));
        }
        if self
            .forward_zero
            .iter()
            .any(|&i| i >= self.forward_outcomes)
            || self.forward_zero.len() >= self.forward_outcomes
        {
            return Err(Error::Config(
                "forward_zero must leave some outcomes and stay in range".into(),
            ));
        }
        if !(self.forward_tolerance >= 0.0 && self.lemma_tolerance >= 0.0) {
            return Err(Error::Config("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Hyperparameter grid. An empty axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub phi: Vec<ReweightSpec>,
    pub clip_eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub space: SpaceSpec,
    pub tasks: TaskGenSpec,
    pub reference: ReferenceGenSpec,
    pub objective: ObjectiveSpec,
    /// Optional comparison objective trained alongside `objective`.
    pub baseline: Option<ObjectiveSpec>,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub verify: VerifySpec,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            space: SpaceSpec::default(),
            tasks: TaskGenSpec::default(),
            reference: ReferenceGenSpec::default(),
            objective: ObjectiveSpec::default(),
            baseline: None,
            train: TrainConfig::default(),
            eval: EvalSpec::default(),
            verify: VerifySpec::default(),
            sweep: SweepGrid::default(),
        }
    }
}

/// A validated config together with the objects it describes.
#[derive(Debug, Clone)]
pub struct Experiment {
    /// The config with derived seeds filled in.
    pub config: ExperimentConfig,
    pub taskset: TaskSet,
    pub reference: CategoricalPolicy,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// One-line JSON form embedded in output headers.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Validates every field and builds the space, tasks and reference.
    /// Any failure is reported as [`Error::Config`].
    pub fn resolve(&self) -> Result<Experiment> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        let mut config = self.clone();
        config.train.seed = derive_seed(self.seed, SeedPurpose::Train);

        let space = SequenceSpace::new(self.space.vocab_size, self.space.max_len).map_err(cfg)?;
        let taskset = self.build_tasks(&space).map_err(cfg)?;
        let reference = self.reference.build(
            space.outcome_count(),
            derive_seed(self.seed, SeedPurpose::Reference),
        )?;

        config.objective.validate().map_err(cfg)?;
        if let Some(baseline) = &config.baseline {
            baseline.validate().map_err(cfg)?;
        }
        config.train.validate().map_err(cfg)?;
        config.eval.validate().map_err(cfg)?;
        config.verify.validate()?;
        let objective_phis = std::iter::once(&config.objective)
            .chain(&config.baseline)
            .filter_map(|spec| match spec.reference {
                ReferenceSpec::Reweighted { phi } => Some(phi),
                ReferenceSpec::Raw => None,
            });
        for phi in objective_phis.chain(config.sweep.phi.iter().copied()) {
            for task in taskset.tasks() {
                phi.validate_for(task.rewards()).map_err(cfg)?;
            }
        }
        let positive = |xs: &[f64]| xs.iter().all(|&x| x > 0.0 && x.is_finite());
        if !positive(&config.sweep.alpha)
            || !config.sweep.beta.iter().all(|&b| b >= 0.0 && b.is_finite())
        {
            return Err(Error::Config(
                "sweep alpha must be positive and beta non-negative".into(),
            ));
        }
        if !config.sweep.clip_eps.iter().all(|&e| e > 0.0 && e < 1.0) {
            return Err(Error::Config(
                "sweep clip_eps values must lie in (0, 1)".into(),
            ));
        }
        Ok(Experiment {
            config,
            taskset,
            reference,
        })
    }

    fn build_tasks(&self, space: &SequenceSpace) -> Result<TaskSet> {
        match &self.tasks {
            TaskGenSpec::Needle { needles, high, low } => {
                let tasks = needles
                    .iter()
                    .map(|n| make_needle_task(space, n, *high, *low))
                    .collect::<Result<Vec<Task>>>()?;
                TaskSet::new(space.clone(), tasks)
            }
            TaskGenSpec::Random {
                count,
                distribution,
            } => {
                let base = derive_seed(self.seed, SeedPurpose::Tasks);
                let tasks = (0..*count as u64)
                    .map(|i| make_random_task(space, base.wrapping_add(i), *distribution))
                    .collect::<Result<Vec<Task>>>()?;
                TaskSet::new(space.clone(), tasks)
            }
            TaskGenSpec::File { path } => {
                let set = TaskSet::from_json_file(path)?;
                if set.space() != space {
                    return Err(Error::Config(format!(
                        "task file {} does not match the configured space",
                        path.display()
                    )));
                }
                Ok(set)
            }
        }
    }
}
