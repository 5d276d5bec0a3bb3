//! Finite sequence spaces and verifiable-reward tasks over them.
//!
//! Outcomes are all token sequences of length `1..=max_len` over a vocabulary
//! of `vocab_size` tokens. They are indexed length-major and lexicographically
//! within each length: every length-1 sequence comes before every length-2
//! sequence, and within a length the first token is the most significant
//! digit. With `V = 2, L = 2` the order is
//! `[0], [1], [0,0], [0,1], [1,0], [1,1]`.
//!
//! Every other module addresses outcomes by this index.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of enumerable outcomes.
pub const DEFAULT_OUTCOME_CAP: usize = 1_000_000;

/// Token sequences of length `1..=max_len` over `vocab_size` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSpace {
    vocab_size: usize,
    max_len: usize,
    /// `offsets[l - 1]` is the index of the first sequence of length `l`;
    /// the final entry is the outcome count.
    offsets: Vec<usize>,
}

impl SequenceSpace {
    pub fn new(vocab_size: usize, max_len: usize) -> Result<Self> {
        Self::with_cap(vocab_size, max_len, DEFAULT_OUTCOME_CAP)
    }

    pub fn with_cap(vocab_size: usize, max_len: usize, cap: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::InvalidSpace("vocab_size must be at least 1".into()));
        }
        if max_len == 0 {
            return Err(Error::InvalidSpace("max_len must be at least 1".into()));
        }
        let mut offsets = Vec::with_capacity(max_len + 1);
        let mut total: u128 = 0;
        let mut level: u128 = 1;
        offsets.push(0);
        for _ in 0..max_len {
            level = level.saturating_mul(vocab_size as u128);
            total = total.saturating_add(level);
            if total > cap as u128 {
                return Err(Error::SpaceTooLarge { count: total, cap });
            }
            offsets.push(total as usize);
        }
        Ok(Self {
            vocab_size,
            max_len,
            offsets,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn outcome_count(&self) -> usize {
        self.offsets[self.max_len]
    }

    pub fn encode(&self, sequence: &[usize]) -> Result<usize> {
        let len = sequence.len();
        if len == 0 {
            return Err(Error::InvalidSequence("empty sequence".into()));
        }
        if len > self.max_len {
            return Err(Error::InvalidSequence(format!(
                "length {len} exceeds max_len {}",
                self.max_len
            )));
        }
        let mut within = 0usize;
        for &token in sequence {
            if token >= self.vocab_size {
                return Err(Error::InvalidSequence(format!(
                    "token {token} out of range for vocabulary of {}",
                    self.vocab_size
                )));
            }
            within = within * self.vocab_size + token;
        }
        Ok(self.offsets[len - 1] + within)
    }

    pub fn decode(&self, index: usize) -> Result<Vec<usize>> {
        let count = self.outcome_count();
        if index >= count {
            return Err(Error::IndexOutOfRange { index, count });
        }
        // offsets is strictly increasing, so the partition point is the length.
        let len = self.offsets.partition_point(|&o| o <= index);
        let mut within = index - self.offsets[len - 1];
        let mut sequence = vec![0; len];
        for slot in sequence.iter_mut().rev() {
            *slot = within % self.vocab_size;
            within /= self.vocab_size;
        }
        Ok(sequence)
    }

    /// Iterates `(index, sequence)` pairs in index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Vec<usize>)> + '_ {
        (0..self.outcome_count()).map(move |i| (i, self.decode(i).expect("index in range")))
    }
}

/// A question with a dense reward table over a space's outcomes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Task {
    id: String,
    rewards: Vec<f64>,
}

impl Task {
    pub fn new(space: &SequenceSpace, id: impl Into<String>, rewards: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if rewards.len() != space.outcome_count() {
            return Err(Error::InvalidTask(format!(
                "task {id:?} has {} rewards for {} outcomes",
                rewards.len(),
                space.outcome_count()
            )));
        }
        if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(Error::InvalidTask(format!(
                "task {id:?} has a non-finite reward at outcome {i}"
            )));
        }
        Ok(Self { id, rewards })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Outcomes whose reward reaches `threshold`.
    pub fn correct_outcomes(&self, threshold: f64) -> Vec<usize> {
        self.rewards
            .iter()
            .enumerate()
            .filter(|(_, &r)| r >= threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Reward table with `high_reward` on the needles and `low_reward` elsewhere.
pub fn make_needle_task(
    space: &SequenceSpace,
    needle_indices: &[usize],
    high_reward: f64,
    low_reward: f64,
) -> Result<Task> {
    if needle_indices.is_empty() {
        return Err(Error::InvalidTask("needle set is empty".into()));
    }
    if !(high_reward > low_reward) {
        return Err(Error::InvalidTask(format!(
            "high reward {high_reward} must exceed low reward {low_reward}"
        )));
    }
    let count = space.outcome_count();
    let mut rewards = vec![low_reward; count];
    for &i in needle_indices {
        if i >= count {
            return Err(Error::IndexOutOfRange { index: i, count });
        }
        rewards[i] = high_reward;
    }
    let label = needle_indices
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("+");
    Task::new(space, format!("needle-{label}"), rewards)
}

/// Reward distributions for synthetic tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardDistribution {
    /// Continuous rewards drawn from `[low, high)`.
    Uniform { low: f64, high: f64 },
    /// 0/1 rewards, each outcome correct with probability `p`.
    Bernoulli { p: f64 },
}

impl Default for RewardDistribution {
    fn default() -> Self {
        Self::Uniform {
            low: 0.0,
            high: 1.0,
        }
    }
}

pub fn make_random_task(
    space: &SequenceSpace,
    seed: u64,
    distribution: RewardDistribution,
) -> Result<Task> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = space.outcome_count();
    let rewards: Vec<f64> = match distribution {
        RewardDistribution::Uniform { low, high } => {
            if !(low < high) || !low.is_finite() || !high.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "uniform reward range [{low}, {high}) is empty or non-finite"
                )));
            }
            let dist = Uniform::new(low, high);
            (0..count).map(|_| dist.sample(&mut rng)).collect()
        }
        RewardDistribution::Bernoulli { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "bernoulli probability {p} outside [0, 1]"
                )));
            }
            (0..count)
                .map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
                .collect()
        }
    };
    Task::new(space, format!("random-{seed}"), rewards)
}

/// Non-empty collection of tasks over one shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    space: SequenceSpace,
    tasks: Vec<Task>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSetDocument {
    vocab_size: usize,
    max_len: usize,
    tasks: Vec<TaskDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskDocument {
    id: String,
    rewards: Vec<f64>,
}

impl TaskSet {
    pub fn new(space: SequenceSpace, tasks: Vec<Task>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidTask("task set is empty".into()));
        }
        for task in &tasks {
            if task.len() != space.outcome_count() {
                return Err(Error::InvalidTask(format!(
                    "task {:?} does not match the shared space",
                    task.id()
                )));
            }
        }
        Ok(Self { space, tasks })
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Uniformly drawn task index.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(0..self.tasks.len())
    }

    /// Tasks at the given indices, in the given order; `None` if empty.
    pub fn subset(&self, indices: &[usize]) -> Option<TaskSet> {
        let tasks: Vec<Task> = indices
            .iter()
            .filter_map(|&i| self.tasks.get(i).cloned())
            .collect();
        TaskSet::new(self.space.clone(), tasks).ok()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: TaskSetDocument = serde_json::from_str(text)?;
        let space = SequenceSpace::new(doc.vocab_size, doc.max_len)?;
        let tasks = doc
            .tasks
            .into_iter()
            .map(|t| Task::new(&space, t.id, t.rewards))
            .collect::<Result<Vec<_>>>()?;
        Self::new(space, tasks)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = TaskSetDocument {
            vocab_size: self.space.vocab_size,
            max_len: self.space.max_len,
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskDocument {
                    id: t.id.clone(),
                    rewards: t.rewards.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }
}
