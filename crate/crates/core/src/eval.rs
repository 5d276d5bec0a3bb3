//! Unbiased pass@k estimation and Hard-subset construction.
//!
//! `pass_at_k(n, c, k) = 1 - C(n-c, k) / C(n, k)` is evaluated as the
//! product `Π_{i<k} (n-c-i)/(n-i)`, which stays in `[0, 1]` for any `n`.
//! Per-task evaluation draws from its own ChaCha8 stream (the task index), so
//! results do not depend on how tasks are scheduled across threads.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::CategoricalPolicy;
use crate::seqspace::{Task, TaskSet};

/// Default sample budget.
pub const DEFAULT_EVAL_N: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassAtKRecord {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub value: f64,
}

pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n}, c={c}, k={k}"
        )));
    }
    if c == 0 {
        return Ok(0.0);
    }
    if n - c < k {
        return Ok(1.0);
    }
    if k == 1 {
        return Ok(c as f64 / n as f64);
    }
    let miss: f64 = (0..k)
        .map(|i| (n - c - i) as f64 / (n - i) as f64)
        .product();
    Ok(1.0 - miss)
}

/// `1, 2, 4, …` up to and including the largest power of two `<= n`.
pub fn power_of_two_ks(n: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |k| k.checked_mul(2))
        .take_while(|&k| k <= n)
        .collect()
}

/// Number of `n` draws from `policy` whose reward reaches `threshold`.
pub fn count_correct<R: Rng + ?Sized>(
    policy: &CategoricalPolicy,
    task: &Task,
    n: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<usize> {
    if policy.len() != task.len() {
        return Err(Error::SizeMismatch {
            expected: task.len(),
            actual: policy.len(),
        });
    }
    let rewards = task.rewards();
    Ok(policy
        .sample(rng, n)
        .into_iter()
        .filter(|&y| rewards[y] >= threshold)
        .count())
}

pub fn evaluate_policy<R: Rng + ?Sized>(
    policy: &CategoricalPolicy,
    task: &Task,
    n: usize,
    k_list: &[usize],
    threshold: f64,
    rng: &mut R,
) -> Result<Vec<PassAtKRecord>> {
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={n}")));
    }
    let c = count_correct(policy, task, n, threshold, rng)?;
    k_list
        .iter()
        .map(|&k| {
            Ok(PassAtKRecord {
                n,
                c,
                k,
                value: pass_at_k(n, c, k)?,
            })
        })
        .collect()
}

/// Indices of tasks on which `base_policy` draws no correct outcome in `n`
/// samples.
pub fn hard_subset<R: Rng + ?Sized>(
    taskset: &TaskSet,
    base_policy: &CategoricalPolicy,
    n: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("hard subset needs n >= 1".into()));
    }
    let mut hard = Vec::new();
    for (i, task) in taskset.tasks().iter().enumerate() {
        if count_correct(base_policy, task, n, threshold, rng)? == 0 {
            hard.push(i);
        }
    }
    Ok(hard)
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub n: usize,
    /// Defaults to the powers of two up to `n`.
    pub k_list: Option<Vec<usize>>,
    pub threshold: f64,
    /// Samples used to decide Hard membership under the reference.
    pub hard_n: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            n: DEFAULT_EVAL_N,
            k_list: None,
            threshold: 1.0,
            hard_n: DEFAULT_EVAL_N,
        }
    }
}

impl EvalSpec {
    pub fn ks(&self) -> Vec<usize> {
        self.k_list
            .clone()
            .unwrap_or_else(|| power_of_two_ks(self.n))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.hard_n == 0 {
            return Err(Error::InvalidArgument(
                "eval n and hard_n must be at least 1".into(),
            ));
        }
        let ks = self.ks();
        if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > self.n) {
            return Err(Error::InvalidArgument(format!(
                "k_list {ks:?} must be non-empty with every k in 1..={}",
                self.n
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: String,
    pub records: Vec<PassAtKRecord>,
}

/// Evaluates `policies[i]` on task `i`, drawing from stream `i` of `seed`.
pub fn evaluate_tasks(
    policies: &[CategoricalPolicy],
    taskset: &TaskSet,
    spec: &EvalSpec,
    seed: u64,
) -> Result<Vec<TaskEval>> {
    spec.validate()?;
    if policies.len() != taskset.len() {
        return Err(Error::SizeMismatch {
            expected: taskset.len(),
            actual: policies.len(),
        });
    }
    let ks = spec.ks();
    taskset
        .tasks()
        .par_iter()
        .zip(policies)
        .enumerate()
        .map(|(i, (task, policy))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Ok(TaskEval {
                task_id: task.id().to_string(),
                records: evaluate_policy(policy, task, spec.n, &ks, spec.threshold, &mut rng)?,
            })
        })
        .collect()
}

/// Writes `task_id,n,c,k,pass_at_k` rows after `# `-prefixed header lines.
pub fn write_eval_csv<W: Write>(
    mut out: W,
    header_lines: &[String],
    evals: &[TaskEval],
) -> Result<()> {
    for line in header_lines {
        writeln!(out, "# {line}")?;
    }
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["task_id", "n", "c", "k", "pass_at_k"])?;
    for eval in evals {
        for r in &eval.records {
            writer.write_record([
                eval.task_id.clone(),
                r.n.to_string(),
                r.c.to_string(),
                r.k.to_string(),
                r.value.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Mean pass@k at one budget over the Full and Hard subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub k: usize,
    pub full: f64,
    /// `None` when the Hard subset is empty.
    pub hard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub full_tasks: usize,
    pub hard_task_ids: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

/// Aggregates per-task records; `hard` holds indices into `evals`.
pub fn summarize(evals: &[TaskEval], hard: &[usize], n: usize) -> EvalSummary {
    let ks: Vec<usize> = evals
        .first()
        .map(|e| e.records.iter().map(|r| r.k).collect())
        .unwrap_or_default();
    let mean = |idx: &mut dyn Iterator<Item = usize>, col: usize| {
        let (sum, count) = idx.fold((0.0, 0usize), |(s, c), i| {
            (s + evals[i].records[col].value, c + 1)
        });
        (count > 0).then(|| sum / count as f64)
    };
    let rows = ks
        .iter()
        .enumerate()
        .map(|(col, &k)| SummaryRow {
            k,
            full: mean(&mut (0..evals.len()), col).unwrap_or(0.0),
            hard: mean(&mut hard.iter().copied(), col),
        })
        .collect();
    EvalSummary {
        n,
        full_tasks: evals.len(),
        hard_task_ids: hard.iter().map(|&i| evals[i].task_id.clone()).collect(),
        rows,
    }
}
