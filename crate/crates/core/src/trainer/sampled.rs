//! Group-sampled policy optimization with a KL penalty and reference refresh.
//!
//! Each task has its own tabular logits. A training run is `N` refresh rounds
//! of `M` batches; each batch snapshots `π_old`, draws `batch_size` tasks
//! uniformly with replacement, samples a group of `G` outcomes per drawn task
//! from `π_old`, and takes `K` gradient steps on
//!
//! ```text
//! 1/G Σ_i [ min(ρ_i A_i, clip(ρ_i, 1-ε, 1+ε) A_i) - α ρ_i k_i + β ρ_i (-ln π(y_i)) ]
//! ```
//!
//! with `ρ_i = π(y_i)/π_old(y_i)`. The per-sample KL term `k_i` is
//! `h(q̃(y_i)/π(y_i))`, `h(x) = x ln x - x + 1`, for the forward direction and
//! `ln(π(y_i)/q(y_i))` for the reverse one. The penalty and entropy terms
//! carry the importance weight `ρ_i`: at `π = π_old` their values are the
//! plain sample means, and their expected gradients equal the exact
//! gradients of the KL and entropy. After every round each task's working
//! reference is replaced by its current policy.
//!
//! Randomness: stream 0 of the seeded ChaCha8 generator draws batch tasks;
//! stream `1 + b` draws the rollouts of the `b`-th batch overall.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::divergence::{k3_unchecked, kl_slices};
use crate::error::{Error, Result};
use crate::policy::{entropy_slice, softmax_slice, CategoricalPolicy};
use crate::seqspace::TaskSet;

use super::exact::objective_slices;
use super::{KlDirection, ObjectiveSpec, TraceRecord, TrainConfig, TrainTrace};

/// `(r_i - mean) / std` with the population standard deviation; all zeros
/// when the std is below `std_floor`.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= std_floor) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(ρ A, clip(ρ, 1-ε, 1+ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    debug_assert!(ratio >= 0.0);
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Loss value and logit gradient of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLoss {
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// Sampled outcomes whose penalty is infinite (reverse KL with zero
    /// reference mass). They are left out of `gradient`; the caller pins
    /// them at zero mass.
    pub pinned: Vec<usize>,
}

/// Group objective and its gradient w.r.t. the logits of `probs`.
///
/// `q` is the effective reference, `outcomes` were drawn from `old_probs`,
/// and `advantages` are aligned with `outcomes`.
pub fn group_loss_gradient(
    probs: &[f64],
    old_probs: &[f64],
    q: &[f64],
    outcomes: &[usize],
    advantages: &[f64],
    spec: &ObjectiveSpec,
    clip_eps: f64,
) -> GroupLoss {
    debug_assert_eq!(outcomes.len(), advantages.len());
    let g = outcomes.len() as f64;
    let mut coef = vec![0.0; probs.len()];
    let mut loss = 0.0;
    let mut pinned = Vec::new();

    for (&y, &adv) in outcomes.iter().zip(advantages) {
        let p = probs[y];
        let ratio = p / old_probs[y];

        let surrogate = clipped_surrogate(ratio, adv, clip_eps);
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
        let mut c = if ratio * adv <= clipped * adv {
            ratio * adv
        } else {
            0.0
        };

        let penalty = match spec.kl_direction {
            KlDirection::Forward => {
                let x = q[y] / p;
                c -= spec.alpha * ratio * (1.0 - x);
                -spec.alpha * ratio * k3_unchecked(x)
            }
            KlDirection::Reverse => {
                if q[y] == 0.0 {
                    pinned.push(y);
                    loss = f64::NEG_INFINITY;
                    continue;
                }
                let log_ratio = (p / q[y]).ln();
                c -= spec.alpha * ratio * (log_ratio + 1.0);
                -spec.alpha * ratio * log_ratio
            }
        };

        let neg_log_p = -p.ln();
        c += spec.beta * ratio * (neg_log_p - 1.0);
        loss += (surrogate + penalty + spec.beta * ratio * neg_log_p) / g;
        coef[y] += c / g;
    }

    let total: f64 = coef.iter().sum();
    let gradient = coef.iter().zip(probs).map(|(c, p)| c - p * total).collect();
    pinned.sort_unstable();
    pinned.dedup();
    GroupLoss {
        loss,
        gradient,
        pinned,
    }
}

/// Starting logits `ln ref`. Outcomes without reference mass start at
/// `ln init_floor` under the forward direction and are pinned at zero mass
/// under the reverse direction.
pub fn initial_logits(
    reference: &CategoricalPolicy,
    direction: KlDirection,
    init_floor: f64,
) -> Vec<f64> {
    reference
        .probs()
        .iter()
        .map(|&q| {
            if q > 0.0 {
                q.ln()
            } else {
                match direction {
                    KlDirection::Forward => init_floor.ln(),
                    KlDirection::Reverse => f64::NEG_INFINITY,
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Final policy per task, in task-set order.
    pub policies: Vec<CategoricalPolicy>,
    pub trace: TrainTrace,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs the sampled training loop from `reference` on every task.
pub fn rapo_train(
    reference: &CategoricalPolicy,
    taskset: &TaskSet,
    config: &TrainConfig,
    spec: &ObjectiveSpec,
) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    let outcomes = taskset.space().outcome_count();
    if reference.len() != outcomes {
        return Err(Error::SizeMismatch {
            expected: outcomes,
            actual: reference.len(),
        });
    }
    let tasks = taskset.tasks();
    let raw_effective: Vec<CategoricalPolicy> = tasks
        .iter()
        .map(|t| spec.effective_reference(reference, t.rewards()))
        .collect::<Result<_>>()?;

    let init = initial_logits(reference, spec.kl_direction, config.init_floor);
    let mut logits: Vec<Vec<f64>> = vec![init; tasks.len()];
    let mut working_refs: Vec<CategoricalPolicy> = vec![reference.clone(); tasks.len()];

    let mut task_rng = ChaCha8Rng::seed_from_u64(config.seed);
    task_rng.set_stream(0);
    let mut trace = TrainTrace::default();
    let mut step = 0usize;
    let mut batch_counter = 0u64;

    for _round in 0..config.refresh_rounds {
        for _batch in 0..config.batches_per_refresh {
            batch_counter += 1;
            let old_probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax_slice(z)).collect();

            let mut rollout_rng = ChaCha8Rng::seed_from_u64(config.seed);
            rollout_rng.set_stream(batch_counter);
            let mut groups: Vec<(usize, Vec<usize>, Vec<f64>)> =
                Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let t = taskset.sample_index(&mut task_rng);
                let policy = CategoricalPolicy::new(old_probs[t].clone())?;
                let ys = policy.sample(&mut rollout_rng, config.group_size);
                let rewards: Vec<f64> = ys.iter().map(|&y| tasks[t].rewards()[y]).collect();
                let adv = group_advantages(&rewards, config.adv_std_floor)?;
                groups.push((t, ys, adv));
            }

            // Reweighted references for the tasks in this batch.
            let mut effective: Vec<Option<CategoricalPolicy>> = vec![None; tasks.len()];
            for (t, _, _) in &groups {
                if effective[*t].is_none() {
                    effective[*t] =
                        Some(spec.effective_reference(&working_refs[*t], tasks[*t].rewards())?);
                }
            }

            for _epoch in 0..config.inner_epochs {
                let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax_slice(z)).collect();
                let mut grads: Vec<Vec<f64>> = vec![vec![0.0; outcomes]; tasks.len()];
                let mut counts = vec![0usize; tasks.len()];
                let mut pinned: Vec<Vec<usize>> = vec![Vec::new(); tasks.len()];
                let mut loss = 0.0;

                for (t, ys, adv) in &groups {
                    let q = effective[*t].as_ref().expect("computed above");
                    let group = group_loss_gradient(
                        &probs[*t],
                        &old_probs[*t],
                        q.probs(),
                        ys,
                        adv,
                        spec,
                        config.clip_eps,
                    );
                    loss += group.loss / groups.len() as f64;
                    for (acc, g) in grads[*t].iter_mut().zip(&group.gradient) {
                        *acc += g;
                    }
                    counts[*t] += 1;
                    pinned[*t].extend(group.pinned);
                }

                let mut flat_norm_sq = 0.0;
                for t in 0..tasks.len() {
                    if counts[t] == 0 {
                        continue;
                    }
                    let scale = 1.0 / counts[t] as f64;
                    for (z, g) in logits[t].iter_mut().zip(&grads[t]) {
                        if *z != f64::NEG_INFINITY {
                            *z += config.learning_rate * g * scale;
                        }
                    }
                    for &y in &pinned[t] {
                        logits[t][y] = f64::NEG_INFINITY;
                    }
                    flat_norm_sq += norm(&grads[t]).powi(2) * scale * scale;
                }

                let grad_norm = flat_norm_sq.sqrt();
                trace.records.push(summarize(
                    step,
                    &logits,
                    reference,
                    &raw_effective,
                    taskset,
                    spec,
                    grad_norm,
                ));
                let bad_logits = logits.iter().flatten().any(|z| z.is_nan());
                if loss.is_nan() || grad_norm.is_nan() || bad_logits {
                    return Err(Error::Aborted {
                        reason: format!("loss became NaN at update {step}"),
                        trace: Box::new(trace),
                    });
                }
                step += 1;
            }
        }
        for (working, z) in working_refs.iter_mut().zip(&logits) {
            *working = CategoricalPolicy::new(softmax_slice(z))?;
        }
    }

    let policies = logits
        .iter()
        .map(|z| CategoricalPolicy::new(softmax_slice(z)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainOutcome { policies, trace })
}

/// Task-averaged exact metrics against the original reference.
fn summarize(
    step: usize,
    logits: &[Vec<f64>],
    reference: &CategoricalPolicy,
    raw_effective: &[CategoricalPolicy],
    taskset: &TaskSet,
    spec: &ObjectiveSpec,
    grad_norm: f64,
) -> TraceRecord {
    let n = logits.len() as f64;
    let mut rec = TraceRecord {
        step,
        expected_reward: 0.0,
        forward_kl: 0.0,
        reverse_kl: 0.0,
        entropy: 0.0,
        objective: 0.0,
        grad_norm,
    };
    for ((z, task), q) in logits.iter().zip(taskset.tasks()).zip(raw_effective) {
        let p = softmax_slice(z);
        let rewards = task.rewards();
        rec.expected_reward += p.iter().zip(rewards).map(|(a, b)| a * b).sum::<f64>() / n;
        rec.forward_kl += kl_slices(reference.probs(), &p) / n;
        rec.reverse_kl += kl_slices(&p, reference.probs()) / n;
        rec.entropy += entropy_slice(&p) / n;
        rec.objective += objective_slices(&p, q.probs(), rewards, spec) / n;
    }
    rec
}
