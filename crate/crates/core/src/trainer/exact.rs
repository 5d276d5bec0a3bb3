//! Gradient ascent on the exact objective `E_π[r] - α KL + β H(π)`.
//!
//! The policy is `softmax(z)`. Entries of `z` may be `-inf`, which pins the
//! outcome at exactly zero mass: the reverse-KL objective is `-inf` for any
//! policy with mass off the reference support, so reverse-direction ascent
//! runs on the reference support only.

use crate::divergence::kl_slices;
use crate::error::{Error, Result};
use crate::policy::{entropy_slice, softmax_slice, CategoricalPolicy};

use super::{KlDirection, ObjectiveSpec, TraceRecord, TrainTrace};

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::SizeMismatch { expected, actual });
    }
    Ok(())
}

fn expected_reward(probs: &[f64], rewards: &[f64]) -> f64 {
    probs.iter().zip(rewards).map(|(p, r)| p * r).sum()
}

/// Objective value over raw probability slices; `q` is the effective
/// reference.
pub(crate) fn objective_slices(
    probs: &[f64],
    q: &[f64],
    rewards: &[f64],
    spec: &ObjectiveSpec,
) -> f64 {
    let kl = match spec.kl_direction {
        KlDirection::Reverse => kl_slices(probs, q),
        KlDirection::Forward => kl_slices(q, probs),
    };
    if kl == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    expected_reward(probs, rewards) - spec.alpha * kl + spec.beta * entropy_slice(probs)
}

/// `Σ p r - α KL + β H(p)`, with the KL measured in `spec`'s direction
/// against `spec`'s (possibly reweighted) reference.
pub fn exact_objective(
    policy: &CategoricalPolicy,
    reference: &CategoricalPolicy,
    rewards: &[f64],
    spec: &ObjectiveSpec,
) -> Result<f64> {
    spec.validate()?;
    policy.check_same_len(reference)?;
    check_len(policy.len(), rewards.len())?;
    let q = spec.effective_reference(reference, rewards)?;
    Ok(objective_slices(policy.probs(), q.probs(), rewards, spec))
}

/// Gradient of the objective w.r.t. softmax logits, over raw slices.
pub(crate) fn gradient_slices(
    probs: &[f64],
    q: &[f64],
    rewards: &[f64],
    spec: &ObjectiveSpec,
) -> Vec<f64> {
    let mean_reward = expected_reward(probs, rewards);
    let h = entropy_slice(probs);
    let reverse_kl = match spec.kl_direction {
        KlDirection::Reverse => kl_slices(probs, q),
        KlDirection::Forward => 0.0,
    };
    probs
        .iter()
        .zip(q)
        .zip(rewards)
        .map(|((&p, &qi), &r)| {
            let kl_part = match spec.kl_direction {
                // d/dz Σ q ln p = q - p
                KlDirection::Forward => spec.alpha * (qi - p),
                KlDirection::Reverse => {
                    if p == 0.0 {
                        0.0
                    } else if qi == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        -spec.alpha * p * ((p / qi).ln() - reverse_kl)
                    }
                }
            };
            let entropy_part = if p > 0.0 {
                -spec.beta * p * (p.ln() + h)
            } else {
                0.0
            };
            p * (r - mean_reward) + kl_part + entropy_part
        })
        .collect()
}

/// Analytic gradient of [`exact_objective`] w.r.t. the logits of
/// `π = softmax(logits)`. Logits may contain `-inf` (pinned zero mass).
pub fn exact_gradient(
    logits: &[f64],
    reference: &CategoricalPolicy,
    rewards: &[f64],
    spec: &ObjectiveSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    check_len(reference.len(), logits.len())?;
    check_len(reference.len(), rewards.len())?;
    check_logits(logits)?;
    let q = spec.effective_reference(reference, rewards)?;
    Ok(gradient_slices(
        &softmax_slice(logits),
        q.probs(),
        rewards,
        spec,
    ))
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::InvalidArgument("logits contain NaN or +inf".into()));
    }
    if logits.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Err(Error::InvalidArgument("every logit is -inf".into()));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentSettings {
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Backtrack (halve the step) until the objective does not decrease.
    pub line_search: bool,
    /// Stop once the gradient norm falls to this value.
    pub grad_tol: f64,
    /// Step along `∇_j / p_j` (the natural gradient under the Fisher
    /// metric of the softmax) instead of `∇_j`. Small-mass outcomes then
    /// converge as fast as large ones.
    pub natural_gradient: bool,
}

impl Default for AscentSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            max_steps: 200_000,
            line_search: true,
            grad_tol: 1e-12,
            natural_gradient: false,
        }
    }
}

const MAX_HALVINGS: usize = 60;

/// Gradient ascent from `init_logits`.
///
/// Under the reverse direction, outcomes outside the effective reference's
/// support are pinned at zero mass before the first step. With line search
/// the objective never decreases between accepted steps; ascent stops early
/// when no step size improves it.
pub fn gradient_ascent(
    init_logits: &[f64],
    reference: &CategoricalPolicy,
    rewards: &[f64],
    spec: &ObjectiveSpec,
    settings: &AscentSettings,
) -> Result<(CategoricalPolicy, TrainTrace)> {
    spec.validate()?;
    check_len(reference.len(), init_logits.len())?;
    check_len(reference.len(), rewards.len())?;
    check_logits(init_logits)?;
    if !(settings.learning_rate >= 0.0) {
        return Err(Error::InvalidArgument(
            "learning rate must be non-negative".into(),
        ));
    }
    let q = spec.effective_reference(reference, rewards)?;
    let q = q.probs();

    let mut logits = init_logits.to_vec();
    if spec.kl_direction == KlDirection::Reverse {
        for (z, &qi) in logits.iter_mut().zip(q) {
            if qi == 0.0 {
                *z = f64::NEG_INFINITY;
            }
        }
        if logits.iter().all(|z| *z == f64::NEG_INFINITY) {
            return Err(Error::InvalidArgument(
                "initial logits put no mass on the reference support".into(),
            ));
        }
    }

    let mut trace = TrainTrace::default();
    let mut probs = softmax_slice(&logits);
    let mut value = objective_slices(&probs, q, rewards, spec);

    for step in 0..settings.max_steps.max(1) {
        let grad = gradient_slices(&probs, q, rewards, spec);
        let grad_norm = norm(&grad);
        trace.records.push(record(
            step,
            &probs,
            reference.probs(),
            rewards,
            value,
            grad_norm,
        ));
        if value.is_nan() || grad_norm.is_nan() {
            return Err(Error::Aborted {
                reason: format!("objective became NaN at step {step}"),
                trace: Box::new(trace),
            });
        }
        if grad_norm <= settings.grad_tol || step + 1 >= settings.max_steps {
            break;
        }

        let direction: Vec<f64> = if settings.natural_gradient {
            grad.iter()
                .zip(&probs)
                .map(|(g, &p)| if p > 0.0 { g / p } else { 0.0 })
                .collect()
        } else {
            grad
        };
        let mut lr = settings.learning_rate;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = logits
                .iter()
                .zip(&direction)
                .map(|(z, g)| {
                    if *z == f64::NEG_INFINITY {
                        *z
                    } else {
                        z + lr * g
                    }
                })
                .collect();
            let cand_probs = softmax_slice(&candidate);
            let cand_value = objective_slices(&cand_probs, q, rewards, spec);
            if !settings.line_search || cand_value >= value {
                logits = candidate;
                probs = cand_probs;
                value = cand_value;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let policy = CategoricalPolicy::new(probs)?;
    Ok((policy, trace))
}

fn record(
    step: usize,
    probs: &[f64],
    reference: &[f64],
    rewards: &[f64],
    objective: f64,
    grad_norm: f64,
) -> TraceRecord {
    TraceRecord {
        step,
        expected_reward: expected_reward(probs, rewards),
        forward_kl: kl_slices(reference, probs),
        reverse_kl: kl_slices(probs, reference),
        entropy: entropy_slice(probs),
        objective,
        grad_norm,
    }
}
