//! Closed-form and root-found optimal policies of the regularized objectives.
//!
//! * Reverse KL: `max E_p[r] - α KL(p‖ref)` is solved by `p ∝ e^{r/α} ref`.
//! * Reverse KL + entropy: `p ∝ e^{r/(α+β)} ref^{α/(α+β)}`.
//! * Forward KL + entropy: `max Σ p r + α Σ ref ln p - β Σ p ln p` has the
//!   stationarity condition
//!
//!   ```text
//!   α ref_i / u_i - β ln u_i = β + λ - r_i
//!   ```
//!
//!   per outcome, where `λ` is the multiplier of `Σ u = 1`. The left side is
//!   strictly decreasing in `u`, so each `u_i(λ)` is a unique root, and
//!   `S(λ) = Σ u_i(λ)` is strictly decreasing in `λ`. Off the reference
//!   support the root is `u_i = e^{(r_i - λ)/β - 1}`.
//!
//! The left side is written with `β ln u`, the derivative of the entropy term;
//! this is also what makes the off-support closed form come out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::CategoricalPolicy;

/// Residual tolerance on the per-outcome stationarity equation.
pub const TOKEN_RESIDUAL_TOL: f64 = 1e-12;
/// Target tolerance on `|Σ u - 1|` for the multiplier search.
pub const MASS_RESIDUAL_TOL: f64 = 1e-10;
/// Upper bound guaranteed on a returned solution's residual.
pub const SOLUTION_RESIDUAL_MAX: f64 = 1e-8;

const MAX_BISECTION_ITERS: usize = 200;
/// Largest `|ln u|` probed when bracketing a token mass.
const LOG_MASS_LIMIT: f64 = 16_384.0;
const MAX_LAMBDA_DOUBLINGS: usize = 64;

/// KL coefficient `alpha` and entropy coefficient `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationParams {
    pub alpha: f64,
    pub beta: f64,
}

impl RegularizationParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let params = Self { alpha, beta };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta must be non-negative and finite, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Root-found forward-KL optimum and its multiplier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagrangeSolution {
    pub policy: CategoricalPolicy,
    pub lambda: f64,
    /// `|Σ u - 1|` at termination, before the final renormalization.
    pub residual: f64,
}

fn check_rewards(reference: &CategoricalPolicy, rewards: &[f64]) -> Result<()> {
    if rewards.len() != reference.len() {
        return Err(Error::SizeMismatch {
            expected: reference.len(),
            actual: rewards.len(),
        });
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::InvalidArgument(format!("reward {i} is not finite")));
    }
    Ok(())
}

/// Normalizes `exp(log_weights)` with a max shift; `-inf` maps to zero.
fn normalize_log_weights(log_weights: Vec<f64>) -> Result<CategoricalPolicy> {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidPolicy("reference has no support".into()));
    }
    CategoricalPolicy::from_weights(log_weights.into_iter().map(|w| (w - max).exp()).collect())
}

/// Optimum of the reverse-KL objective: `p ∝ e^{r/α} ref`.
pub fn lemma1_optimum(
    reference: &CategoricalPolicy,
    rewards: &[f64],
    alpha: f64,
) -> Result<CategoricalPolicy> {
    lemma2_optimum(reference, rewards, alpha, 0.0)
}

/// Optimum of the reverse-KL + entropy objective:
/// `p ∝ e^{r/(α+β)} ref^{α/(α+β)}`.
pub fn lemma2_optimum(
    reference: &CategoricalPolicy,
    rewards: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<CategoricalPolicy> {
    RegularizationParams::new(alpha, beta)?;
    check_rewards(reference, rewards)?;
    let temp = alpha + beta;
    let exponent = alpha / temp;
    let log_weights = reference
        .probs()
        .iter()
        .zip(rewards)
        .map(|(&q, &r)| {
            if q > 0.0 {
                r / temp + exponent * q.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    normalize_log_weights(log_weights)
}

/// `F(u) = α ref / u - β ln u`.
pub fn stationarity_lhs(ref_mass: f64, alpha: f64, beta: f64, u: f64) -> f64 {
    if ref_mass == 0.0 {
        -beta * u.ln()
    } else {
        alpha * ref_mass / u - beta * u.ln()
    }
}

enum LogMass {
    Root(f64),
    /// The root lies above `+LOG_MASS_LIMIT`.
    Above,
    /// The root lies below `-LOG_MASS_LIMIT`.
    Below,
}

/// Solves `F(e^s) = β + λ - r` for `s = ln u`.
fn solve_log_mass(
    ref_mass: f64,
    reward: f64,
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> Result<LogMass> {
    let target = beta + lambda - reward;
    if ref_mass == 0.0 {
        return Ok(LogMass::Root((reward - lambda) / beta - 1.0));
    }
    // G(s) = α ref e^{-s} - β s - target, strictly decreasing in s.
    let g = |s: f64| alpha * ref_mass * (-s).exp() - beta * s - target;

    // Geometric expansion away from u = 1 until the sign of G changes.
    let (mut lo, mut hi) = if g(0.0) > 0.0 {
        let (mut prev, mut step) = (0.0, 1.0);
        loop {
            if g(step) <= 0.0 {
                break (prev, step);
            }
            if step >= LOG_MASS_LIMIT {
                return Ok(LogMass::Above);
            }
            prev = step;
            step *= 2.0;
        }
    } else {
        let (mut prev, mut step) = (0.0, 1.0);
        loop {
            if g(-step) >= 0.0 {
                break (-step, prev);
            }
            if step >= LOG_MASS_LIMIT {
                return Ok(LogMass::Below);
            }
            prev = -step;
            step *= 2.0;
        }
    };

    for _ in 0..MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid);
        if gm == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if gm > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let residual = |s: f64| (stationarity_lhs(ref_mass, alpha, beta, s.exp()) - target).abs();
    let (best, best_res) = [lo, hi]
        .into_iter()
        .map(|s| (s, residual(s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("two candidates");
    if best_res <= TOKEN_RESIDUAL_TOL {
        Ok(LogMass::Root(best))
    } else {
        Err(Error::NoConvergence {
            lo: lo.exp(),
            hi: hi.exp(),
            residual: best_res,
        })
    }
}

/// Unconstrained stationary mass `u⋆` of one outcome at multiplier `lambda`.
///
/// Off the reference support this is `e^{(r - λ)/β - 1}`; on it, the root of
/// `α ref/u - β ln u = β + λ - r` found by bisection on `ln u`.
pub fn solve_token_mass(
    ref_mass: f64,
    reward: f64,
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "the forward-KL solver needs beta > 0, got {beta}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if !(ref_mass >= 0.0) || !ref_mass.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "reference mass must be non-negative, got {ref_mass}"
        )));
    }
    match solve_log_mass(ref_mass, reward, alpha, beta, lambda)? {
        LogMass::Root(s) => Ok(s.exp()),
        LogMass::Above => Err(Error::NoConvergence {
            lo: LOG_MASS_LIMIT.exp(),
            hi: f64::INFINITY,
            residual: f64::INFINITY,
        }),
        LogMass::Below => Err(Error::NoConvergence {
            lo: 0.0,
            hi: (-LOG_MASS_LIMIT).exp(),
            residual: f64::INFINITY,
        }),
    }
}

/// `S(λ) = Σ u_i(λ)` and the individual masses.
fn total_mass(
    reference: &[f64],
    rewards: &[f64],
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut masses = Vec::with_capacity(reference.len());
    for (&q, &r) in reference.iter().zip(rewards) {
        let u = match solve_log_mass(q, r, alpha, beta, lambda)? {
            LogMass::Root(s) => s.exp(),
            LogMass::Above => f64::INFINITY,
            LogMass::Below => 0.0,
        };
        masses.push(u);
    }
    Ok((masses.iter().sum(), masses))
}

/// Forward-KL + entropy optimum via nested root finding on the masses and
/// the multiplier.
pub fn prop1_optimum(
    reference: &CategoricalPolicy,
    rewards: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<LagrangeSolution> {
    RegularizationParams::new(alpha, beta)?;
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(
            "the forward-KL solver needs beta > 0".into(),
        ));
    }
    check_rewards(reference, rewards)?;
    let q = reference.probs();
    let s = |lambda: f64| total_mass(q, rewards, alpha, beta, lambda);

    let (s0, m0) = s(0.0)?;
    let (mut lo, mut hi) = if s0 > 1.0 {
        let mut step = 1.0;
        let mut prev = 0.0;
        let mut found = None;
        for _ in 0..MAX_LAMBDA_DOUBLINGS {
            if s(step)?.0 < 1.0 {
                found = Some((prev, step));
                break;
            }
            prev = step;
            step *= 2.0;
        }
        found.ok_or_else(|| Error::BracketFailure(format!("S(λ) > 1 up to λ = {step}")))?
    } else if s0 < 1.0 {
        let mut step = 1.0;
        let mut prev = 0.0;
        let mut found = None;
        for _ in 0..MAX_LAMBDA_DOUBLINGS {
            if s(-step)?.0 > 1.0 {
                found = Some((-step, prev));
                break;
            }
            prev = -step;
            step *= 2.0;
        }
        found.ok_or_else(|| Error::BracketFailure(format!("S(λ) < 1 down to λ = -{step}")))?
    } else {
        return finish(0.0, m0);
    };

    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for _ in 0..MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        let (sm, masses) = s(mid)?;
        let res = (sm - 1.0).abs();
        if best.as_ref().is_none_or(|b| res < b.1) {
            best = Some((mid, res, masses));
        }
        if res <= MASS_RESIDUAL_TOL || mid <= lo || mid >= hi {
            break;
        }
        if sm > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (lambda, _, masses) = best.expect("at least one bisection step");
    finish(lambda, masses)
}

fn finish(lambda: f64, masses: Vec<f64>) -> Result<LagrangeSolution> {
    let total: f64 = masses.iter().sum();
    let residual = (total - 1.0).abs();
    if !(residual <= SOLUTION_RESIDUAL_MAX) {
        return Err(Error::BracketFailure(format!(
            "multiplier search ended with |Σu - 1| = {residual:e}"
        )));
    }
    Ok(LagrangeSolution {
        policy: CategoricalPolicy::from_weights(masses)?,
        lambda,
        residual,
    })
}
