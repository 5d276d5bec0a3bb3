//! Reward-aware reweighting of a reference policy.
//!
//! The reweighted reference raises each reference probability to a
//! reward-dependent exponent `φ(r) ∈ [0, 1]` and renormalizes:
//! `q̃_i = ref_i^{φ(r_i)} / Z`. Low rewards get exponents nearer zero, which
//! flattens the reference there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::CategoricalPolicy;

/// Default `τ_max` of the inverse-proportional family.
pub const DEFAULT_TAU_MAX: f64 = 2.2;

/// A reweight function `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawReweightSpec")]
pub enum ReweightSpec {
    /// `φ(r) = 1`: the reference is left untouched.
    Identity,
    /// `φ(r) = 1 / (τ_max - r)`.
    InverseProportional { tau_max: f64 },
    /// `φ(r) = (1 + tanh r) / 2`.
    Tanh,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum ReweightKind {
    Identity,
    InverseProportional,
    Tanh,
}

/// Flat wire form of [`ReweightSpec`].
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReweightSpec {
    kind: ReweightKind,
    tau_max: Option<f64>,
}

impl TryFrom<RawReweightSpec> for ReweightSpec {
    type Error = String;

    fn try_from(raw: RawReweightSpec) -> std::result::Result<Self, String> {
        match (raw.kind, raw.tau_max) {
            (ReweightKind::Identity, None) => Ok(Self::Identity),
            (ReweightKind::Tanh, None) => Ok(Self::Tanh),
            (ReweightKind::InverseProportional, Some(tau_max)) => {
                Ok(Self::InverseProportional { tau_max })
            }
            (ReweightKind::InverseProportional, None) => {
                Err("inverse_proportional requires tau_max".into())
            }
            (_, Some(_)) => Err("tau_max is only valid for inverse_proportional".into()),
        }
    }
}

impl Default for ReweightSpec {
    fn default() -> Self {
        Self::InverseProportional {
            tau_max: DEFAULT_TAU_MAX,
        }
    }
}

impl ReweightSpec {
    pub fn phi(&self, reward: f64) -> Result<f64> {
        phi(*self, reward)
    }

    /// Checks that `φ` is finite and inside `[0, 1]` on every reward.
    pub fn validate_for(&self, rewards: &[f64]) -> Result<()> {
        for &r in rewards {
            let w = self.phi(r)?;
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidArgument(format!(
                    "φ({r}) = {w} lies outside [0, 1] for {self:?}"
                )));
            }
        }
        Ok(())
    }

    /// Short label used in tabular output.
    pub fn label(&self) -> String {
        match self {
            Self::Identity => "identity".into(),
            Self::InverseProportional { tau_max } => format!("inverse_proportional({tau_max})"),
            Self::Tanh => "tanh".into(),
        }
    }
}

pub fn phi(spec: ReweightSpec, reward: f64) -> Result<f64> {
    match spec {
        ReweightSpec::Identity => Ok(1.0),
        ReweightSpec::InverseProportional { tau_max } => {
            if !(reward < tau_max) {
                return Err(Error::InvalidArgument(format!(
                    "reward {reward} must be below tau_max {tau_max}"
                )));
            }
            Ok(1.0 / (tau_max - reward))
        }
        ReweightSpec::Tanh => Ok((1.0 + reward.tanh()) / 2.0),
    }
}

/// `q̃_i = ref_i^{φ(r_i)} / Σ_j ref_j^{φ(r_j)}` with `0^w = 0` for `w > 0`.
///
/// The identity spec returns the reference unchanged, bit for bit.
pub fn reweight_reference(
    reference: &CategoricalPolicy,
    rewards: &[f64],
    spec: ReweightSpec,
) -> Result<CategoricalPolicy> {
    if rewards.len() != reference.len() {
        return Err(Error::SizeMismatch {
            expected: reference.len(),
            actual: rewards.len(),
        });
    }
    if spec == ReweightSpec::Identity {
        return Ok(reference.clone());
    }
    let exponents = rewards
        .iter()
        .map(|&r| spec.phi(r))
        .collect::<Result<Vec<_>>>()?;
    reweight_with_exponents(reference, &exponents)
}

/// `ref_i^{w_i}` renormalized, for explicit exponents.
pub fn reweight_with_exponents(
    reference: &CategoricalPolicy,
    exponents: &[f64],
) -> Result<CategoricalPolicy> {
    if exponents.len() != reference.len() {
        return Err(Error::SizeMismatch {
            expected: reference.len(),
            actual: exponents.len(),
        });
    }
    let mut weights = Vec::with_capacity(exponents.len());
    for (i, (&q, &w)) in reference.probs().iter().zip(exponents).enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "exponent {w} at outcome {i} must be finite and non-negative"
            )));
        }
        if q == 0.0 {
            if w == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "0^0 at outcome {i}: zero reference mass with zero exponent"
                )));
            }
            weights.push(0.0);
        } else {
            weights.push(q.powf(w));
        }
    }
    CategoricalPolicy::from_weights(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pol(v: &[f64]) -> CategoricalPolicy {
        CategoricalPolicy::new(v.to_vec()).unwrap()
    }

    #[test]
    fn phi_examples() {
        let inv = ReweightSpec::default();
        assert!((inv.phi(0.0).unwrap() - 1.0 / 2.2).abs() < 1e-15);
        assert!((inv.phi(0.0).unwrap() - 0.454545).abs() < 1e-6);
        assert!((inv.phi(1.0).unwrap() - 1.0 / 1.2).abs() < 1e-15);
        assert!((inv.phi(1.0).unwrap() - 0.833333).abs() < 1e-6);
        assert!(inv.phi(2.2).is_err());
        assert!(inv.phi(3.0).is_err());
        assert_eq!(ReweightSpec::Tanh.phi(0.0).unwrap(), 0.5);
        assert_eq!(ReweightSpec::Identity.phi(-42.0).unwrap(), 1.0);
    }

    #[test]
    fn phi_range_validation() {
        let inv = ReweightSpec::default();
        assert!(inv.validate_for(&[0.0, 0.5, 1.0]).is_ok());
        // 1/(2.2 - 1.5) > 1
        assert!(inv.validate_for(&[1.5]).is_err());
        assert!(ReweightSpec::Tanh.validate_for(&[-50.0, 50.0]).is_ok());
    }

    #[test]
    fn identity_is_bitwise() {
        let q = pol(&[0.1, 0.2, 0.30000000000000004, 0.39999999999999997]);
        let out = reweight_reference(&q, &[0.0, 1.0, 0.5, 0.2], ReweightSpec::Identity).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn constant_exponent_square_root() {
        let q = pol(&[0.64, 0.36]);
        let out = reweight_with_exponents(&q, &[0.5, 0.5]).unwrap();
        assert!((out.probs()[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((out.probs()[1] - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn tanh_flattens_low_reward_more() {
        let q = pol(&[0.8, 0.2]);
        let out = reweight_reference(&q, &[1.0, 0.0], ReweightSpec::Tanh).unwrap();
        let w0 = (1.0 + 1f64.tanh()) / 2.0;
        let z = 0.8f64.powf(w0) + 0.2f64.powf(0.5);
        assert!((out.probs()[0] - 0.8f64.powf(w0) / z).abs() < 1e-15);
        assert!(out.probs()[1] / 0.2 > out.probs()[0] / 0.8);
    }

    #[test]
    fn zero_mass_conventions() {
        let q = pol(&[0.0, 0.5, 0.5]);
        let out = reweight_with_exponents(&q, &[0.3, 0.5, 0.5]).unwrap();
        assert_eq!(out.probs()[0], 0.0);
        assert!(reweight_with_exponents(&q, &[0.0, 0.5, 0.5]).is_err());
        assert!(reweight_reference(&q, &[0.0, 1.0], ReweightSpec::Tanh).is_err());
    }

    #[test]
    fn config_shape() {
        let spec: ReweightSpec =
            serde_json::from_str(r#"{"kind": "inverse_proportional", "tau_max": 2.2}"#).unwrap();
        assert_eq!(spec, ReweightSpec::default());
        let spec: ReweightSpec = serde_json::from_str(r#"{"kind": "tanh"}"#).unwrap();
        assert_eq!(spec, ReweightSpec::Tanh);
        assert!(serde_json::from_str::<ReweightSpec>(r#"{"kind": "tanh", "tau_max": 1}"#).is_err());
    }

    fn spec_strategy() -> impl Strategy<Value = ReweightSpec> {
        prop_oneof![
            Just(ReweightSpec::Identity),
            Just(ReweightSpec::Tanh),
            (1.05f64..5.0).prop_map(|t| ReweightSpec::InverseProportional { tau_max: t + 1.0 }),
        ]
    }

    proptest! {
        #[test]
        fn phi_is_monotone(spec in spec_strategy(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(spec.phi(lo).unwrap() <= spec.phi(hi).unwrap());
        }

        #[test]
        fn support_is_preserved(
            w in prop::collection::vec(0.0f64..1.0, 2..20),
            r in prop::collection::vec(0.0f64..1.0, 20),
            spec in spec_strategy(),
        ) {
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let q = CategoricalPolicy::from_weights(w).unwrap();
            let out = reweight_reference(&q, &r[..q.len()], spec).unwrap();
            prop_assert_eq!(out.support(0.0), q.support(0.0));
        }

        #[test]
        fn higher_reward_keeps_no_larger_share_at_equal_mass(
            w in prop::collection::vec(0.01f64..1.0, 3..20),
            r in prop::collection::vec(0.0f64..1.0, 20),
            spec in spec_strategy(),
        ) {
            let mut w = w;
            w[1] = w[0];
            let q = CategoricalPolicy::from_weights(w).unwrap();
            let r = &r[..q.len()];
            let out = reweight_reference(&q, r, spec).unwrap();
            let (hi, lo) = if r[0] > r[1] { (0, 1) } else { (1, 0) };
            prop_assume!(r[hi] > r[lo]);
            prop_assert!(out.probs()[hi] <= out.probs()[lo] * (1.0 + 1e-12));
        }

        #[test]
        fn constant_exponent_does_not_lower_entropy(
            w in prop::collection::vec(0.0f64..1.0, 2..30),
            exponent in 0.01f64..0.99,
        ) {
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let q = CategoricalPolicy::from_weights(w).unwrap();
            let out = reweight_with_exponents(&q, &vec![exponent; q.len()]).unwrap();
            prop_assert!(out.entropy() >= q.entropy() - 1e-12);
        }
    }
}
