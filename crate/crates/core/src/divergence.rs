//! Exact KL divergences and the sampled k3 estimator of forward KL.
//!
//! Divergences that blow up are reported as `f64::INFINITY`, not as errors.

use crate::error::{Error, Result};
use crate::policy::CategoricalPolicy;

/// `D_KL(p ‖ q) = Σ p ln(p/q)`, with `0 ln(0/q) = 0`.
pub fn reverse_kl(p: &CategoricalPolicy, q: &CategoricalPolicy) -> Result<f64> {
    p.check_same_len(q)?;
    Ok(kl_slices(p.probs(), q.probs()))
}

/// `D_KL(ref ‖ p)`: the reference is the expectation measure.
pub fn forward_kl(reference: &CategoricalPolicy, p: &CategoricalPolicy) -> Result<f64> {
    reference.check_same_len(p)?;
    Ok(kl_slices(reference.probs(), p.probs()))
}

/// `Σ a ln(a/b)` over raw slices of equal length.
pub(crate) fn kl_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        if x > 0.0 {
            if y == 0.0 {
                return f64::INFINITY;
            }
            total += x * (x / y).ln();
        }
    }
    // Rounding can push an exact-zero divergence slightly negative.
    total.max(0.0)
}

/// `h(r) = r ln r - r + 1`, with `h(0) = 1`.
pub fn k3_term(ratio: f64) -> Result<f64> {
    if ratio.is_nan() || ratio < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "k3 ratio must be non-negative, got {ratio}"
        )));
    }
    Ok(k3_unchecked(ratio))
}

#[inline]
pub(crate) fn k3_unchecked(ratio: f64) -> f64 {
    if ratio == 0.0 {
        1.0
    } else {
        (ratio * ratio.ln() - ratio + 1.0).max(0.0)
    }
}

/// Mean of `h(ref_i / p_i)` over outcomes sampled from `p`.
pub fn k3_estimate(
    reference: &CategoricalPolicy,
    p: &CategoricalPolicy,
    sampled_outcomes: &[usize],
) -> Result<f64> {
    reference.check_same_len(p)?;
    if sampled_outcomes.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mut total = 0.0;
    for &i in sampled_outcomes {
        let pi = *p.probs().get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            count: p.len(),
        })?;
        if pi == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "outcome {i} was sampled but has zero probability"
            )));
        }
        total += k3_unchecked(reference.probs()[i] / pi);
    }
    Ok(total / sampled_outcomes.len() as f64)
}

/// `Σ_i p_i h(ref_i / p_i)`: the k3 estimator's expectation under `p`.
pub fn k3_expectation(reference: &CategoricalPolicy, p: &CategoricalPolicy) -> Result<f64> {
    reference.check_same_len(p)?;
    Ok(reference
        .probs()
        .iter()
        .zip(p.probs())
        .filter(|(_, &pi)| pi > 0.0)
        .map(|(&r, &pi)| pi * k3_unchecked(r / pi))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pol(v: &[f64]) -> CategoricalPolicy {
        CategoricalPolicy::new(v.to_vec()).unwrap()
    }

    #[test]
    fn reverse_examples() {
        let p = pol(&[0.75, 0.25]);
        assert_eq!(reverse_kl(&p, &p).unwrap(), 0.0);
        assert_eq!(
            reverse_kl(&pol(&[0.5, 0.5]), &pol(&[1.0, 0.0])).unwrap(),
            f64::INFINITY
        );
        let v = reverse_kl(&p, &pol(&[0.5, 0.5])).unwrap();
        assert!((v - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn forward_examples() {
        let p = pol(&[0.5, 0.5]);
        assert_eq!(forward_kl(&p, &p).unwrap(), 0.0);
        let v = forward_kl(&pol(&[1.0, 0.0]), &p).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(forward_kl(&p, &pol(&[1.0, 0.0])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn mismatched_sizes() {
        assert!(reverse_kl(&pol(&[1.0]), &pol(&[0.5, 0.5])).is_err());
        assert!(forward_kl(&pol(&[1.0]), &pol(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn k3_examples() {
        assert_eq!(k3_term(1.0).unwrap(), 0.0);
        assert_eq!(k3_term(0.0).unwrap(), 1.0);
        assert!((k3_term(1e-300).unwrap() - 1.0).abs() < 1e-12);
        assert!((k3_term(2.0).unwrap() - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((k3_term(2.0).unwrap() - 0.386294).abs() < 1e-6);
        assert!(k3_term(-0.1).is_err());
        assert!(k3_term(f64::NAN).is_err());
    }

    #[test]
    fn k3_is_bounded_near_zero() {
        for r in [1e-6, 1e-9, 1e-12, 1e-200] {
            assert!(k3_term(r).unwrap() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn k3_estimate_examples() {
        let p = pol(&[0.2, 0.3, 0.5]);
        let draws = p.sample(&mut ChaCha8Rng::seed_from_u64(3), 50);
        assert_eq!(k3_estimate(&p, &p, &draws).unwrap(), 0.0);

        let r = pol(&[0.0, 0.5, 0.5]);
        assert_eq!(k3_estimate(&r, &p, &[0]).unwrap(), 1.0);

        let zero = pol(&[0.0, 0.5, 0.5]);
        assert!(k3_estimate(&p, &zero, &[0]).is_err());
        assert!(k3_estimate(&p, &p, &[]).is_err());
        assert!(k3_estimate(&p, &p, &[7]).is_err());
    }

    fn weights_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..20)
    }

    proptest! {
        #[test]
        fn divergences_are_non_negative(a in weights_strategy(), b in weights_strategy()) {
            let n = a.len().min(b.len());
            prop_assume!(a[..n].iter().sum::<f64>() > 0.0 && b[..n].iter().sum::<f64>() > 0.0);
            let p = CategoricalPolicy::from_weights(a[..n].to_vec()).unwrap();
            let q = CategoricalPolicy::from_weights(b[..n].to_vec()).unwrap();
            prop_assert!(reverse_kl(&p, &q).unwrap() >= 0.0);
            prop_assert!(forward_kl(&p, &q).unwrap() >= 0.0);
            // same quantity with roles swapped
            prop_assert_eq!(forward_kl(&q, &p).unwrap(), reverse_kl(&q, &p).unwrap());
        }

        #[test]
        fn k3_expectation_equals_forward_kl(
            p_w in prop::collection::vec(0.01f64..1.0, 2..20),
            mask in prop::collection::vec(any::<bool>(), 20),
            r_w in prop::collection::vec(0.0f64..1.0, 20),
        ) {
            let n = p_w.len();
            let mut ref_w: Vec<f64> = (0..n).map(|i| if mask[i] { r_w[i] } else { 0.0 }).collect();
            if ref_w.iter().sum::<f64>() == 0.0 {
                ref_w[0] = 1.0;
            }
            let p = CategoricalPolicy::from_weights(p_w).unwrap();
            let r = CategoricalPolicy::from_weights(ref_w).unwrap();
            let exact = k3_expectation(&r, &p).unwrap();
            let fkl = forward_kl(&r, &p).unwrap();
            prop_assert!((exact - fkl).abs() < 1e-10, "{} vs {}", exact, fkl);
        }

        #[test]
        fn divergences_vanish_only_at_equality(
            w in prop::collection::vec(0.05f64..1.0, 2..20),
            bump in 1e-4f64..0.5,
            at in 0usize..20,
        ) {
            let p = CategoricalPolicy::from_weights(w.clone()).unwrap();
            prop_assert_eq!(reverse_kl(&p, &p).unwrap(), 0.0);
            prop_assert_eq!(forward_kl(&p, &p).unwrap(), 0.0);
            let mut v = w;
            let i = at % v.len();
            v[i] += bump;
            let q = CategoricalPolicy::from_weights(v).unwrap();
            prop_assert!(reverse_kl(&p, &q).unwrap() > 0.0);
            prop_assert!(forward_kl(&p, &q).unwrap() > 0.0);
        }
    }
}
