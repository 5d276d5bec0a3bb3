#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapo_core::policy::CategoricalPolicy;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reference with weights in `[0.05, 1)` (listed outcomes zeroed) and
/// rewards in `[0, 1)`.
pub fn instance<R: Rng>(
    rng: &mut R,
    outcomes: usize,
    zero: &[usize],
) -> (CategoricalPolicy, Vec<f64>) {
    let mut w: Vec<f64> = (0..outcomes).map(|_| rng.gen_range(0.05..1.0)).collect();
    for &i in zero {
        w[i] = 0.0;
    }
    let r = (0..outcomes).map(|_| rng.gen::<f64>()).collect();
    (CategoricalPolicy::from_weights(w).unwrap(), r)
}

/// Random zero set over `1..n`, each outcome with probability `p`.
pub fn random_zeros<R: Rng>(rng: &mut R, n: usize, p: f64) -> Vec<usize> {
    (1..n).filter(|_| rng.gen_bool(p)).collect()
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}
