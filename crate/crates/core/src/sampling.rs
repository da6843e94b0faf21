//! Seeded categorical sampling and stream derivation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The random stream used throughout. ChaCha8 output is stable across
/// platforms and crate versions, which the determinism contract needs.
pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a sub-seed from a run seed and a fixed label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Draws an index from a nonnegative weight vector (need not be normalized).
///
/// Walks the cumulative sum in index order; zero-weight entries are never
/// returned. Returns `None` when the total is not positive.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
    }
    last
}

/// Same as [`sample_index`] for a normalized log-probability row.
pub fn sample_log_index<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> Option<usize> {
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
    sample_index(&probs, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_returns_zero_weight() {
        let mut rng = stream_rng(3);
        for _ in 0..1000 {
            let i = sample_index(&[0.0, 1.0, 0.0, 2.0, 0.0], &mut rng).unwrap();
            assert!(i == 1 || i == 3);
        }
        assert_eq!(sample_index(&[0.0, 0.0], &mut rng), None);
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(9, "generate"), derive_seed(9, "generate"));
    }
}
