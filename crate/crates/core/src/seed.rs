//! Named random substreams derived from one root seed.
//!
//! A substream is a ChaCha20 generator seeded with
//! `SHA-256(root_seed as little-endian u64 || name)`. The shuffle below
//! only uses `next_u64`, so plans do not depend on `rand`'s internal
//! sampling algorithms.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub fn substream(root: u64, name: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Uniform integer in `[0, n)` by multiply-shift.
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

/// Uniform double in `[0, 1)` from the top 53 bits.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fisher–Yates, last element first.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_named_and_reproducible() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(substream(7, "split"), |r, _| Some(r.next_u64())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(substream(7, "split"), |r, _| Some(r.next_u64())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(substream(7, "bootstrap"), |r, _| Some(r.next_u64())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<u32> = (0..100).collect();
        shuffle(&mut v, &mut substream(1, "x"));
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
        assert_ne!(v, s);
    }

    #[test]
    fn unit_interval() {
        let mut r = substream(3, "u");
        for _ in 0..1000 {
            let x = unit_f64(&mut r);
            assert!((0.0..1.0).contains(&x));
            assert!(below(&mut r, 5) < 5);
        }
    }
}
