//! Deterministic seed derivation.
//!
//! Every random draw in the system flows from a named root seed through
//! [`derive_seed`], so independent purposes (batch selection, anchor
//! sampling, scene layout, ...) consume independent streams. Skipping one
//! purpose entirely never perturbs another, which is what makes the
//! zero-weight reduction and kill-resume guarantees hold bitwise.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a root seed with a purpose tag and an index into a fresh seed.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix(root ^ fnv1a(tag.as_bytes()) ^ splitmix(index))
}

/// ChaCha stream for a (root, tag, index) triple.
pub fn rng_for(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, index))
}

/// Minibatch indices: without replacement when the pool is large enough,
/// with replacement otherwise.
pub fn sample_batch_indices(rng: &mut ChaCha8Rng, pool: usize, batch: usize) -> Vec<usize> {
    use rand::Rng;
    assert!(pool > 0, "empty pool");
    if pool >= batch {
        rand::seq::index::sample(rng, pool, batch).into_iter().collect()
    } else {
        (0..batch).map(|_| rng.random_range(0..pool)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_separates_streams() {
        let a = derive_seed(7, "batch", 3);
        let b = derive_seed(7, "batch", 3);
        assert_eq!(a, b);
        assert_ne!(derive_seed(7, "batch", 3), derive_seed(7, "anchors", 3));
        assert_ne!(derive_seed(7, "batch", 3), derive_seed(7, "batch", 4));
        assert_ne!(derive_seed(7, "batch", 3), derive_seed(8, "batch", 3));
    }

    #[test]
    fn rng_streams_reproduce() {
        let mut r1 = rng_for(42, "x", 0);
        let mut r2 = rng_for(42, "x", 0);
        for _ in 0..16 {
            assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        }
    }
}
