//! Deterministic seed derivation.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream whose key
//! is derived from a master seed plus a path of integer labels (experiment,
//! replication, sample size, ...). Record-level draws use the record index as
//! the ChaCha stream id, so the output of a simulation does not depend on how
//! records are scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `labels` into `master`, producing an independent child seed.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(master), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

/// Generator for a whole task (a replication, a training run, ...).
pub fn task_rng(master: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, labels))
}

/// Generator dedicated to one record: same key for the whole dataset, the
/// record index selects the stream.
pub fn record_rng(dataset_seed: u64, record: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(record);
    rng
}

/// Stable labels for string tags (experiment kinds, method names).
pub fn label(tag: &str) -> u64 {
    // FNV-1a, only used to turn fixed identifiers into seed labels.
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_deterministic_and_label_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn record_streams_differ() {
        let a: u64 = record_rng(3, 0).random();
        let b: u64 = record_rng(3, 1).random();
        let a2: u64 = record_rng(3, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}
