//! Counter-based random streams.
//!
//! Each unit of work gets its own generator, keyed by the master seed and the
//! unit's coordinates, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash for string identifiers.
pub fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Folds a sequence of words into one seed.
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    words.iter().fold(mix(seed), |acc, &w| mix(acc ^ mix(w)))
}

/// Keys of one work unit. `purpose` separates independent consumers that
/// share the same coordinates (augmentation, backend noise, manual prompts).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey<'a> {
    pub master: u64,
    pub case: &'a str,
    pub organ: &'a str,
    pub slice: u64,
    pub purpose: Purpose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Augment = 1,
    Backend = 2,
    ManualPrompt = 3,
    AutoPrompt = 4,
    Phantom = 5,
}

impl StreamKey<'_> {
    pub fn seed(&self) -> u64 {
        derive_seed(
            self.master,
            &[
                hash_label(self.case),
                hash_label(self.organ),
                self.slice,
                self.purpose as u64,
            ],
        )
    }
}

/// Generator for item `index` of the stream rooted at `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index]))
}
