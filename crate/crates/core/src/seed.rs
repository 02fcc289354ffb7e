//! Seed derivation. A single base seed fans out to independent per-stage
//! streams so each stage can be reproduced on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 output function.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Pipeline stages that draw randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Split,
    Encoder,
    Clustering,
    Classifier,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Data => 1,
            Stage::Split => 2,
            Stage::Encoder => 3,
            Stage::Clustering => 4,
            Stage::Classifier => 5,
        }
    }
}

pub fn derive(base: u64, stage: Stage) -> u64 {
    splitmix64(splitmix64(base) ^ stage.tag())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference generator seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn stages_get_distinct_seeds() {
        let seeds: Vec<u64> = [
            Stage::Data,
            Stage::Split,
            Stage::Encoder,
            Stage::Clustering,
            Stage::Classifier,
        ]
        .iter()
        .map(|&s| derive(7, s))
        .collect();
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(derive(7, Stage::Data), derive(7, Stage::Data));
    }
}
