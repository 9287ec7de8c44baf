//! Seed derivation. Every stochastic component receives its own stream
//! derived from the master seed, so adding a consumer never perturbs the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `stream` under `parent`. Paths compose: `derive(derive(s, a), b)`.
pub fn derive(parent: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named stream tags, kept distinct so streams never collide by accident.
pub mod stream {
    pub const BASE_INIT: u64 = 1;
    pub const BASE_SHUFFLE: u64 = 2;
    pub const ANCHORS: u64 = 3;
    pub const INVERSION: u64 = 4;
    pub const TRIAL: u64 = 5;
    pub const FEW_SHOT: u64 = 6;
    pub const CLASS_INIT: u64 = 7;
    pub const REAL_MEMORY: u64 = 8;
    pub const SYNTH: u64 = 9;
    pub const LABEL_INVERSION: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // first outputs of the reference generator seeded with 0
        let mut state = 0u64;
        let mut next = || {
            let out = splitmix64(state);
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            out
        };
        assert_eq!(next(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(next(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn streams_differ() {
        assert_ne!(derive(5, 1), derive(5, 2));
        assert_ne!(derive(5, 1), derive(6, 1));
        assert_eq!(derive(5, 1), derive(5, 1));
    }
}
