use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser; gives independent-looking streams from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Named streams so that unrelated consumers never share random numbers.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const LTN_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DOWNSAMPLE: u64 = 4;
    pub const POOL: u64 = 5;
    pub const SYNTH: u64 = 6;
}
