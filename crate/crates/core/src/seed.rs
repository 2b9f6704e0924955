//! Deterministic derivation of independent RNG sub-stream seeds.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-stream `stream` of a run seeded with `seed`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub mod streams {
    pub const PHANTOM_NOISE: u64 = 1;
    pub const PHANTOM_MOTION: u64 = 2;
    pub const PHANTOM_DEFECTS: u64 = 3;
    pub const NLLS_STARTS: u64 = 8;
    pub const MCMC: u64 = 16;
}
