//! Seed splitting. Every random stream is seeded with
//! `derive_seed(master, stream, index)`, so shards of a dataset (or runs of
//! a sampler) can be regenerated independently of one another.

pub const STREAM_IDENTITY: u64 = 1;
pub const STREAM_IMAGE: u64 = 2;
pub const STREAM_CAMERA: u64 = 3;
pub const STREAM_OCCLUSION_PLAN: u64 = 4;
pub const STREAM_SAMPLER: u64 = 5;
pub const STREAM_AUGMENT: u64 = 6;
pub const STREAM_INIT: u64 = 7;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}
