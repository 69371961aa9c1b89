//! End-to-end workflows behind the command-line tool: synthetic data,
//! preprocessing, training, evaluation and trace summaries.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod manifest;
pub mod synth;
pub mod trace;
pub mod train;

pub use config::{Config, SynthConfig, TrainConfig};

/// Independent seed for `(stream, index)` under a master seed (SplitMix64
/// finalizer over the combined words).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
