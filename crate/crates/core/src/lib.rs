//! Age estimation from label distributions with identity-aware contrastive
//! and triplet losses, built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod protocol;
pub mod sampler;
pub mod selfcheck;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derives an independent seed for a numbered sub-stream of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}
