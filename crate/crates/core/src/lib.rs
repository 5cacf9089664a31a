//! Time-enriched multimodal transformer for user-level classification of
//! post timelines.

pub mod attribution;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod sampling;
pub mod store;
pub mod synth;
pub mod temporal;
pub mod training;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic RNG stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
