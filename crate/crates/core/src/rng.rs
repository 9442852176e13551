//! Seed-stream derivation. Every random draw in the lab goes through a
//! ChaCha8 stream keyed by `(seed, stream)`, so episodes are independent and
//! reproducible regardless of the order in which they run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream used for the initial state of an episode. Shared by all policies,
/// so the same `(seed, episode)` always starts from the same arrangement.
pub fn episode_init(seed: u64, episode: u64) -> LabRng {
    stream(seed, 2 * episode)
}

/// Stream handed to stochastic policies for one episode.
pub fn episode_policy(seed: u64, episode: u64) -> LabRng {
    stream(seed, 2 * episode + 1)
}
