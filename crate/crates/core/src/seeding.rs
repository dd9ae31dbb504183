//! Derivation of every random stream from a single master seed.
//!
//! Each consumer gets its own ChaCha8 stream keyed by the master seed. The
//! stream id is a fixed offset, so adding a consumer never perturbs another.
//! Per-episode environment streams fold the episode index into the high bits
//! of the stream id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Fixed stream offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Env = 1,
    Params = 2,
    Noise = 3,
    Representation = 4,
    Goal = 5,
    Module = 6,
    Dataset = 7,
}

pub fn stream(master: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(which as u64);
    rng
}

/// Stream for the environment dynamics of one episode (0-based index).
pub fn episode_stream(master: u64, episode: usize) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((episode as u64 + 1) << 8) | Stream::Env as u64);
    rng
}
