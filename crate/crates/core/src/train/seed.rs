//! Process-wide seed and the independent random streams derived from it.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

static GLOBAL_SEED: AtomicU64 = AtomicU64::new(0);

/// Sets the seed every stochastic source derives from when not given one explicitly.
pub fn set_global_seed(seed: u64) {
    GLOBAL_SEED.store(seed, Ordering::SeqCst);
}

pub fn global_seed() -> u64 {
    GLOBAL_SEED.load(Ordering::SeqCst)
}

/// Named random sources. Each gets its own ChaCha8 stream of the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Noise = 2,
    Split = 3,
    Pairing = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Per-purpose seeds of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub run: u64,
    pub init: u64,
    pub split: u64,
    pub pairing: u64,
}

impl SeedPlan {
    pub fn new(run: u64) -> Self {
        use rand::Rng;
        Self {
            run,
            init: stream_rng(run, Stream::Init).random(),
            split: stream_rng(run, Stream::Split).random(),
            pairing: stream_rng(run, Stream::Pairing).random(),
        }
    }

    pub fn from_global() -> Self {
        Self::new(global_seed())
    }
}
