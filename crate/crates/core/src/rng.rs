//! Seeded counter-based random streams.
//!
//! Every consumer of randomness gets its own [`CounterRng`], keyed by a seed
//! and a stream id. Data generation and acceptance decisions use different
//! stream ids, so swapping the policy never perturbs the input data.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Stream id used by the synthetic data generators.
pub const DATA_STREAM: u64 = 0;
/// Stream id used by the acceptance decisions.
pub const DECISION_STREAM: u64 = 1;

const F64_UNIT: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct CounterRng {
    inner: ChaCha8Rng,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * F64_UNIT
    }

    /// Uniform on `(0, 1]`, safe to take the logarithm of.
    pub fn uniform_open_low(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * F64_UNIT
    }

    /// Number of 64-bit words consumed so far.
    pub fn word_pos(&self) -> u128 {
        // ChaCha emits 32-bit words; two per `next_u64`.
        self.inner.get_word_pos() / 2
    }
}

/// Seeds for one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngConfig {
    pub decision_seed: u64,
    pub stream_seed: u64,
}

impl RngConfig {
    pub fn decision_rng(&self) -> CounterRng {
        CounterRng::new(self.decision_seed, DECISION_STREAM)
    }

    pub fn stream_rng(&self) -> CounterRng {
        CounterRng::new(self.stream_seed, DATA_STREAM)
    }
}
