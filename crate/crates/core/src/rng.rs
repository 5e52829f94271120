//! Deterministic, seekable random streams.
//!
//! Every draw in the system comes from an [`RngStream`] identified by a
//! `(seed, stream id)` pair. The generator is ChaCha8 in counter mode, so
//! a stream can be positioned at any draw counter and yields the same
//! sequence on every platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// What a stream is used for. Each purpose gets disjoint stream ids so that
/// tie-breaks, agent decisions and imputed defaults never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamKey {
    /// Restaurant tie-breaks for one replication.
    TieBreak { replication: u64 },
    /// Initialisation and decisions of one agent in one replication.
    Agent { replication: u64, agent: u64 },
    /// Imputed choices for silent human participants.
    TimeoutDefault { replication: u64, agent: u64 },
}

impl StreamKey {
    pub fn stream_id(self) -> u64 {
        let (tag, replication, agent) = match self {
            StreamKey::TieBreak { replication } => (1, replication, 0),
            StreamKey::Agent { replication, agent } => (2, replication, agent),
            StreamKey::TimeoutDefault { replication, agent } => (3, replication, agent),
        };
        splitmix64(splitmix64(splitmix64(tag) ^ replication) ^ agent)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Position of a stream: enough to reconstruct it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub seed: u64,
    pub stream: u64,
    pub counter: u128,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        Self::with_stream_id(seed, key.stream_id())
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn at(position: RngPosition) -> Self {
        let mut rng = Self::with_stream_id(position.seed, position.stream);
        rng.inner.set_word_pos(position.counter);
        rng
    }

    pub fn position(&self) -> RngPosition {
        RngPosition {
            seed: self.seed,
            stream: self.inner.get_stream(),
            counter: self.inner.get_word_pos(),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)`, unbiased (Lemire's multiply-and-reject).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        loop {
            let wide = u128::from(self.next_u64()) * u128::from(n);
            let low = wide as u64;
            if low < n {
                let threshold = n.wrapping_neg() % n;
                if low < threshold {
                    continue;
                }
            }
            return (wide >> 64) as usize;
        }
    }

    /// Uniform float in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Index sampled with probability proportional to `weights`.
    /// Weights must be non-negative with a positive, finite sum.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0 && total.is_finite());
        let target = self.unit() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        // rounding at the top end; fall back to the last positive weight
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}
