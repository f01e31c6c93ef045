//! Counter-based splittable random source.
//!
//! Each [`Rng`] is a ChaCha8 keystream. The 256-bit key is the SplitMix64
//! expansion of `root_seed` (four successive outputs, little-endian), the
//! 64-bit ChaCha stream number is `stream_id`, and draws consume the
//! keystream in order, so `(root_seed, stream_id, counter)` fully determines
//! every value. Child streams are keyed by hashing a label into the parent's
//! stream id (FNV-1a), which makes them independent of how much the parent
//! has already been consumed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct Rng {
    root_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

/// Position of an [`Rng`] in its keystream, enough to replay draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPosition {
    pub root_seed: u64,
    pub stream_id: u64,
    pub word_pos: u128,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(seed: u64, label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl Rng {
    pub fn new(root_seed: u64) -> Self {
        Self::with_stream(root_seed, 0)
    }

    pub fn with_stream(root_seed: u64, stream_id: u64) -> Self {
        let mut state = root_seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream_id);
        Rng {
            root_seed,
            stream_id,
            inner,
        }
    }

    /// Independent child stream named by `label`.
    pub fn fork(&self, label: &str) -> Rng {
        Rng::with_stream(self.root_seed, fnv1a(self.stream_id, label))
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn position(&self) -> RngPosition {
        RngPosition {
            root_seed: self.root_seed,
            stream_id: self.stream_id,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn at_position(pos: RngPosition) -> Rng {
        let mut r = Rng::with_stream(pos.root_seed, pos.stream_id);
        r.inner.set_word_pos(pos.word_pos);
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
