//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, purpose, index)`, so any port
//! that implements the three steps below reproduces the streams bit for bit:
//!
//! 1. `key = mix(mix(seed) ^ purpose_tag * GOLDEN)`
//! 2. `word(i) = mix(key + (i + 1) * GOLDEN)` (wrapping arithmetic), i.e. the
//!    i-th output of a SplitMix64 sequence started at `key`
//! 3. a standard normal draw `k` consumes words `2k` and `2k + 1`:
//!    `u1 = 1 - (word(2k) >> 11) * 2^-53`, `u2 = (word(2k + 1) >> 11) * 2^-53`,
//!    `z = sqrt(-2 ln u1) * cos(2 pi u2)`
//!
//! `mix` is the SplitMix64 finalizer. Uniform and integer draws consume a
//! single word each. A stream is a `(seed, purpose)` pair plus a cursor.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Dims, VideoTensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purpose {
    InitNoise,
    Training,
    Dataset,
    Sampling,
}

impl Purpose {
    pub fn tag(self) -> u64 {
        match self {
            Purpose::InitNoise => 1,
            Purpose::Training => 2,
            Purpose::Dataset => 3,
            Purpose::Sampling => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    purpose: Purpose,
    key: u64,
    cursor: u64,
}

impl RngStream {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            purpose,
            key: mix(mix(seed) ^ purpose.tag().wrapping_mul(GOLDEN)),
            cursor: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    /// Number of words consumed so far.
    pub fn position(&self) -> u64 {
        self.cursor
    }

    /// The `index`-th word of this stream, independent of the cursor.
    pub fn word_at(&self, index: u64) -> u64 {
        mix(self.key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// The `k`-th standard normal of this stream, independent of the cursor.
    pub fn gaussian_at(&self, k: u64) -> f64 {
        let u1 = 1.0 - to_unit(self.word_at(2 * k));
        let u2 = to_unit(self.word_at(2 * k + 1));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Child stream with the same purpose, keyed by `label`.
    pub fn fork(&self, label: u64) -> RngStream {
        RngStream::new(mix(self.key ^ mix(label.wrapping_add(GOLDEN))), self.purpose)
    }

    pub fn next_u64(&mut self) -> u64 {
        let w = self.word_at(self.cursor);
        self.cursor += 1;
        w
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        to_unit(self.next_u64())
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn gaussian(&mut self) -> f64 {
        // Keep gaussian draws aligned on even words.
        if self.cursor % 2 == 1 {
            self.cursor += 1;
        }
        let z = self.gaussian_at(self.cursor / 2);
        self.cursor += 2;
        z
    }

    /// Tensor of i.i.d. standard normals.
    pub fn gaussian_tensor(&mut self, dims: Dims) -> Result<VideoTensor> {
        let len = VideoTensor::zeros(dims)?.len();
        let data = (0..len).map(|_| self.gaussian() as f32).collect();
        VideoTensor::new(dims, data)
    }
}

#[inline]
fn to_unit(w: u64) -> f64 {
    (w >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Free-function form of [`RngStream::gaussian_tensor`].
pub fn gaussian(stream: &mut RngStream, dims: Dims) -> Result<VideoTensor> {
    stream.gaussian_tensor(dims)
}
