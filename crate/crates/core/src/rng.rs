//! Counter-based random streams.
//!
//! A stream is identified by `(seed, stream)`; the k-th draw is a pure
//! function of `(seed, stream, k)`, so per-voxel streams give the same
//! numbers regardless of how voxels are scheduled across workers.
//! Not suitable for anything security related.

use rand_core::{impls, RngCore};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
#[inline(always)]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream key from a seed and up to two stream coordinates.
pub fn stream_key(seed: u64, stream: u64) -> u64 {
    mix64(mix64(seed ^ 0x005E_ED0F_F1CE) ^ stream.wrapping_mul(GOLDEN).rotate_left(17))
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
    spare: Option<u32>,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            key: stream_key(seed, stream),
            counter: 0,
            spare: None,
        }
    }

    /// Stream for one `(seed, stream, voxel)` triple.
    pub fn for_voxel(seed: u64, stream: u64, voxel: u64) -> Self {
        CounterRng {
            key: stream_key(stream_key(seed, stream), voxel),
            counter: 0,
            spare: None,
        }
    }

    /// The `k`-th 64-bit output of the stream, without advancing it.
    #[inline(always)]
    pub fn at(&self, k: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(k.wrapping_add(1).wrapping_mul(GOLDEN)),
        )
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// True with probability `p`, using 32 bits of resolution. `p >= 1` is
    /// always true and `p <= 0` always false.
    #[inline(always)]
    pub fn bernoulli32(&mut self, p: f64) -> bool {
        (self.next_u32() as f64) < p * 4_294_967_296.0
    }
}

impl RngCore for CounterRng {
    #[inline(always)]
    fn next_u32(&mut self) -> u32 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let x = self.next_u64();
        self.spare = Some((x >> 32) as u32);
        x as u32
    }

    #[inline(always)]
    fn next_u64(&mut self) -> u64 {
        let x = self.at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        x
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}
