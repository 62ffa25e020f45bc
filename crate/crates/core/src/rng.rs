//! Reproducible random streams.
//!
//! Every sampler in the crate draws from an [`RngHandle`]: a ChaCha8 generator
//! keyed by a 64-bit seed and a 64-bit stream id. Parallel chains get their
//! own handle via [`RngHandle::split`], so results do not depend on thread
//! scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct RngHandle {
    seed: u64,
    stream: u64,
    splits: u64,
    inner: ChaCha8Rng,
}

impl RngHandle {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            splits: 0,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derive an independent child stream. The child depends only on this
    /// handle's (seed, stream) and on how many children were split before it.
    pub fn split(&mut self) -> RngHandle {
        self.splits += 1;
        let child = splitmix64(self.stream ^ splitmix64(self.splits));
        RngHandle::with_stream(self.seed, child)
    }

    /// Child stream `k`, independent of how many splits have happened.
    pub fn child(&self, k: u64) -> RngHandle {
        RngHandle::with_stream(self.seed, splitmix64(self.stream ^ splitmix64(k.wrapping_add(1) << 32)))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngCore for RngHandle {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
