//! Named random streams derived from a single root seed.
//!
//! Every consumer of randomness asks for a stream by purpose
//! (`"augment"`, `"reparam"`, `"time"`, `"noise"`, `"dropout"`, ...), so any
//! component can be re-run in isolation and still see the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// 64-bit seed for a named purpose.
    pub fn derive(&self, name: &str) -> u64 {
        splitmix64(self.root ^ splitmix64(fnv1a(name.as_bytes())))
    }

    /// Child splitter, for nesting purposes (e.g. per-step streams).
    pub fn sub(&self, name: &str) -> SeedStream {
        SeedStream { root: self.derive(name) }
    }

    /// Child splitter indexed by an integer (step, sample, ...).
    pub fn index(&self, i: u64) -> SeedStream {
        SeedStream { root: splitmix64(self.root ^ splitmix64(i.wrapping_add(0x5EED))) }
    }

    pub fn rng(&self, name: &str) -> StreamRng {
        StreamRng::seed_from_u64(self.derive(name))
    }
}
