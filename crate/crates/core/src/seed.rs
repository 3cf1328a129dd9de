//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a over the root seed and the stream name. Stable across platforms
/// and toolchains, unlike `std`'s hashers.
fn derive(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in root.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        SeedStream { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn rng(&self, name: &str) -> Rng {
        ChaCha8Rng::seed_from_u64(derive(self.root, name))
    }

    pub fn child(&self, name: &str) -> SeedStream {
        SeedStream::new(derive(self.root, name))
    }
}
