//! Named random substreams derived from one master seed.
//!
//! Every stochastic component draws from its own stream so that changing one
//! knob (say the APC error level) leaves the others (arrivals, routes)
//! untouched across paired runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        SeedStreams { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream keyed by a name and an arbitrary list of integers.
    pub fn stream(&self, name: &str, keys: &[u64]) -> StreamRng {
        let mut hasher = Sha256::new();
        hasher.update(self.master.to_le_bytes());
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        for k in keys {
            hasher.update(k.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    /// Cheap stateless 64-bit hash for per-event seeds on hot paths.
    pub fn mix(&self, name_tag: u64, a: u64, b: u64) -> u64 {
        let mut z = self.master ^ name_tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for v in [a, b] {
            z = splitmix64(z ^ v);
        }
        z
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
