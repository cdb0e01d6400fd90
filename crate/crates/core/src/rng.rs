//! Named random streams derived from a single experiment seed.
//!
//! Every stream is a ChaCha8 generator keyed by the experiment seed, with the
//! ChaCha stream id set to the 64-bit FNV-1a digest of the stream's path
//! (for example `"network/device/3/day/12"`). ChaCha8 is counter based, so
//! two streams never share state and adding a new named stream leaves every
//! existing stream's draws untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// A position in the stream hierarchy. Cheap to clone; turns into a
/// generator with [`Streams::rng`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
    path: String,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed, path: String::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    /// Child stream named `name`.
    pub fn child(&self, name: &str) -> Self {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.path, name)
        };
        Self { seed: self.seed, path }
    }

    /// Child stream named `name/index`, e.g. per-day or per-device.
    pub fn indexed(&self, name: &str, index: u64) -> Self {
        self.child(&format!("{name}/{index}"))
    }

    pub fn rng(&self) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a64(self.path.as_bytes()));
        rng
    }
}
