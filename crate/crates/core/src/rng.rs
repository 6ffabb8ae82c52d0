//! Addressable random streams.
//!
//! Every random draw in the crate comes from a [`Stream`]: a master seed plus
//! a path of integer or string labels, e.g. `(seed, task 3, iteration 7, unit
//! "unit2")`. The path is folded into the 64-bit stream id of a ChaCha8
//! generator keyed by the seed, so any sub-computation can be replayed in
//! isolation and results do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const ROOT: u64 = 0x6a09_e667_f3bc_c908;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Stream {
    seed: u64,
    path: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self { seed, path: ROOT }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Descends one level along an integer label.
    pub fn child(self, index: u64) -> Self {
        let path = splitmix64(self.path.rotate_left(17) ^ splitmix64(index));
        Self { path, ..self }
    }

    /// Descends one level along a string label (unit names, roles).
    pub fn child_str(self, label: &str) -> Self {
        self.child(fnv1a(label) ^ 0x5bd1_e995)
    }

    pub fn rng(&self) -> StreamRng {
        let mut key = [0u8; 32];
        let mut state = self.seed;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.path);
        rng
    }
}
