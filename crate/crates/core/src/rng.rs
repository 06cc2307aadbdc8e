//! Seed derivation. Every random draw in the pipeline comes from a master
//! seed split into named substreams, and each substream hands out
//! counter-addressed ChaCha streams so results do not depend on which worker
//! processes which item.

use dxp_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        Self { seed: master }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by name.
    pub fn substream(&self, name: &str) -> SeedStream {
        let mut s = self.seed ^ fnv1a(name);
        SeedStream {
            seed: splitmix64(&mut s),
        }
    }

    /// Child stream identified by an index (chains, batch members, pairs).
    pub fn child(&self, index: u64) -> SeedStream {
        let mut s = self.seed ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93);
        SeedStream {
            seed: splitmix64(&mut s),
        }
    }

    /// ChaCha generator for item `index` of this stream.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

pub fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}
