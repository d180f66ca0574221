//! Per-purpose random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Data,
    InitEncoder,
    InitDecoder,
    InitLatent,
    Shuffle,
}

impl Purpose {
    fn stream(self) -> u64 {
        match self {
            Purpose::Data => 1,
            Purpose::InitEncoder => 2,
            Purpose::InitDecoder => 3,
            Purpose::InitLatent => 4,
            Purpose::Shuffle => 5,
        }
    }
}

/// Independent ChaCha stream for `purpose` under `seed`.
pub fn rng_for(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.stream());
    rng
}
