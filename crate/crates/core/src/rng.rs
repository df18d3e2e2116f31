//! Seeded random streams.
//!
//! Every run derives its randomness from a single root seed. Each consumer
//! draws from its own ChaCha stream so that, for example, changing the noise
//! draws leaves the network initialization untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Noise,
    Svgd,
    Eval,
    Labels,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Noise => 3,
            Stream::Svgd => 4,
            Stream::Eval => 5,
            Stream::Labels => 6,
        }
    }
}

pub fn substream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
