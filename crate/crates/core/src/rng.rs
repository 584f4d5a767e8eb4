//! Seeded random streams. One user-facing seed fans out into independent
//! ChaCha streams, one per purpose, so that e.g. changing the shuffle
//! order never perturbs parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Synthetic = 3,
    Test = 4,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Stream::Init).random();
        let b: u64 = stream(7, Stream::Init).random();
        let c: u64 = stream(7, Stream::Shuffle).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
