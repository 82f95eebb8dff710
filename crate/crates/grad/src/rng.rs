//! Seeded, counter-based random streams.
//!
//! Every stochastic component takes an explicit [`Rng`]. Independent streams
//! are derived from a 64-bit seed plus a stream index, so a run is
//! reproducible regardless of how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream `stream` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream index for a (purpose, a, b) triple, e.g. (rollout, iteration, episode).
pub fn stream_id(purpose: u16, a: u64, b: u64) -> u64 {
    ((purpose as u64) << 56) | ((a & 0xFFFF_FFFF) << 24) | (b & 0xFF_FFFF)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, 1).random()).collect();
        let b: Vec<u64> = (0..4).map(|_| stream(7, 1).random()).collect();
        assert_eq!(a, b);
        let mut s1 = stream(7, 1);
        let mut s2 = stream(7, 2);
        assert_ne!(s1.random::<u64>(), s2.random::<u64>());
    }

    #[test]
    fn stream_ids_do_not_collide_on_small_grids() {
        let mut seen = std::collections::HashSet::new();
        for p in 0..4 {
            for a in 0..200 {
                for b in 0..300 {
                    assert!(seen.insert(stream_id(p, a, b)));
                }
            }
        }
    }
}
