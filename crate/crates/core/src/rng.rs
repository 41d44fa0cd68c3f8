//! Seed derivation. Every random draw in a run comes from a stream keyed by
//! `(master seed, purpose, client, round)`, so results do not depend on the
//! order in which clients are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    DomainSpec = 2,
    Data = 3,
    Probe = 4,
    Train = 5,
    Holdout = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, purpose: Purpose, client: usize, round: usize) -> u64 {
    let mut h = splitmix(master);
    for part in [purpose as u64, client as u64, round as u64] {
        h = splitmix(h ^ part);
    }
    h
}

pub fn stream(master: u64, purpose: Purpose, client: usize, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, client, round))
}
