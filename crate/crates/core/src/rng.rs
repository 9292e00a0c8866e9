//! Counter-derived random streams.
//!
//! Every stream is keyed by `(master_seed, index, role)`, so results do not
//! depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream roles. Concrete and abstract systems share the driver roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    Brownian = 1,
    Poisson = 2,
    AbstractBrownian = 3,
    AbstractPoisson = 4,
    Sampling = 5,
    Inputs = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, index: u64, role: Role) -> u64 {
    let h = splitmix64(master);
    let h = splitmix64(h ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93));
    splitmix64(h ^ (role as u64).wrapping_mul(0xa076_1d64_78bd_642f))
}

pub fn stream(master: u64, index: u64, role: Role) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index, role))
}
