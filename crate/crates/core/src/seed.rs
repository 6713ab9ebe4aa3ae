//! Seed derivation. Every random stream in the pipeline is a
//! xoshiro256++ generator seeded from `base ^ hash(task)`, so results do
//! not depend on the order in which tasks are scheduled.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a task identifier (a domain tag plus indices).
pub fn task_hash(tag: &str, indices: &[u64]) -> u64 {
    // FNV-1a over the tag, then splitmix over each index
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn derive_seed(base: u64, tag: &str, indices: &[u64]) -> u64 {
    base ^ task_hash(tag, indices)
}

pub fn task_rng(base: u64, tag: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tag, indices))
}
