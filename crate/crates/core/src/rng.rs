//! Seeded random streams. Every consumer draws from a stream derived from
//! `(seed, epoch, purpose)`, so a run can resume at an epoch boundary
//! without storing generator state, and adding a consumer never shifts the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Alpha = 2,
    Split = 3,
    TrainOrder = 4,
    ValOrder = 5,
    TrainAugment = 6,
    ValAugment = 7,
    TrainMask = 8,
    ValMask = 9,
    Synthetic = 10,
    EvalOrder = 11,
    Genotype = 12,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, epoch: u64, purpose: Purpose) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch) ^ purpose as u64)
}

pub fn stream(seed: u64, epoch: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, purpose))
}
