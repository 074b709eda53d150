//! Seed derivation.
//!
//! Every random draw in the toolkit comes from a ChaCha8 stream whose seed is
//! derived from one master seed through named or indexed branches, so any
//! stage can be re-run in isolation and produce the same bits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// One round of the splitmix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Child seed for a named branch, e.g. `derive(master, "augment")`.
pub fn derive(parent: u64, label: &str) -> u64 {
    mix64(parent ^ mix64(fnv1a(label.as_bytes())))
}

/// Child seed for the `index`-th member of a family (epoch, sample, view...).
pub fn derive_index(parent: u64, index: u64) -> u64 {
    mix64(parent.wrapping_add(mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named sub-seeds expanded from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    pub master: u64,
    pub data: u64,
    pub augment: u64,
    pub init: u64,
    pub queue: u64,
    pub shuffle: u64,
    pub probe: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            data: derive(master, "data"),
            augment: derive(master, "augment"),
            init: derive(master, "init"),
            queue: derive(master, "queue"),
            shuffle: derive(master, "shuffle"),
            probe: derive(master, "probe"),
        }
    }
}
