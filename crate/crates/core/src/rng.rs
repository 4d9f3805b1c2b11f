//! Named sub-seeds. Every random stream is derived from the top-level seed and
//! a label, so adding a consumer never shifts another consumer's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, label))
}
