//! Counter-keyed random streams.
//!
//! Every random quantity in the pipeline is drawn from a ChaCha stream keyed by
//! `(seed, purpose, index, sub_index)`, so results do not depend on evaluation
//! order or the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream purposes. Distinct tags keep otherwise identical keys apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    GrfRow = 1,
    Locations = 2,
    Init = 3,
    TrainNoise = 4,
    Shuffle = 5,
    PosteriorSample = 6,
    OutputNoise = 7,
    KlSample = 8,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns the generator for one key. `sub_index` selects the ChaCha stream.
pub fn keyed(seed: u64, purpose: Purpose, index: u64, sub_index: u64) -> ChaCha8Rng {
    let mut state = seed ^ (purpose as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let mut key = [0u8; 32];
    let mut mixed = splitmix64(&mut state) ^ index;
    for chunk in key.chunks_exact_mut(8) {
        mixed = splitmix64(&mut mixed);
        chunk.copy_from_slice(&mixed.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(sub_index);
    rng
}

pub fn fill_standard_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

pub fn standard_normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    fill_standard_normal(rng, &mut v);
    v
}
