//! Counter-based random streams.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(seed, role, index)`. Streams are independent of call order, so neither
//! thread scheduling nor resuming from a checkpoint can change sampled values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// What a stream is used for. Part of the stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamRole {
    Init = 1,
    Reset = 2,
    ActionNoise = 3,
    ModelBatch = 4,
    CriticBatch = 5,
    Eval = 6,
    Test = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream generator for `(seed, role, indices...)`.
pub fn stream(seed: u64, role: StreamRole, indices: &[u64]) -> ChaCha8Rng {
    let mut key = splitmix64(seed ^ splitmix64(role as u64));
    for &i in indices {
        key = splitmix64(key ^ splitmix64(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(key)
}

pub fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
