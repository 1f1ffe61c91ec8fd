//! Seed derivation. Every random stream in the crate is a ChaCha generator
//! keyed by a tuple of integers, so results never depend on call order or
//! thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a tuple of integers into a single 64-bit seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

/// 64-bit FNV-1a. Stable across platforms and compiler versions, unlike
/// `std::hash::DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn normal_f64(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal_f32(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Whether `SRC_GAUDIO_DETERMINISTIC=1` is set.
pub fn deterministic_mode() -> bool {
    std::env::var("SRC_GAUDIO_DETERMINISTIC")
        .map(|v| v == "1")
        .unwrap_or(false)
}

/// Serializes all parallel work: sets `RAYON_NUM_THREADS=1` and builds a
/// one-thread global pool. Later calls are no-ops.
pub fn enable_deterministic_mode() {
    std::env::set_var("RAYON_NUM_THREADS", "1");
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
}

/// Dataset indices for training step `step`: consecutive batches walk a
/// fresh permutation of `0..n` per epoch, the permutation keyed by `(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch_size {
        let pos = step * batch_size + j;
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_for(&[seed, epoch as u64, 0xB47C]));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
    }
    out
}
