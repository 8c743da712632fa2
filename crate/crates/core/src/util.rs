//! Deterministic seed derivation and discrete sampling helpers.

use rand::RngCore;

/// SplitMix64 step; the standard finalizer used to decorrelate seeds.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a salt path, so that every
/// (replication, purpose) pair gets an independent, reproducible stream.
pub fn derive_seed(master: u64, salts: &[u64]) -> u64 {
    let mut state = master;
    let mut out = splitmix64(&mut state);
    for &salt in salts {
        state ^= salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        out ^= splitmix64(&mut state);
    }
    out
}

/// Uniform draw in `[0, 1)` from the high 53 bits of one RNG word.
pub fn uniform_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Samples an index from an (unnormalized is fine) nonnegative weight vector
/// by inverse-CDF scan; the last positive-weight index absorbs any leftover
/// mass from rounding.
pub fn sample_discrete<R: RngCore>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "sample_discrete needs positive total mass");
    let u = uniform_f64(rng) * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
