//! Small shared helpers: deterministic seed derivation and sinusoidal features.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step. Stable across platforms; used to derive sub-seeds.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a base seed and a list of tags (step, index, ...).
pub fn subseed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x6a09e667f3bcc908);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    s
}

/// Deterministic RNG for a (seed, tags) pair.
pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(base, tags))
}

/// FNV-1a 64-bit hash; used for the fixed text-token table lookup.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Sinusoidal embedding of a scalar into `dim` features (dim even).
/// Frequencies are geometric between 1 and 1/10000, transformer style.
pub fn sinusoid_embed(value: f64, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "sinusoid dim must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (10_000f64).powf(-(k as f64) / half as f64);
        out.push((value * freq).sin());
        out.push((value * freq).cos());
    }
    out
}

/// Sinusoidal encoding of a 3d position: per-coordinate embeddings concatenated.
pub fn sinusoid_embed_3d(p: [f64; 3], dim_per_coord: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * dim_per_coord);
    for c in p {
        out.extend(sinusoid_embed(c, dim_per_coord));
    }
    out
}

/// `count` integers spread uniformly (rounded) over [lo, hi] inclusive.
pub fn rounded_linspace(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    assert!(count >= 1);
    if count == 1 {
        return vec![hi];
    }
    (0..count)
        .map(|i| {
            let f = lo as f64 + (hi as f64 - lo as f64) * i as f64 / (count - 1) as f64;
            f.round() as usize
        })
        .collect()
}
