//! Named, seeded random streams. Every stochastic component derives its own
//! generator from `(seed, tag, index)` so runs are bit-reproducible and
//! independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn stream(seed: u64, tag: &str, index: u64) -> SimRng {
    let key = splitmix64(splitmix64(seed) ^ tag_hash(tag))
        ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D));
    ChaCha8Rng::seed_from_u64(key)
}

/// Picks an index with probability proportional to `weights[i]` by
/// inverting the cumulative weight. Returns `None` when the slice is empty.
pub fn weighted_pick<R: rand::Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Option<usize> {
    if weights.is_empty() {
        return None;
    }
    if weights.len() == 1 {
        return Some(0);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        // degenerate weights: largest (or first infinite) wins
        return weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i);
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Some(i);
        }
    }
    Some(weights.len() - 1)
}
