//! Seed derivation and counter-based noise.
//!
//! Every random stream in the crate is a [`ChaCha8Rng`] seeded from a master
//! seed mixed with a purpose label. Independent labels give independent
//! streams, so consuming draws in one stage never shifts another stage's
//! stream — the property the replay and method-reduction guarantees rest on.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a purpose label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = mix(master ^ 0x517c_c1b7_2722_0a95);
    for &b in label.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    h
}

/// A seeded stream for one purpose.
pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

/// Counter-based generator keyed on (seed, point coordinates).
///
/// Used by noise-bearing reference fields: the draw at a query point depends
/// only on the seed and the point's bit pattern, so evaluation order and
/// concurrency cannot change it.
pub fn point_keyed(seed: u64, point: &[f64]) -> ChaCha8Rng {
    let mut h = mix(seed ^ 0x2545_f491_4f6c_dd1d);
    for &c in point {
        h = mix(h ^ c.to_bits());
    }
    ChaCha8Rng::seed_from_u64(h)
}
