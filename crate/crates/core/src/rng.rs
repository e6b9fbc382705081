//! Seeding rules and the single-draw random protocol.
//!
//! Every random decision in the engine consumes exactly one `f64` from the
//! episode stream: a Bernoulli event with probability `p` fires when the
//! draw is `< p`, and a uniform choice among `k` options picks index
//! `floor(draw * k)`. Any reimplementation that follows the same draw order
//! reproduces the same episode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type EpisodeRng = ChaCha8Rng;

/// Stream for the engine dynamics of an episode seeded with `seed`.
pub fn episode_rng(seed: u64) -> EpisodeRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from `(master, index)` with a
/// SplitMix64 finalizer.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the per-slot policy stream, kept apart from the engine stream so
/// policies never perturb the dynamics.
pub fn policy_seed(episode_seed: u64, slot: usize) -> u64 {
    derive_seed(episode_seed ^ 0x005E_ED0F_A6E7, slot as u64)
}

#[inline]
pub fn draw(rng: &mut EpisodeRng) -> f64 {
    rng.gen::<f64>()
}

#[inline]
pub fn bernoulli(rng: &mut EpisodeRng, p: f64) -> bool {
    draw(rng) < p
}

#[inline]
pub fn choose_index(rng: &mut EpisodeRng, k: usize) -> usize {
    ((draw(rng) * k as f64) as usize).min(k - 1)
}
