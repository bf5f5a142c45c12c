//! Seedable random streams. Every run derives all of its randomness from one
//! seed; each subsystem gets its own labeled ChaCha stream so reordering one
//! consumer never perturbs another. Stream state is (seed, stream, word_pos),
//! which round-trips through checkpoints bit-exactly.

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Labeled stream identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Train = 3,
    Sample = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Uniform draw in [0, 1) with 24 bits of resolution.
#[inline]
pub fn uniform_f32(rng: &mut ChaCha8Rng) -> f32 {
    (rng.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
}

/// Uniform draw in [0, 1) with 53 bits of resolution.
#[inline]
pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform integer in [0, n) via 64-bit multiply-shift.
#[inline]
pub fn uniform_usize(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Standard normal draw via Box-Muller (two uniform words per pair).
pub fn normal_f32(rng: &mut ChaCha8Rng) -> f32 {
    let u1 = (uniform_f64(rng)).max(f64::MIN_POSITIVE);
    let u2 = uniform_f64(rng);
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

pub fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f32]) {
    for v in out.iter_mut() {
        *v = normal_f32(rng);
    }
}

/// Fisher-Yates shuffle with the stream's own draws.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_usize(rng, i + 1);
        items.swap(i, j);
    }
}

/// Serializable ChaCha stream state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn save_state(rng: &ChaCha8Rng) -> RngState {
    RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
}

pub fn restore_state(state: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}
