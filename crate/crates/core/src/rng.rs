//! Counter-based pseudo-randomness with fixed, documented constants.
//!
//! Every draw is a pure function of `(seed, counter)`: the stream value at
//! position `i` is `mix64(seed + i * GOLDEN_GAMMA)` where `mix64` is the
//! splitmix64 output permutation. This makes sample streams bit-identical
//! across runs and platforms, and lets checkpoints capture generator state
//! as two integers.
//!
//! Subsystems (data shuffling, reparameterization noise, Gumbel noise) each
//! work from a child generator produced by [`RngState::derive`], so
//! perturbing one subsystem leaves the others' streams untouched.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Weyl-sequence increment of splitmix64.
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator state: a seed naming the stream and a counter
/// naming the position within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: u64,
    counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn from_parts(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Child generator for a named subsystem. FNV-1a over the label, mixed
    /// into the parent seed; the child starts at counter 0.
    pub fn derive(&self, label: &str) -> RngState {
        let mut h = FNV_OFFSET;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        RngState {
            seed: mix64(self.seed ^ h),
            counter: 0,
        }
    }

    /// Child generator for a numbered stream (epoch index, step index, ...).
    pub fn derive_u64(&self, n: u64) -> RngState {
        RngState {
            seed: mix64(self.seed ^ mix64(n.wrapping_add(GOLDEN_GAMMA))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`; safe under `ln`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller. Consumes exactly two counter steps,
    /// so stream positions stay a pure function of the draw index.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard Gumbel(0, 1): `-ln(-ln(u))`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    /// Uniform integer in `[0, n)` via the widening-multiply reduction.
    /// The modulo bias is `O(n / 2^64)` and irrelevant at the scales used.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below((i + 1) as u64) as usize;
            xs.swap(i, j);
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), self.normal_vec(n)).expect("shape/data constructed together")
    }
}
