//! Seeded random streams.
//!
//! The generator is PCG64 (`Lcg128Xsl64`: 128-bit LCG state, XSL-RR output,
//! 64-bit results) from `rand_pcg`. A 64-bit seed is expanded to the 128-bit
//! state with two rounds of SplitMix64. Child streams derived with
//! [`RngStream::split`] get their own key and their own LCG increment, so
//! parallel tasks never share a sequence.
//!
//! Uniforms use the top 53 bits of one output: `(x >> 11) · 2⁻⁵³ ∈ [0, 1)`.
//! Gaussians use the Box–Muller transform on two uniforms
//! `u₁ ∈ (0, 1]`, `u₂ ∈ [0, 1)`:
//! `z₀ = √(−2 ln u₁)·cos(2πu₂)`, `z₁ = √(−2 ln u₁)·sin(2πu₂)`;
//! `z₁` is cached and returned by the next call.
//!
//! These choices are part of the reproducibility contract and must not change.

use rand_core::Rng;
use rand_pcg::Pcg64;

use crate::tensor::{Scalar, Tensor};

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    key: u64,
    inner: Pcg64,
    spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(key: u64, stream: u64) -> Self {
        let hi = splitmix64(key);
        let lo = splitmix64(hi ^ 0x6A09_E667_F3BC_C908);
        let state = ((hi as u128) << 64) | lo as u128;
        RngStream {
            key,
            inner: Pcg64::new(state, stream as u128),
            spare: None,
        }
    }

    /// Independent child stream `index`; depends only on this stream's key.
    pub fn split(&self, index: u64) -> Self {
        let key = splitmix64(self.key ^ splitmix64(index.wrapping_add(1)));
        Self::with_stream(key, index)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box–Muller.
    pub fn gauss(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gauss_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gauss()).collect()
    }

    /// Tensor of i.i.d. standard normal entries.
    pub fn gauss_sample<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.gauss())).collect();
        Tensor::new(shape.to_vec(), data).expect("gauss_sample: shape must have positive extents")
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
