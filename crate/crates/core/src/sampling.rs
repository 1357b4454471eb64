//! Seeded randomness and the weight-proposal distributions.
//!
//! # Reproducibility contract
//!
//! [`RngStream`] wraps ChaCha8 seeded through `SeedableRng::seed_from_u64`
//! (PCG32 seed expansion), which is fixed by the `rand_core` 0.6 / `rand_chacha`
//! 0.3 line and identical on every platform. All derived quantities are
//! computed here rather than through `rand` distributions:
//!
//! * open unit uniform: `((next_u64 >> 11) + 0.5) · 2⁻⁵³`, strictly inside (0, 1);
//! * half-open unit uniform: `(next_u64 >> 11) · 2⁻⁵³`, in [0, 1);
//! * normal: Box–Muller on two consecutive open uniforms `(u1, u2)`, yielding
//!   `r·cos θ` first and caching `r·sin θ` for the next call;
//! * bounded integers: Lemire's multiply-shift with rejection.
//!
//! Independent streams are derived from a base seed with [`derive_seed`]
//! (SplitMix64 finalizer folded over the tag words), never by sharing one
//! generator between consumers.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Lower and upper decimal exponents of the gradient-check learning rate.
pub const LR_EXPONENT_RANGE: (f64, f64) = (-6.0, 1.0);

/// SplitMix64 output function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from `base` and a sequence of tag words.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(base), |acc, &t| mix64(acc ^ mix64(t)))
}

/// Single-owner pseudo-random stream. See the module docs for the algorithm.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), spare_normal: None }
    }

    /// Stream seeded with `derive_seed(base, tags)`.
    pub fn derived(base: u64, tags: &[u64]) -> Self {
        Self::new(derive_seed(base, tags))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on [0, 1).
    #[inline]
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn unit_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * TWO_POW_NEG_53
    }

    /// Uniform on (lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit_open()
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.unit_open();
        let u2 = self.unit_open();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    #[inline]
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Bernoulli trial with success probability `p`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Uniform integer in `0..bound`. `bound` must be non-zero.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below(0)");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = (self.next_u64() as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fisher–Yates shuffle driven by [`RngStream::below`].
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Which proposal distribution generates candidate weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProposalKind {
    /// `w' ~ Normal(w, η)`.
    NormalCentered,
    /// `w' = w + Uniform(-η, η)`.
    UniformAdditive,
    /// `w' ~ Uniform(-1, 1)`, independent of `w`.
    ZeroMeanUnitUniform,
}

impl ProposalKind {
    pub const ALL: [ProposalKind; 3] =
        [ProposalKind::ZeroMeanUnitUniform, ProposalKind::UniformAdditive, ProposalKind::NormalCentered];

    pub fn as_str(self) -> &'static str {
        match self {
            ProposalKind::NormalCentered => "normal",
            ProposalKind::UniformAdditive => "uniform",
            ProposalKind::ZeroMeanUnitUniform => "unit-uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(ProposalKind::NormalCentered),
            "uniform" => Ok(ProposalKind::UniformAdditive),
            "unit-uniform" => Ok(ProposalKind::ZeroMeanUnitUniform),
            other => Err(Error::config(format!("unknown proposal `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalSpec {
    pub kind: ProposalKind,
    pub eta: f64,
}

impl ProposalSpec {
    pub fn new(kind: ProposalKind, eta: f64) -> Result<Self> {
        let spec = Self { kind, eta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let needs_eta = self.kind != ProposalKind::ZeroMeanUnitUniform;
        if needs_eta && !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be positive and finite, got {}", self.eta)));
        }
        Ok(())
    }

    /// Writes a proposal for `current` into `out` (same length).
    pub fn propose_into<T: Scalar>(&self, current: &[T], out: &mut [T], rng: &mut RngStream) {
        debug_assert_eq!(current.len(), out.len());
        match self.kind {
            ProposalKind::NormalCentered => {
                for (o, &w) in out.iter_mut().zip(current) {
                    *o = T::lit(rng.normal(w.as_f64(), self.eta));
                }
            }
            ProposalKind::UniformAdditive => {
                for (o, &w) in out.iter_mut().zip(current) {
                    *o = w + T::lit(rng.uniform(-self.eta, self.eta));
                }
            }
            ProposalKind::ZeroMeanUnitUniform => {
                for o in out.iter_mut() {
                    *o = T::lit(rng.uniform(-1.0, 1.0));
                }
            }
        }
    }
}

/// Draws one proposal for every weight jointly; `weights` is left untouched.
pub fn propose<T: Scalar>(weights: &[T], spec: &ProposalSpec, rng: &mut RngStream) -> Vec<T> {
    let mut out = vec![T::zero(); weights.len()];
    spec.propose_into(weights, &mut out, rng);
    out
}

/// `10^u`.
#[inline]
pub fn learning_rate_from_exponent(u: f64) -> f64 {
    10f64.powf(u)
}

/// Log-uniform learning rate `10^U(-6, 1)`.
pub fn sample_learning_rate(rng: &mut RngStream) -> f64 {
    let (lo, hi) = LR_EXPONENT_RANGE;
    learning_rate_from_exponent(lo + (hi - lo) * rng.unit())
}
