//! Trust metrics: collision entropy of platform output distributions, honest
//! rejection probability, a Monte Carlo check of the verification protocol,
//! residual divergence bounds, and reduction-tree counts.
//!
//! These are analysis tools and use `f64` throughout.

use num_bigint::BigUint;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-12;

/// Output classes with the probability mass of the platforms producing them.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatformDistribution {
    classes: Vec<(String, f64)>,
}

impl PlatformDistribution {
    pub fn new(classes: Vec<(String, f64)>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidDistribution("no classes".into()));
        }
        if let Some((id, p)) = classes.iter().find(|(_, p)| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "class {id:?} has probability {p}"
            )));
        }
        let total: f64 = classes.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self { classes })
    }

    /// Classes named `y0, y1, ...`.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        Self::new(
            probs
                .iter()
                .enumerate()
                .map(|(i, &p)| (format!("y{i}"), p))
                .collect(),
        )
    }

    pub fn classes(&self) -> &[(String, f64)] {
        &self.classes
    }

    pub fn collision_probability(&self) -> f64 {
        self.classes.iter().map(|(_, p)| p * p).sum()
    }

    /// Index of the class containing cumulative mass `u` in `[0, 1)`.
    fn class_at(&self, u: f64) -> usize {
        let mut cum = 0.0;
        for (i, (_, p)) in self.classes.iter().enumerate() {
            cum += p;
            if u < cum {
                return i;
            }
        }
        self.classes.len() - 1
    }
}

/// Rényi collision entropy `-log2(sum p^2)` in bits.
pub fn trust_entropy(dist: &PlatformDistribution) -> f64 {
    let h = -dist.collision_probability().log2();
    // a single class gives -log2(1) = -0.0
    h.max(0.0)
}

/// Probability that two honest parties disagree: `1 - 2^-h`.
pub fn reject_prob(h_t: f64) -> Result<f64> {
    if h_t.is_nan() || h_t < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "trust entropy must be non-negative, got {h_t}"
        )));
    }
    Ok(1.0 - (-h_t).exp2())
}

const TRIALS_PER_STREAM: u64 = 4096;

fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fraction of `trials` in which independently drawn prover and verifier
/// platforms produce different outputs.
///
/// Trials are split into blocks of 4096, each with its own ChaCha20 stream
/// keyed by `(seed, block)`, so the result does not depend on scheduling.
pub fn simulate_protocol(dist: &PlatformDistribution, trials: u64, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let blocks = trials.div_ceil(TRIALS_PER_STREAM);
    let rejections: u64 = (0..blocks)
        .into_par_iter()
        .map(|block| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(block);
            let n = TRIALS_PER_STREAM.min(trials - block * TRIALS_PER_STREAM);
            (0..n)
                .filter(|_| {
                    let prover = dist.class_at(unit_f64(&mut rng));
                    let verifier = dist.class_at(unit_f64(&mut rng));
                    prover != verifier
                })
                .count() as u64
        })
        .sum();
    Ok(rejections as f64 / trials as f64)
}

/// Uniform residual divergence bound `eps * ((1 + lambda)^L - 1) / lambda`,
/// with the `lambda -> 0` limit `eps * L`.
pub fn decay_bound(eps: f64, lambda: f64, layers: u32) -> Result<f64> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be >= 0, got {eps}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    if layers == 0 {
        return Err(Error::InvalidArgument("layers must be at least 1".into()));
    }
    if eps == 0.0 {
        return Ok(0.0);
    }
    if lambda == 0.0 {
        return Ok(eps * layers as f64);
    }
    // (1+l)^L - 1 via exp_m1/ln_1p keeps precision for small lambda
    Ok(eps * (layers as f64 * lambda.ln_1p()).exp_m1() / lambda)
}

/// Per-layer bound `sum_i eps_i * prod_{j > i} (1 + lambda_j)` for
/// `(eps_i, lambda_i)` pairs in layer order.
pub fn decay_bound_layers(layers: &[(f64, f64)]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("layers must be at least 1".into()));
    }
    let mut bound = 0.0;
    for &(eps, lambda) in layers {
        if !(eps >= 0.0 && lambda >= 0.0 && eps.is_finite() && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid layer (eps={eps}, lambda={lambda})"
            )));
        }
        // unrolled recurrence: delta_{i+1} = (1 + lambda_i) delta_i + eps_i
        bound = (1.0 + lambda) * bound + eps;
    }
    Ok(bound)
}

/// Number of distinct binary reduction trees for a `d`-term sum: the Catalan
/// number `C(d - 1)`.
pub fn reduction_tree_count(d: u64) -> Result<BigUint> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("need d >= 2, got {d}")));
    }
    // C(n+1) = C(n) * 2(2n+1) / (n+2), exact at every step
    let mut c = BigUint::from(1u32);
    for n in 0..d - 1 {
        c = c * (2 * (2 * n + 1)) / (n + 2);
    }
    Ok(c)
}
