//! Gamma and multinomial primitives: log-densities, maximum-likelihood fits,
//! score functions and seeded sampling.
//!
//! The Gamma distribution is parameterized by shape `alpha` and scale `beta`
//! (mean `alpha * beta`). The multinomial is over the four saccade types and
//! keeps every probability at or above [`PROB_FLOOR`] so that `K_u / pi_u`
//! stays finite for types unseen during fitting.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Lower bound on every multinomial probability.
pub const PROB_FLOOR: f64 = 1e-6;

/// Number of saccade types (and therefore multinomial categories).
pub const NUM_TYPES: usize = 4;

const MLE_MAX_ITER: usize = 100;
const MLE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl GammaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0 && beta.is_finite() && beta > 0.0) {
            return Err(Error::Domain(format!(
                "gamma parameters must be positive and finite (alpha={alpha}, beta={beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn mean(&self) -> f64 {
        self.alpha * self.beta
    }

    pub fn variance(&self) -> f64 {
        self.alpha * self.beta * self.beta
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.alpha + self.beta.ln() + ln_gamma(self.alpha) + (1.0 - self.alpha) * digamma(self.alpha)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Parameters are validated on construction; Gamma::new only fails on
        // non-positive or non-finite inputs.
        rand_distr::Gamma::new(self.alpha, self.beta)
            .expect("validated gamma parameters")
            .sample(rng)
    }
}

/// Log-density `(α−1) ln x − x/β − ln Γ(α) − α ln β`.
pub fn gamma_logpdf(x: f64, p: &GammaParams) -> Result<f64> {
    check_positive(x)?;
    Ok(logpdf_unchecked(x, p))
}

#[inline]
pub(crate) fn logpdf_unchecked(x: f64, p: &GammaParams) -> f64 {
    (p.alpha - 1.0) * x.ln() - x / p.beta - ln_gamma(p.alpha) - p.alpha * p.beta.ln()
}

/// Partial derivatives of [`gamma_logpdf`] with respect to `(alpha, beta)`.
pub fn gamma_score(x: f64, p: &GammaParams) -> Result<(f64, f64)> {
    check_positive(x)?;
    Ok(score_unchecked(x, p))
}

#[inline]
pub(crate) fn score_unchecked(x: f64, p: &GammaParams) -> (f64, f64) {
    let d_alpha = x.ln() - digamma(p.alpha) - p.beta.ln();
    let d_beta = (x / p.beta - p.alpha) / p.beta;
    (d_alpha, d_beta)
}

fn check_positive(x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("gamma density needs x > 0, got {x}")))
    }
}

/// Trigamma function ψ'(x) for x > 0: recurrence up to x ≥ 10, then the
/// asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + inv2 / 2.0
        + inv * inv2
            * (1.0 / 6.0
                + inv2
                    * (-1.0 / 30.0
                        + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0 + inv2 * (5.0 / 66.0)))))
}

/// Maximum-likelihood Gamma fit.
///
/// The shape solves `ln α − ψ(α) = ln(mean) − mean(ln x)` by Newton iteration
/// started at `0.5 / (ln(mean) − mean(ln x))`; the scale follows as
/// `mean / α`, so `α̂ β̂` reproduces the sample mean.
pub fn gamma_mle(xs: &[f64]) -> Result<GammaParams> {
    if xs.len() < 2 {
        return Err(Error::Degenerate(format!(
            "gamma fit needs at least 2 samples, got {}",
            xs.len()
        )));
    }
    for &x in xs {
        check_positive(x)?;
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(Error::Degenerate(
            "gamma fit on identical samples (zero variance)".into(),
        ));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let mean_log = xs.iter().map(|x| x.ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_log;
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::Degenerate(format!(
            "log-mean gap {s} is not positive; samples are numerically identical"
        )));
    }

    let mut alpha = 0.5 / s;
    for _ in 0..MLE_MAX_ITER {
        let f = alpha.ln() - digamma(alpha) - s;
        let df = 1.0 / alpha - trigamma(alpha);
        let mut next = alpha - f / df;
        if !(next > 0.0) {
            next = alpha / 2.0;
        }
        let step = (next - alpha).abs();
        alpha = next;
        if step < MLE_TOL * alpha.max(1.0) {
            return GammaParams::new(alpha, mean / alpha);
        }
    }
    Err(Error::NonConvergence {
        iterations: MLE_MAX_ITER,
        detail: format!("gamma shape Newton iteration, last alpha = {alpha}"),
    })
}

pub fn gamma_sample(p: &GammaParams, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| p.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultinomialParams {
    pub probs: [f64; NUM_TYPES],
}

impl MultinomialParams {
    /// Builds a distribution from non-negative weights, normalizing and
    /// applying the probability floor.
    pub fn from_weights(weights: [f64; NUM_TYPES]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Domain(format!(
                "multinomial weights must be finite and non-negative: {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("all multinomial weights are zero".into()));
        }
        let mut probs = weights.map(|w| w / total);
        apply_floor(&mut probs, PROB_FLOOR);
        Ok(Self { probs })
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / NUM_TYPES as f64; NUM_TYPES],
        }
    }

    /// Draws a category index in `0..4`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        NUM_TYPES - 1
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Raises entries below `floor` to exactly `floor` and rescales the remaining
/// entries proportionally so the total stays 1.
pub(crate) fn apply_floor(p: &mut [f64], floor: f64) {
    let mut fixed = vec![false; p.len()];
    loop {
        let mut changed = false;
        for (v, f) in p.iter_mut().zip(fixed.iter_mut()) {
            if !*f && *v < floor {
                *v = floor;
                *f = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let n_fixed = fixed.iter().filter(|f| **f).count();
        let free_mass: f64 = p
            .iter()
            .zip(&fixed)
            .filter(|(_, f)| !**f)
            .map(|(v, _)| *v)
            .sum();
        if free_mass <= 0.0 {
            break;
        }
        let target = 1.0 - n_fixed as f64 * floor;
        for (v, f) in p.iter_mut().zip(&fixed) {
            if !*f {
                *v *= target / free_mass;
            }
        }
    }
}

/// `π_u = max(K_u / ΣK, ε)`, renormalized over the unfloored entries.
pub fn multinomial_mle(counts: &[usize; NUM_TYPES]) -> Result<MultinomialParams> {
    if counts.iter().all(|&k| k == 0) {
        return Err(Error::Degenerate("all type counts are zero".into()));
    }
    MultinomialParams::from_weights(counts.map(|k| k as f64))
}

/// Score of the categorical term with respect to each probability, `K_u / π_u`.
pub fn multinomial_score(counts: &[usize; NUM_TYPES], pi: &MultinomialParams) -> [f64; NUM_TYPES] {
    std::array::from_fn(|u| counts[u] as f64 / pi.probs[u])
}

pub fn multinomial_sample(pi: &MultinomialParams, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pi.sample(&mut rng)
}
