//! One-vs-rest linear SVMs with L2 regularization and hinge loss, trained by
//! dual coordinate descent.
//!
//! For each class the binary problem `min ½‖w‖² + C Σ max(0, 1 − y_i wᵀx_i)`
//! is solved in the dual, `min ½ αᵀQα − Σα` with `0 ≤ α ≤ C`, one coordinate
//! at a time in a seeded random order. The bias is an extra constant feature
//! of value 1 and is regularized with the weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::argmax_first;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmOptions {
    /// Stop when the spread of projected gradients falls below this.
    pub tol: f64,
    pub max_epochs: usize,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_epochs: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModel {
    pub classes: Vec<String>,
    /// One weight vector per class.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub c: f64,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
}

/// Trains one binary problem; `positive[i]` marks the examples of the class.
/// Returns the weights with the bias as the last entry.
fn train_binary(x: &[Vec<f64>], positive: &[bool], c: f64, opts: &SvmOptions, seed: u64) -> Vec<f64> {
    let n = x.len();
    let d = x[0].len();
    let y: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
    let qd: Vec<f64> = x.iter().map(|xi| xi.iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let xi = &x[i];
            let margin: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let g = y[i] * margin - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, c);
                let step = (alpha[i] - old) * y[i];
                if step != 0.0 {
                    w.iter_mut().zip(xi).for_each(|(wj, xj)| *wj += step * xj);
                    w[d] += step;
                }
            }
        }
        if pg_max - pg_min <= opts.tol {
            log::debug!("svm converged after {} epochs", epoch + 1);
            return w;
        }
    }
    log::debug!("svm stopped at the epoch cap of {}", opts.max_epochs);
    w
}

/// Trains one classifier per class in `classes`; `labels[i]` indexes
/// `classes`.
pub fn train(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: &[String],
    c: f64,
    seed: u64,
    opts: &SvmOptions,
) -> Result<LinearModel> {
    if classes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "classifier needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: labels.len(),
        });
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidInput(format!("C must be positive, got {c}")));
    }
    let d = features.first().map_or(0, Vec::len);
    for f in features {
        if f.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: f.len() });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "classifier features".into() });
        }
    }
    let mut counts = vec![0usize; classes.len()];
    for &l in labels {
        *counts.get_mut(l).ok_or_else(|| Error::InvalidInput(format!("label {l} out of range")))? += 1;
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InsufficientData {
            subject: classes[k].clone(),
            detail: "no training examples".into(),
        });
    }
    let mut weights = Vec::with_capacity(classes.len());
    let mut bias = Vec::with_capacity(classes.len());
    for k in 0..classes.len() {
        let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let mut w = train_binary(features, &positive, c, opts, derive_seed(seed, &[k as u64]));
        bias.push(w.pop().unwrap());
        weights.push(w);
    }
    Ok(LinearModel {
        classes: classes.to_vec(),
        weights,
        bias,
        c,
    })
}

/// `wₖᵀx + bₖ` for every class.
pub fn decision_scores(model: &LinearModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: x.len(),
        });
    }
    Ok(model
        .weights
        .iter()
        .zip(&model.bias)
        .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
        .collect())
}

/// Class with the largest decision score summed over the given images; ties
/// go to the lowest class index.
pub fn identify(model: &LinearModel, images: &[Vec<f64>]) -> Result<usize> {
    if images.is_empty() {
        return Err(Error::InvalidInput("identification needs at least one image".into()));
    }
    let mut total = vec![0.0; model.classes.len()];
    for x in images {
        total.iter_mut().zip(decision_scores(model, x)?).for_each(|(t, s)| *t += s);
    }
    Ok(argmax_first(&total))
}
