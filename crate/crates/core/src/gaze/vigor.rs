//! Main-sequence rate fit `v_max = g (1 − exp(−a / b))`.
//!
//! Each subject gets one vigor `g` and one rate `b` by profiled least squares
//! (for fixed `b` the optimal `g` is closed-form); `b` is found by
//! golden-section search over `ln b`. The global rate `b*` is the mean of the
//! per-subject rates, and per-saccade vigor is then `v_max / (1 − exp(−a/b*))`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const B_MIN: f64 = 0.1;
const B_MAX: f64 = 100.0;
const MAX_ITER: usize = 200;
const LOG_TOL: f64 = 1e-10;
const MIN_SACCADES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VigorFit {
    pub b_per_subject: BTreeMap<String, f64>,
    pub b_star: f64,
    /// Per-saccade vigor of the training data, computed with `b_star`.
    pub g_values: BTreeMap<String, Vec<f64>>,
}

impl VigorFit {
    /// A fit with a known global rate and no training record.
    pub fn from_rate(b_star: f64) -> Self {
        Self {
            b_per_subject: BTreeMap::new(),
            b_star,
            g_values: BTreeMap::new(),
        }
    }

    /// Vigor for a peak velocity and a (signed) displacement; `None` when the
    /// displacement is zero.
    pub fn vigor(&self, v_max: f64, displacement: f64) -> Option<f64> {
        let denom = 1.0 - (-displacement.abs() / self.b_star).exp();
        (denom > 0.0).then(|| v_max / denom)
    }
}

/// Residual sum of squares with `g` profiled out, and the optimal `g`.
fn profiled_rss(data: &[(f64, f64)], b: f64) -> (f64, f64) {
    let (mut svf, mut sff, mut svv) = (0.0, 0.0, 0.0);
    for &(v, a) in data {
        let f = 1.0 - (-a / b).exp();
        svf += v * f;
        sff += f * f;
        svv += v * v;
    }
    let g = svf / sff;
    ((svv - svf * g).max(0.0), g)
}

fn fit_subject(subject: &str, data: &[(f64, f64)]) -> Result<f64> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let rss = |log_b: f64| profiled_rss(data, log_b.exp()).0;
    let (mut lo, mut hi) = (B_MIN.ln(), B_MAX.ln());
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (rss(c), rss(d));
    for _ in 0..MAX_ITER {
        if hi - lo < LOG_TOL {
            return Ok((0.5 * (lo + hi)).exp());
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = rss(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = rss(d);
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITER,
        detail: format!(
            "vigor rate search for subject {subject}: bracket [{}, {}], rss {}",
            lo.exp(),
            hi.exp(),
            fc.min(fd)
        ),
    })
}

/// Fits the global rate from per-subject `(v_max, amplitude)` pairs.
pub fn fit_vigor_rate(training: &BTreeMap<String, Vec<(f64, f64)>>) -> Result<VigorFit> {
    if training.is_empty() {
        return Err(Error::InvalidInput("vigor fit needs at least one subject".into()));
    }
    let mut b_per_subject = BTreeMap::new();
    for (subject, data) in training {
        if data.len() < MIN_SACCADES {
            return Err(Error::InsufficientData {
                subject: subject.clone(),
                detail: format!("vigor fit needs {MIN_SACCADES} saccades, got {}", data.len()),
            });
        }
        if data.iter().any(|&(v, a)| !(v.is_finite() && v > 0.0 && a.is_finite() && a > 0.0)) {
            return Err(Error::Domain(format!(
                "vigor fit for subject {subject} needs positive peak velocities and amplitudes"
            )));
        }
        b_per_subject.insert(subject.clone(), fit_subject(subject, data)?);
    }
    let b_star = b_per_subject.values().sum::<f64>() / b_per_subject.len() as f64;
    let g_values = training
        .iter()
        .map(|(s, data)| {
            let g = data
                .iter()
                .map(|&(v, a)| v / (1.0 - (-a / b_star).exp()))
                .collect();
            (s.clone(), g)
        })
        .collect();
    Ok(VigorFit {
        b_per_subject,
        b_star,
        g_values,
    })
}
