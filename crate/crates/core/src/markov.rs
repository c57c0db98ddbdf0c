//! Markov scanpath model: a multinomial over saccade types and, per type, one
//! Gamma distribution for each enabled feature channel.
//!
//! The base configuration models amplitude and duration; the dynamics
//! configuration adds velocity, acceleration, acceleration ratios and vigor.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{
    gamma_mle, logpdf_unchecked, multinomial_mle, score_unchecked, GammaParams, MultinomialParams,
    NUM_TYPES,
};
use crate::error::{Error, Result};
use crate::gaze::{Channel, Fixation, SaccadeFeatures, SaccadeType, Scanpath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkovConfig {
    Base,
    Dynamics,
}

impl MarkovConfig {
    pub fn channels(self) -> &'static [Channel] {
        match self {
            Self::Base => &Channel::BASE,
            Self::Dynamics => &Channel::ALL,
        }
    }
}

impl fmt::Display for MarkovConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Dynamics => "dynamics",
        })
    }
}

impl FromStr for MarkovConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "dynamics" => Ok(Self::Dynamics),
            _ => Err(Error::InvalidInput(format!("unknown markov config {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovModelParams {
    pub config: MarkovConfig,
    pub pi: MultinomialParams,
    /// Per-type Gamma parameters, indexed by saccade type index 0..4.
    pub channels: BTreeMap<Channel, [GammaParams; NUM_TYPES]>,
    #[serde(default)]
    pub b_star: Option<f64>,
}

/// Record of cells that fell back to the pooled-across-types fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub fallbacks: Vec<CellFallback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFallback {
    pub channel: Channel,
    pub kind: SaccadeType,
    pub n_samples: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovFit {
    pub params: MarkovModelParams,
    pub report: FitReport,
}

/// Counts of channel values excluded from the likelihood because they were
/// undefined or non-positive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoglikDiagnostics {
    pub skipped: BTreeMap<Channel, usize>,
}

impl LoglikDiagnostics {
    pub fn total_skipped(&self) -> usize {
        self.skipped.values().sum()
    }
}

impl MarkovModelParams {
    /// Validates that every Gamma cell and every type probability is usable.
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidInput("markov model has no channels".into()));
        }
        for (u, p) in self.pi.probs.iter().enumerate() {
            if !(p.is_finite() && *p > 0.0) {
                return Err(Error::Domain(format!("type probability {} is {p}", u + 1)));
            }
        }
        for (c, cells) in &self.channels {
            for g in cells {
                GammaParams::new(g.alpha, g.beta)
                    .map_err(|e| Error::Domain(format!("channel {c}: {e}")))?;
            }
        }
        if let Some(b) = self.b_star {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Domain(format!("vigor rate must be positive, got {b}")));
            }
        }
        Ok(())
    }

    pub fn channel_list(&self) -> Vec<Channel> {
        self.channels.keys().copied().collect()
    }

    /// Parameter count `4 + 8·|channels|`, also the score dimension.
    pub fn n_params(&self) -> usize {
        NUM_TYPES * (1 + 2 * self.channels.len())
    }

    /// Flattens the parameters in gradient layout: per type, `π_u` then
    /// `(α, β)` for each channel.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for u in 0..NUM_TYPES {
            v.push(self.pi.probs[u]);
            for cells in self.channels.values() {
                v.push(cells[u].alpha);
                v.push(cells[u].beta);
            }
        }
        v
    }

    /// Inverse of [`to_vector`](Self::to_vector); probabilities are taken as
    /// given, without renormalization.
    pub fn with_vector(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: v.len(),
            });
        }
        let mut out = self.clone();
        let mut it = v.iter().copied();
        for u in 0..NUM_TYPES {
            out.pi.probs[u] = it.next().unwrap();
            for cells in out.channels.values_mut() {
                cells[u].alpha = it.next().unwrap();
                cells[u].beta = it.next().unwrap();
            }
        }
        Ok(out)
    }

    /// Expected log-likelihood per saccade under the model itself (negative
    /// per-saccade entropy).
    pub fn neg_entropy_per_saccade(&self) -> f64 {
        let mut h = self.pi.entropy();
        for u in 0..NUM_TYPES {
            let hu: f64 = self.channels.values().map(|c| c[u].entropy()).sum();
            h += self.pi.probs[u] * hu;
        }
        -h
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("<memory>", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::json("<memory>", e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }
}

/// Factorized maximum-likelihood fit on pooled saccades.
///
/// Type probabilities come from the pooled type counts; each (channel, type)
/// cell is fitted on the valid values of that type. Cells with fewer than two
/// valid values, or whose values are all equal, use the channel's fit pooled
/// across types and are listed in the report.
pub fn fit(data: &[Vec<SaccadeFeatures>], config: MarkovConfig) -> Result<MarkovFit> {
    fit_channels(data, config, config.channels())
}

/// As [`fit`], with an explicit channel subset.
pub fn fit_channels(
    data: &[Vec<SaccadeFeatures>],
    config: MarkovConfig,
    channels: &[Channel],
) -> Result<MarkovFit> {
    let mut counts = [0usize; NUM_TYPES];
    for f in data.iter().flatten() {
        counts[f.kind.index()] += 1;
    }
    if counts.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidInput("no saccades to fit".into()));
    }
    let pi = multinomial_mle(&counts)?;

    let mut report = FitReport::default();
    let mut fitted = BTreeMap::new();
    for &c in channels {
        let mut per_type: [Vec<f64>; NUM_TYPES] = Default::default();
        for f in data.iter().flatten() {
            if let Some(x) = f.channel(c) {
                per_type[f.kind.index()].push(x);
            }
        }
        let pooled: Vec<f64> = per_type.iter().flatten().copied().collect();
        let pooled_fit = gamma_mle(&pooled).map_err(|e| e.to_string());
        let mut cells = [GammaParams { alpha: 1.0, beta: 1.0 }; NUM_TYPES];
        for u in 0..NUM_TYPES {
            let xs = &per_type[u];
            let cell = if xs.len() < 2 {
                Err(format!("{} valid values", xs.len()))
            } else {
                gamma_mle(xs).map_err(|e| e.to_string())
            };
            cells[u] = match cell {
                Ok(g) => g,
                Err(reason) => {
                    let g = pooled_fit.as_ref().map_err(|e| {
                        Error::Degenerate(format!("channel {c} cannot be fitted even pooled: {e}"))
                    })?;
                    report.fallbacks.push(CellFallback {
                        channel: c,
                        kind: SaccadeType::from_index(u),
                        n_samples: xs.len(),
                        reason,
                    });
                    *g
                }
            };
        }
        fitted.insert(c, cells);
    }
    Ok(MarkovFit {
        params: MarkovModelParams {
            config,
            pi,
            channels: fitted,
            b_star: None,
        },
        report,
    })
}

fn check_features(features: &[SaccadeFeatures]) -> Result<()> {
    if features.is_empty() {
        return Err(Error::InvalidInput("scanpath has no saccades".into()));
    }
    Ok(())
}

/// Log-likelihood of one scanpath's saccades, without the multinomial
/// combinatorial constant.
pub fn loglik(features: &[SaccadeFeatures], m: &MarkovModelParams) -> Result<f64> {
    loglik_with_diagnostics(features, m).map(|(l, _)| l)
}

pub fn loglik_with_diagnostics(
    features: &[SaccadeFeatures],
    m: &MarkovModelParams,
) -> Result<(f64, LoglikDiagnostics)> {
    check_features(features)?;
    let mut diag = LoglikDiagnostics::default();
    let mut ll = 0.0;
    for f in features {
        let u = f.kind.index();
        ll += m.pi.probs[u].ln();
        for (&c, cells) in &m.channels {
            match f.channel(c) {
                Some(x) => ll += logpdf_unchecked(x, &cells[u]),
                None => *diag.skipped.entry(c).or_default() += 1,
            }
        }
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite {
            context: "markov log-likelihood".into(),
        });
    }
    Ok((ll, diag))
}

/// Fisher score: gradient of [`loglik`] in the layout of
/// [`MarkovModelParams::to_vector`].
///
/// Type coordinates are the unconstrained derivatives `K_u / π_u`; Gamma
/// coordinates are per-type sums of the Gamma score.
pub fn grad_loglik(features: &[SaccadeFeatures], m: &MarkovModelParams) -> Result<Vec<f64>> {
    check_features(features)?;
    let nc = m.channels.len();
    let block = 1 + 2 * nc;
    let mut g = vec![0.0; NUM_TYPES * block];
    for f in features {
        let u = f.kind.index();
        g[u * block] += 1.0;
        for (j, (&c, cells)) in m.channels.iter().enumerate() {
            if let Some(x) = f.channel(c) {
                let (da, db) = score_unchecked(x, &cells[u]);
                g[u * block + 1 + 2 * j] += da;
                g[u * block + 2 + 2 * j] += db;
            }
        }
    }
    for u in 0..NUM_TYPES {
        g[u * block] /= m.pi.probs[u];
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "markov gradient".into(),
        });
    }
    Ok(g)
}

/// Draws a scanpath of `t_len` fixations starting at `start`.
///
/// Each saccade draws a type, then every enabled channel from the type's
/// Gammas. The heading is the previous heading (the +x axis for the first
/// saccade) rotated by an angle drawn uniformly within the type's bin. The
/// first fixation's duration is drawn from the maintain-type duration cell, or
/// set to 1 ms when durations are not modeled.
pub fn sample_scanpath(
    m: &MarkovModelParams,
    t_len: usize,
    start: (f64, f64),
    seed: u64,
    subject_id: &str,
    image_id: &str,
) -> Result<(Scanpath, Vec<SaccadeFeatures>)> {
    if t_len < 2 {
        return Err(Error::InvalidInput(format!(
            "scanpath length must be at least 2, got {t_len}"
        )));
    }
    m.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first_dur = match m.channels.get(&Channel::Duration) {
        Some(cells) => cells[SaccadeType::Maintain.index()].sample(&mut rng),
        None => 1.0,
    };
    let mut fixations = Vec::with_capacity(t_len);
    fixations.push(Fixation::new(start.0, start.1, first_dur));
    let mut features = Vec::with_capacity(t_len - 1);
    let (mut x, mut y) = start;
    let mut heading = 0.0_f64;
    for _ in 1..t_len {
        let u = m.pi.sample(&mut rng);
        let kind = SaccadeType::from_index(u);
        let (lo, hi) = kind.angular_range();
        heading = crate::gaze::wrap_degrees(heading + rng.random_range(lo..hi));
        let mut f = SaccadeFeatures::base(kind, heading, 0.0, 0.0);
        for (&c, cells) in &m.channels {
            f.set_channel(c, cells[u].sample(&mut rng));
        }
        if !m.channels.contains_key(&Channel::Amplitude) {
            f.amplitude = 1.0;
        }
        if !m.channels.contains_key(&Channel::Duration) {
            f.duration = 1.0;
        }
        let rad = heading.to_radians();
        x += f.amplitude * rad.cos();
        y += f.amplitude * rad.sin();
        fixations.push(Fixation::new(x, y, f.duration));
        features.push(f);
    }
    Ok((Scanpath::new(fixations, subject_id, image_id), features))
}

/// Summed log-likelihood of a set of test scanpaths under each user model.
pub fn user_logliks(
    test: &[Vec<SaccadeFeatures>],
    users: &[MarkovModelParams],
) -> Result<Vec<f64>> {
    users
        .iter()
        .map(|m| test.iter().map(|f| loglik(f, m)).sum())
        .collect()
}

/// Index of the user whose model gives the test scanpaths the highest total
/// log-likelihood; ties go to the lowest index.
pub fn bayes_identify(test: &[Vec<SaccadeFeatures>], users: &[MarkovModelParams]) -> Result<usize> {
    if users.is_empty() {
        return Err(Error::InvalidInput("no user models".into()));
    }
    Ok(argmax_first(&user_logliks(test, users)?))
}

/// Index of the first maximum.
pub(crate) fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
