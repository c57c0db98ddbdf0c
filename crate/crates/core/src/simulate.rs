//! Synthetic multi-viewer cohorts sampled from the generative models.
//!
//! Every user gets its own parameters, drawn as `base · exp(δ·z)` per
//! positive parameter with `z` standard normal. Type probabilities are
//! jittered as weights and renormalized; the SceneWalk mixture weight `ζ` is
//! jittered on the logit scale. All images are viewed by all users.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Item};
use crate::dist::{GammaParams, MultinomialParams, NUM_TYPES};
use crate::error::{Error, Result};
use crate::gaze::Channel;
use crate::markov::{self, MarkovConfig, MarkovModelParams};
use crate::scenewalk::model::draw_index;
use crate::scenewalk::{self, DurationSource, Grid, SaliencyMap, SceneWalkParams};
use crate::seed::derive_seed;

/// Generative model used to sample a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Markov,
    MarkovDyn,
    #[serde(rename = "scenewalk")]
    SceneWalk,
}

impl ModelKind {
    pub fn markov_config(self) -> Option<MarkovConfig> {
        match self {
            ModelKind::Markov => Some(MarkovConfig::Base),
            ModelKind::MarkovDyn => Some(MarkovConfig::Dynamics),
            ModelKind::SceneWalk => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Markov => "markov",
            ModelKind::MarkovDyn => "markov-dyn",
            ModelKind::SceneWalk => "scenewalk",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov" => Ok(ModelKind::Markov),
            "markov-dyn" => Ok(ModelKind::MarkovDyn),
            "scenewalk" => Ok(ModelKind::SceneWalk),
            _ => Err(Error::InvalidInput(format!(
                "unknown model {s:?}; expected markov, markov-dyn or scenewalk"
            ))),
        }
    }
}

fn default_grid() -> Grid {
    Grid {
        rows: 128,
        cols: 128,
        extent_deg: [40.0, 30.0],
    }
}

fn default_durations() -> GammaParams {
    GammaParams { alpha: 4.0, beta: 60.0 }
}

fn default_blobs() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCohortSpec {
    pub n_users: usize,
    /// Per-user jitter scale on log parameters.
    pub delta: f64,
    pub n_images: usize,
    /// Fixations per scanpath.
    pub fixations: usize,
    pub model: ModelKind,
    pub seed: u64,
    /// Markov base parameters; defaults to [`default_markov_params`].
    #[serde(default)]
    pub markov_base: Option<MarkovModelParams>,
    #[serde(default)]
    pub scenewalk_base: Option<SceneWalkParams>,
    /// Image grid for SceneWalk cohorts; also the start area for Markov ones.
    #[serde(default = "default_grid")]
    pub grid: Grid,
    /// Fixation durations for SceneWalk cohorts, which do not model them.
    #[serde(default = "default_durations")]
    pub durations: GammaParams,
    /// Gaussian blobs per synthetic saliency map.
    #[serde(default = "default_blobs")]
    pub blobs: usize,
}

impl SyntheticCohortSpec {
    pub fn new(model: ModelKind, n_users: usize, delta: f64, n_images: usize, fixations: usize, seed: u64) -> Self {
        Self {
            n_users,
            delta,
            n_images,
            fixations,
            model,
            seed,
            markov_base: None,
            scenewalk_base: None,
            grid: default_grid(),
            durations: default_durations(),
            blobs: default_blobs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_images == 0 {
            return Err(Error::InvalidInput("cohort needs at least one user and one image".into()));
        }
        if self.fixations < 2 {
            return Err(Error::InvalidInput(format!(
                "scanpaths need at least 2 fixations, got {}",
                self.fixations
            )));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::InvalidInput(format!("delta must be non-negative, got {}", self.delta)));
        }
        Grid::new(self.grid.rows, self.grid.cols, self.grid.extent_deg)?;
        GammaParams::new(self.durations.alpha, self.durations.beta)?;
        if self.model == ModelKind::SceneWalk && self.blobs == 0 {
            return Err(Error::InvalidInput("saliency maps need at least one blob".into()));
        }
        if let Some(m) = &self.markov_base {
            m.validate()?;
            if Some(m.config) != self.model.markov_config() {
                return Err(Error::InvalidInput(format!(
                    "markov_base has config {} but the cohort model is {}",
                    m.config, self.model
                )));
            }
        }
        if let Some(p) = &self.scenewalk_base {
            p.validate()?;
        }
        Ok(())
    }

    fn markov_base(&self, config: MarkovConfig) -> MarkovModelParams {
        self.markov_base.clone().unwrap_or_else(|| default_markov_params(config))
    }
}

/// Parameters of one synthetic user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UserParams {
    Markov(MarkovModelParams),
    #[serde(rename = "scenewalk")]
    SceneWalk(SceneWalkParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub dataset: Dataset,
    /// Generating parameters by subject id.
    pub users: BTreeMap<String, UserParams>,
}

/// Plausible base parameters: amplitudes of a few degrees, fixation
/// durations around 250 ms, maintain the most frequent type.
pub fn default_markov_params(config: MarkovConfig) -> MarkovModelParams {
    let table: [(Channel, [(f64, f64); NUM_TYPES]); 8] = [
        (Channel::Amplitude, [(2.5, 2.0), (2.2, 2.4), (2.2, 2.4), (2.0, 3.0)]),
        (Channel::Duration, [(4.0, 60.0), (3.6, 70.0), (3.6, 70.0), (3.2, 85.0)]),
        (Channel::Velocity, [(6.0, 30.0), (5.5, 32.0), (5.5, 32.0), (5.0, 36.0)]),
        (Channel::Acceleration, [(3.0, 4000.0), (3.0, 4200.0), (3.0, 4200.0), (2.8, 4600.0)]),
        (Channel::RatioX, [(5.0, 0.2), (5.0, 0.2), (5.0, 0.2), (5.0, 0.2)]),
        (Channel::RatioY, [(5.0, 0.2), (5.0, 0.2), (5.0, 0.2), (5.0, 0.2)]),
        (Channel::VigorX, [(8.0, 50.0), (8.0, 50.0), (8.0, 50.0), (8.0, 50.0)]),
        (Channel::VigorY, [(8.0, 50.0), (8.0, 50.0), (8.0, 50.0), (8.0, 50.0)]),
    ];
    let channels = table
        .into_iter()
        .filter(|(c, _)| config.channels().contains(c))
        .map(|(c, cells)| (c, cells.map(|(alpha, beta)| GammaParams { alpha, beta })))
        .collect();
    MarkovModelParams {
        config,
        pi: MultinomialParams {
            probs: [0.4, 0.2, 0.2, 0.2],
        },
        channels,
        b_star: (config == MarkovConfig::Dynamics).then_some(3.0),
    }
}

fn jitter<R: Rng>(x: f64, delta: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    x * (delta * z).exp()
}

/// Multiplicative log-normal jitter of every Gamma parameter and of the type
/// weights.
pub fn jitter_markov(base: &MarkovModelParams, delta: f64, seed: u64) -> Result<MarkovModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = base.clone();
    let mut w = [0.0; NUM_TYPES];
    for (wu, &p) in w.iter_mut().zip(&base.pi.probs) {
        *wu = jitter(p, delta, &mut rng);
    }
    out.pi = MultinomialParams::from_weights(w)?;
    for cells in out.channels.values_mut() {
        for g in cells.iter_mut() {
            g.alpha = jitter(g.alpha, delta, &mut rng);
            g.beta = jitter(g.beta, delta, &mut rng);
        }
    }
    out.validate()?;
    Ok(out)
}

/// Log-normal jitter of the seven positive parameters, logit-normal for `ζ`.
pub fn jitter_scenewalk(base: &SceneWalkParams, delta: f64, seed: u64) -> Result<SceneWalkParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = base.to_array();
    let z: f64 = StandardNormal.sample(&mut rng);
    let logit = (v[0] / (1.0 - v[0])).ln() + delta * z;
    v[0] = 1.0 / (1.0 + (-logit).exp());
    for x in &mut v[1..] {
        *x = jitter(*x, delta, &mut rng);
    }
    let p = SceneWalkParams::from_array(v);
    p.validate()?;
    Ok(p)
}

/// Mixture of `blobs` Gaussian bumps with random centers, widths and weights.
pub fn blob_saliency(grid: Grid, blobs: usize, seed: u64) -> Result<SaliencyMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [w, h] = grid.extent_deg;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..blobs)
        .map(|_| {
            let cx = rng.random_range(0.15..0.85) * w;
            let cy = rng.random_range(0.15..0.85) * h;
            let s = rng.random_range(0.05..0.12) * w.min(h);
            let wt = rng.random_range(0.5..1.5);
            (cx, cy, s, wt)
        })
        .collect();
    let values = (0..grid.n_cells())
        .map(|idx| {
            let (x, y) = grid.center(idx);
            bumps
                .iter()
                .map(|&(cx, cy, s, wt)| wt * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
                .sum()
        })
        .collect();
    SaliencyMap::from_values(grid, values)
}

// Stream tags for derived seeds.
const USER_PARAMS: u64 = 1;
const USER_PATHS: u64 = 2;
const IMAGE_MAP: u64 = 3;

/// Samples a labeled cohort; deterministic given the spec.
pub fn generate_cohort(spec: &SyntheticCohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let uw = spec.n_users.to_string().len().max(2);
    let iw = spec.n_images.to_string().len().max(3);
    let subjects: Vec<String> = (1..=spec.n_users).map(|u| format!("u{u:0uw$}")).collect();
    let images: Vec<String> = (1..=spec.n_images).map(|i| format!("img{i:0iw$}")).collect();

    let saliency: BTreeMap<String, SaliencyMap> = if spec.model == ModelKind::SceneWalk {
        images
            .iter()
            .enumerate()
            .map(|(j, id)| Ok((id.clone(), blob_saliency(spec.grid, spec.blobs, derive_seed(spec.seed, &[IMAGE_MAP, j as u64]))?)))
            .collect::<Result<_>>()?
    } else {
        BTreeMap::new()
    };

    let per_user: Vec<(UserParams, Vec<Item>)> = subjects
        .par_iter()
        .enumerate()
        .map(|(u, subject)| {
            let pseed = derive_seed(spec.seed, &[USER_PARAMS, u as u64]);
            let path_seed = |j: usize| derive_seed(spec.seed, &[USER_PATHS, u as u64, j as u64]);
            match spec.model.markov_config() {
                Some(config) => {
                    let m = jitter_markov(&spec.markov_base(config), spec.delta, pseed)?;
                    let start = (spec.grid.extent_deg[0] / 2.0, spec.grid.extent_deg[1] / 2.0);
                    let items = images
                        .iter()
                        .enumerate()
                        .map(|(j, image)| {
                            let (path, features) = markov::sample_scanpath(&m, spec.fixations, start, path_seed(j), subject, image)?;
                            Ok(Item { path, features: Some(features) })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((UserParams::Markov(m), items))
                }
                None => {
                    let base = spec.scenewalk_base.unwrap_or_default();
                    let p = jitter_scenewalk(&base, spec.delta, pseed)?;
                    let items = images
                        .iter()
                        .enumerate()
                        .map(|(j, image)| {
                            let h = &saliency[image];
                            let seed = path_seed(j);
                            // The first fixation is drawn from the saliency map.
                            let mut rng = ChaCha8Rng::seed_from_u64(seed);
                            let first = draw_index(h.values(), rng.random());
                            let path = scenewalk::sample_scanpath(
                                h,
                                &p,
                                spec.fixations,
                                spec.grid.center(first),
                                DurationSource::Gamma(spec.durations),
                                derive_seed(seed, &[0]),
                                subject,
                                image,
                            )?;
                            Ok(Item { path, features: None })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((UserParams::SceneWalk(p), items))
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut users = BTreeMap::new();
    let mut items = Vec::with_capacity(spec.n_users * spec.n_images);
    for (subject, (params, its)) in subjects.into_iter().zip(per_user) {
        users.insert(subject, params);
        items.extend(its);
    }
    let dataset = Dataset {
        items,
        grid: (spec.model == ModelKind::SceneWalk).then_some(spec.grid),
        saliency,
    };
    Ok(Cohort { dataset, users })
}
