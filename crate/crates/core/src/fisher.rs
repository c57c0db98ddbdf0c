//! Fisher scores, the empirical Fisher information and the whitened feature
//! map `φ = L⁻¹ g` with `L Lᵀ = I + ridge`.
//!
//! Scores are gradients of the log-likelihood at the pooled estimate, so the
//! kernel `K(i, j) = g_iᵀ (I + ridge)⁻¹ g_j` equals `φ_i · φ_j`.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{SaccadeFeatures, Scanpath};
use crate::markov::{self, MarkovModelParams};
use crate::scenewalk::{self, SaliencyMap, SceneWalkParams};

/// Default relative ridge.
pub const DEFAULT_EPS_REG: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherScore {
    pub g: Vec<f64>,
    pub model_tag: String,
}

/// What a generative model needs to score one item.
#[derive(Debug, Clone, Copy)]
pub enum Observation<'a> {
    Saccades(&'a [SaccadeFeatures]),
    Fixations(&'a Scanpath, &'a SaliencyMap),
}

/// A fitted generative model that can produce log-likelihood gradients.
pub trait ScoreModel: Sync {
    fn model_tag(&self) -> String;
    fn dim(&self) -> usize;
    fn score(&self, obs: &Observation<'_>) -> Result<Vec<f64>>;
}

impl ScoreModel for MarkovModelParams {
    fn model_tag(&self) -> String {
        format!("markov-{}", self.config)
    }

    fn dim(&self) -> usize {
        self.n_params()
    }

    fn score(&self, obs: &Observation<'_>) -> Result<Vec<f64>> {
        match obs {
            Observation::Saccades(f) => markov::grad_loglik(f, self),
            Observation::Fixations(..) => Err(Error::InvalidInput(
                "the Markov model scores saccade features, not fixation sequences".into(),
            )),
        }
    }
}

impl ScoreModel for SceneWalkParams {
    fn model_tag(&self) -> String {
        "scenewalk".into()
    }

    fn dim(&self) -> usize {
        scenewalk::N_PARAMS
    }

    fn score(&self, obs: &Observation<'_>) -> Result<Vec<f64>> {
        match obs {
            Observation::Fixations(path, h) => scenewalk::grad_loglik(path, h, self).map(|g| g.to_vec()),
            Observation::Saccades(_) => Err(Error::InvalidInput(
                "SceneWalk scores fixation sequences with a saliency map".into(),
            )),
        }
    }
}

/// One score per observation, in input order.
pub fn compute_scores<M: ScoreModel + ?Sized>(model: &M, items: &[Observation<'_>]) -> Result<Vec<FisherScore>> {
    let tag = model.model_tag();
    let dim = model.dim();
    items
        .par_iter()
        .map(|obs| {
            let g = model.score(obs)?;
            if g.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: g.len() });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { context: format!("{tag} score") });
            }
            Ok(FisherScore { g, model_tag: tag.clone() })
        })
        .collect()
}

/// Empirical second moment of the scores with its regularized Cholesky
/// factor. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherInformation {
    pub dim: usize,
    /// Number of scores averaged.
    pub n: usize,
    /// Relative ridge; the absolute ridge is `eps_reg · tr(I) / dim`.
    pub eps_reg: f64,
    pub ridge: f64,
    matrix: Vec<f64>,
    factor: Vec<f64>,
}

impl FisherInformation {
    /// `I = Id` with no ridge; the feature map is then the identity.
    pub fn identity(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        Self {
            dim,
            n: 0,
            eps_reg: 0.0,
            ridge: 0.0,
            matrix: eye.clone(),
            factor: eye,
        }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Lower-triangular `L` with `L Lᵀ = I + ridge·Id`.
    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    /// `I + ridge·Id`.
    pub fn regularized(&self) -> Vec<f64> {
        let mut m = self.matrix.clone();
        for i in 0..self.dim {
            m[i * self.dim + i] += self.ridge;
        }
        m
    }
}

/// `I = (1/N) Σ g gᵀ` plus the ridge `eps_reg · tr(I)/dim`. When every
/// score is zero the trace is zero and the ridge falls back to `eps_reg`.
pub fn estimate_information(scores: &[FisherScore], eps_reg: f64) -> Result<FisherInformation> {
    let first = scores
        .first()
        .ok_or_else(|| Error::InvalidInput("Fisher information needs at least one score".into()))?;
    if !(eps_reg.is_finite() && eps_reg > 0.0) {
        return Err(Error::InvalidInput(format!("eps_reg must be positive, got {eps_reg}")));
    }
    let dim = first.g.len();
    let mut m = vec![0.0; dim * dim];
    for s in scores {
        if s.g.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: s.g.len() });
        }
        for i in 0..dim {
            let gi = s.g[i];
            for j in 0..=i {
                m[i * dim + j] += gi * s.g[j];
            }
        }
    }
    let n = scores.len() as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = m[i * dim + j] / n;
            m[i * dim + j] = v;
            m[j * dim + i] = v;
        }
    }
    let trace: f64 = (0..dim).map(|i| m[i * dim + i]).sum();
    let scale = if trace > 0.0 { trace / dim as f64 } else { 1.0 };
    let ridge = eps_reg * scale;

    let mut reg = DMatrix::from_row_slice(dim, dim, &m);
    for i in 0..dim {
        reg[(i, i)] += ridge;
    }
    let chol = Cholesky::new(reg).ok_or_else(|| {
        Error::Degenerate("regularized Fisher information is not positive definite".into())
    })?;
    let l = chol.l();
    let factor = (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
    Ok(FisherInformation {
        dim,
        n: scores.len(),
        eps_reg,
        ridge,
        matrix: m,
        factor,
    })
}

/// `φ = L⁻¹ g` by forward substitution, optionally scaled to unit L2 norm
/// (a zero vector stays zero).
pub fn feature_map(score: &FisherScore, info: &FisherInformation, normalize: bool) -> Result<Vec<f64>> {
    let d = info.dim;
    if score.g.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: score.g.len() });
    }
    let l = &info.factor;
    let mut phi = vec![0.0; d];
    for i in 0..d {
        let diag = l[i * d + i];
        if !(diag.is_finite() && diag > 0.0) {
            return Err(Error::Degenerate(format!("Fisher factor is singular at row {i}")));
        }
        let partial: f64 = (0..i).map(|j| l[i * d + j] * phi[j]).sum();
        phi[i] = (score.g[i] - partial) / diag;
    }
    if normalize {
        let norm = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            phi.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(phi)
}

/// `K(i, j) = φ_i · φ_j`.
pub fn kernel(a: &FisherScore, b: &FisherScore, info: &FisherInformation, normalize: bool) -> Result<f64> {
    let pa = feature_map(a, info, normalize)?;
    let pb = feature_map(b, info, normalize)?;
    Ok(pa.iter().zip(&pb).map(|(x, y)| x * y).sum())
}

/// Feature matrix CSV: `subject_id,image_id,phi_1,…,phi_dim`.
pub fn features_csv(rows: &[(String, String, Vec<f64>)]) -> String {
    let dim = rows.first().map_or(0, |r| r.2.len());
    let mut out = String::from("subject_id,image_id");
    for i in 1..=dim {
        out.push_str(&format!(",phi_{i}"));
    }
    out.push('\n');
    for (s, i, phi) in rows {
        out.push_str(s);
        out.push(',');
        out.push_str(i);
        for v in phi {
            // `{:e}` round-trips f64 exactly.
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}
