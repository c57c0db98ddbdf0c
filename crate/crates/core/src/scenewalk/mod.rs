//! SceneWalk: attention and inhibition fields on a grid drive a potential
//! from which the next fixation is drawn.

mod fit;
mod grid;
mod lbfgs;
pub(crate) mod model;

pub use fit::{fit, objective, FitOptions, SceneWalkFitReport};
pub use grid::{estimate_saliency, gaussian_window, Grid, SaliencyMap, SALIENCY_FLOOR};
pub use model::{
    grad_loglik, loglik, loglik_with_diagnostics, sample_scanpath, step, DurationSource,
    SceneWalkDiagnostics, SceneWalkState, StepOutput,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of SceneWalk parameters.
pub const N_PARAMS: usize = 8;

/// Parameter names in gradient order.
pub const PARAM_NAMES: [&str; N_PARAMS] =
    ["zeta", "c_f", "lambda", "gamma", "omega_a", "omega_f", "sigma_a", "sigma_f"];

/// Decay rates are in 1/s, widths in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneWalkParams {
    pub zeta: f64,
    pub c_f: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub omega_a: f64,
    pub omega_f: f64,
    pub sigma_a: f64,
    pub sigma_f: f64,
}

impl Default for SceneWalkParams {
    fn default() -> Self {
        Self {
            zeta: 0.05,
            c_f: 0.3,
            lambda: 1.0,
            gamma: 1.0,
            omega_a: 10.0,
            omega_f: 2.0,
            sigma_a: 3.0,
            sigma_f: 2.0,
        }
    }
}

impl SceneWalkParams {
    /// `(ζ, c_F, λ, γ, ω_A, ω_F, σ_A, σ_F)`.
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.zeta,
            self.c_f,
            self.lambda,
            self.gamma,
            self.omega_a,
            self.omega_f,
            self.sigma_a,
            self.sigma_f,
        ]
    }

    pub fn from_array(v: [f64; N_PARAMS]) -> Self {
        Self {
            zeta: v[0],
            c_f: v[1],
            lambda: v[2],
            gamma: v[3],
            omega_a: v[4],
            omega_f: v[5],
            sigma_a: v[6],
            sigma_f: v[7],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.to_array();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("scenewalk parameters must be finite: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::Domain(format!("zeta must lie in [0, 1], got {}", self.zeta)));
        }
        if self.c_f < 0.0 {
            return Err(Error::Domain(format!("c_f must be non-negative, got {}", self.c_f)));
        }
        for (name, x) in PARAM_NAMES.iter().zip(v).skip(2) {
            if x <= 0.0 {
                return Err(Error::Domain(format!("{name} must be positive, got {x}")));
            }
        }
        Ok(())
    }
}

/// How the first fixation enters the likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitPolicy {
    /// The first fixation is given by the design and contributes nothing.
    #[default]
    Excluded,
    /// `ln(1 / #cells)`.
    Uniform,
    /// `ln H(q₁)`.
    Saliency,
}
