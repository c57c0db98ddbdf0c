//! Regularized maximum-likelihood fitting.
//!
//! Parameters are optimized in an unconstrained space: `logit ζ` and `ln θ`
//! for the seven positive parameters. The L2 penalty `ρ‖φ‖²` acts on these
//! transformed values, so strong regularization pulls toward `ζ = 1/2` and
//! all other parameters toward 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::SaliencyMap;
use super::lbfgs::minimize;
use super::model::loglik_and_grad;
use super::{InitPolicy, SceneWalkParams, N_PARAMS};
use crate::error::{Error, Result};
use crate::gaze::Scanpath;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub rho: f64,
    pub max_iter: usize,
    /// Convergence threshold on the ∞-norm of the transformed gradient.
    pub grad_tol: f64,
    pub init_policy: InitPolicy,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rho: 0.1,
            max_iter: 500,
            grad_tol: 1e-5,
            init_policy: InitPolicy::Excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneWalkFitReport {
    pub params: SceneWalkParams,
    /// Regularized log-likelihood at `params`.
    pub objective: f64,
    /// ∞-norm of the objective gradient in transformed space.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn to_phi(p: &SceneWalkParams) -> [f64; N_PARAMS] {
    let mut v = p.to_array();
    let z = v[0].clamp(1e-9, 1.0 - 1e-9);
    v[0] = (z / (1.0 - z)).ln();
    for x in &mut v[1..] {
        *x = x.max(1e-9).ln();
    }
    v
}

pub(crate) fn from_phi(phi: &[f64]) -> SceneWalkParams {
    let mut v = [0.0; N_PARAMS];
    v[0] = logistic(phi[0]);
    for i in 1..N_PARAMS {
        v[i] = phi[i].exp();
    }
    SceneWalkParams::from_array(v)
}

/// Regularized objective and its gradient with respect to the transformed
/// parameters.
pub(crate) fn objective_phi(
    items: &[(&Scanpath, &SaliencyMap)],
    phi: &[f64],
    opts: &FitOptions,
) -> Result<(f64, [f64; N_PARAMS])> {
    let p = from_phi(phi);
    let parts: Vec<(f64, [f64; N_PARAMS])> = items
        .par_iter()
        .map(|(path, h)| loglik_and_grad(path, h, &p, opts.init_policy))
        .collect::<Result<_>>()?;
    let mut value = 0.0;
    let mut grad = [0.0; N_PARAMS];
    for (l, g) in &parts {
        value += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let theta = p.to_array();
    // Chain rule through the transforms.
    grad[0] *= theta[0] * (1.0 - theta[0]);
    for i in 1..N_PARAMS {
        grad[i] *= theta[i];
    }
    for i in 0..N_PARAMS {
        value -= opts.rho * phi[i] * phi[i];
        grad[i] -= 2.0 * opts.rho * phi[i];
    }
    Ok((value, grad))
}

/// Regularized objective `Σ ln p − ρ‖φ‖²` at `params`.
pub fn objective(items: &[(&Scanpath, &SaliencyMap)], params: &SceneWalkParams, opts: &FitOptions) -> Result<f64> {
    objective_phi(items, &to_phi(params), opts).map(|r| r.0)
}

/// Maximizes the regularized log-likelihood from `init`. When the iteration
/// budget runs out or the line search stalls, the best iterate is returned
/// with `converged = false`.
pub fn fit(
    items: &[(&Scanpath, &SaliencyMap)],
    init: &SceneWalkParams,
    opts: &FitOptions,
) -> Result<SceneWalkFitReport> {
    if items.is_empty() {
        return Err(Error::InvalidInput("scenewalk fit needs at least one scanpath".into()));
    }
    if !(opts.rho.is_finite() && opts.rho >= 0.0) {
        return Err(Error::InvalidInput(format!("rho must be non-negative, got {}", opts.rho)));
    }
    init.validate()?;
    let negated = |phi: &[f64]| {
        objective_phi(items, phi, opts).map(|(v, g)| (-v, g.iter().map(|x| -x).collect()))
    };
    let out = minimize(negated, to_phi(init).to_vec(), opts.grad_tol, opts.max_iter)?;
    Ok(SceneWalkFitReport {
        params: from_phi(&out.x),
        objective: -out.value,
        grad_norm: out.grad.iter().fold(0.0, |m, x| m.max(x.abs())),
        iterations: out.iterations,
        converged: out.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenewalk::model::tests::test_map;
    use crate::scenewalk::{sample_scanpath, DurationSource};

    fn sampled(h: &SaliencyMap, p: &SceneWalkParams, n: usize, t_len: usize) -> Vec<Scanpath> {
        (0..n)
            .map(|i| {
                sample_scanpath(h, p, t_len, (20.0, 30.0), DurationSource::Constant(250.0), 100 + i as u64, "s", "i")
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn transform_round_trip() {
        let p = SceneWalkParams::default();
        let back = from_phi(&to_phi(&p)).to_array();
        for (a, b) in back.iter().zip(p.to_array()) {
            assert!((a - b).abs() < 1e-12 * b.abs());
        }
    }

    #[test]
    fn refit_dominates_truth() {
        let h = test_map(64, 64, 1);
        let truth = SceneWalkParams {
            zeta: 0.1,
            c_f: 0.4,
            lambda: 1.2,
            gamma: 0.8,
            omega_a: 8.0,
            omega_f: 3.0,
            sigma_a: 6.0,
            sigma_f: 4.0,
        };
        let paths = sampled(&h, &truth, 20, 10);
        let items: Vec<_> = paths.iter().map(|p| (p, &h)).collect();
        let opts = FitOptions { rho: 0.01, ..FitOptions::default() };
        let report = fit(&items, &SceneWalkParams::default(), &opts).unwrap();
        let at_truth = objective(&items, &truth, &opts).unwrap();
        assert!(report.objective >= at_truth - 1e-6, "{} < {at_truth}", report.objective);
    }

    #[test]
    fn fit_is_deterministic() {
        let h = test_map(16, 16, 3);
        let paths = sampled(&h, &SceneWalkParams::default(), 5, 8);
        let items: Vec<_> = paths.iter().map(|p| (p, &h)).collect();
        let opts = FitOptions::default();
        let a = fit(&items, &SceneWalkParams::default(), &opts).unwrap();
        let b = fit(&items, &SceneWalkParams::default(), &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stronger_regularization_shrinks_transformed_params() {
        let h = test_map(24, 24, 2);
        let paths = sampled(&h, &SceneWalkParams::default(), 6, 8);
        let items: Vec<_> = paths.iter().map(|p| (p, &h)).collect();
        let mut last = f64::INFINITY;
        for rho in [0.0, 1.0, 10.0, 100.0] {
            let opts = FitOptions { rho, ..FitOptions::default() };
            let r = fit(&items, &SceneWalkParams::default(), &opts).unwrap();
            let norm: f64 = to_phi(&r.params).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm <= last + 1e-6, "rho {rho}: {norm} > {last}");
            last = norm;
        }
    }
}
