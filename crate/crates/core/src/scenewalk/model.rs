//! Field dynamics, next-fixation distribution, likelihood and gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::{Grid, SaliencyMap};
use super::{InitPolicy, SceneWalkParams, N_PARAMS};
use crate::dist::GammaParams;
use crate::error::{Error, Result};
use crate::gaze::{Fixation, Scanpath};

/// Uniform mass added to the floored potential before normalization.
const POTENTIAL_EPS: f64 = 1e-12;

/// Attention and inhibition fields after `t` fixations, with the partial
/// derivatives of each field with respect to its own decay rate and window
/// width.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneWalkState {
    pub a: Vec<f64>,
    pub f: Vec<f64>,
    pub da_domega: Vec<f64>,
    pub da_dsigma: Vec<f64>,
    pub df_domega: Vec<f64>,
    pub df_dsigma: Vec<f64>,
    pub t: usize,
}

impl SceneWalkState {
    /// `A₀ = H`, `F₀` uniform, all partials zero.
    pub fn new(h: &SaliencyMap) -> Self {
        let n = h.grid.n_cells();
        Self {
            a: h.values().to_vec(),
            f: vec![1.0 / n as f64; n],
            da_domega: vec![0.0; n],
            da_dsigma: vec![0.0; n],
            df_domega: vec![0.0; n],
            df_dsigma: vec![0.0; n],
            t: 0,
        }
    }

    /// Applies one fixation at `cell` lasting `d_ms`.
    fn advance(&mut self, cell: usize, d_ms: f64, p: &SceneWalkParams, h: &SaliencyMap) -> Result<()> {
        let d = d_ms / 1000.0;
        let (ga, dga) = normalized_window(&h.grid, cell, p.sigma_a, Some(h.values()));
        let (gf, dgf) = normalized_window(&h.grid, cell, p.sigma_f, None);
        let ea = (-p.omega_a * d).exp();
        let ef = (-p.omega_f * d).exp();
        for i in 0..self.a.len() {
            self.da_domega[i] = ea * (self.da_domega[i] - d * (self.a[i] - ga[i]));
            self.da_dsigma[i] = dga[i] + ea * (self.da_dsigma[i] - dga[i]);
            self.a[i] = ga[i] + ea * (self.a[i] - ga[i]);
            self.df_domega[i] = ef * (self.df_domega[i] - d * (self.f[i] - gf[i]));
            self.df_dsigma[i] = dgf[i] + ef * (self.df_dsigma[i] - dgf[i]);
            self.f[i] = gf[i] + ef * (self.f[i] - gf[i]);
        }
        self.t += 1;
        let finite = [&self.a, &self.f, &self.da_domega, &self.da_dsigma, &self.df_domega, &self.df_dsigma]
            .iter()
            .all(|g| g.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(non_finite(p, "field update"));
        }
        Ok(())
    }
}

fn non_finite(p: &SceneWalkParams, what: &str) -> Error {
    Error::NonFinite {
        context: format!("scenewalk {what} with parameters {p:?}"),
    }
}

/// Window centered on `cell`, optionally weighted by `weights`, normalized to
/// sum 1, together with its derivative with respect to `σ`.
///
/// With `G = exp(−r²/2σ²)/(2πσ²)` we have `∂G/∂σ = G·(r²/σ³ − 2/σ)`, so the
/// normalized window `Ĝ` has `∂Ĝ/∂σ = Ĝ·(w − Σ Ĝ w)` with `w = r²/σ³ − 2/σ`.
fn normalized_window(grid: &Grid, cell: usize, sigma: f64, weights: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let (cx, cy) = grid.center(cell);
    let two_var = 2.0 * sigma * sigma;
    // The kernel factorizes over the axes, so only rows + cols exponentials
    // are needed. The 1/(2πσ²) factor cancels in the normalization.
    let dx2: Vec<f64> = (0..grid.cols)
        .map(|j| ((j as f64 + 0.5) * grid.cell_width() - cx).powi(2))
        .collect();
    let dy2: Vec<f64> = (0..grid.rows)
        .map(|i| ((i as f64 + 0.5) * grid.cell_height() - cy).powi(2))
        .collect();
    let ex: Vec<f64> = dx2.iter().map(|d| (-d / two_var).exp()).collect();
    let ey: Vec<f64> = dy2.iter().map(|d| (-d / two_var).exp()).collect();
    let n = grid.n_cells();
    let mut g = Vec::with_capacity(n);
    for &e in &ey {
        for &f in &ex {
            g.push(e * f);
        }
    }
    if let Some(w) = weights {
        g.iter_mut().zip(w).for_each(|(a, b)| *a *= b);
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|x| *x /= total);
    let s3 = sigma.powi(3);
    let mut w = Vec::with_capacity(n);
    for &a in &dy2 {
        for &b in &dx2 {
            w.push((a + b) / s3 - 2.0 / sigma);
        }
    }
    let mean_w: f64 = g.iter().zip(&w).map(|(a, b)| a * b).sum();
    let dg = g.iter().zip(&w).map(|(a, b)| a * (b - mean_w)).collect();
    (g, dg)
}

/// Potential and next-fixation distribution of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub potential: Vec<f64>,
    pub distribution: Vec<f64>,
}

/// Per-cell quantities of the normalized power `X^κ / Σ X^κ` of a field.
struct PowerField {
    /// `X^κ / Σ X^κ`.
    hat: Vec<f64>,
    /// `ln X`, zero where `X ≤ 0` (such cells have zero weight).
    log: Vec<f64>,
}

fn power_field(x: &[f64], kappa: f64) -> Option<PowerField> {
    let log: Vec<f64> = x.iter().map(|&v| if v > 0.0 { v.ln() } else { 0.0 }).collect();
    let mut hat: Vec<f64> = x
        .iter()
        .zip(&log)
        .map(|(&v, &l)| if v > 0.0 { (kappa * l).exp() } else { 0.0 })
        .collect();
    let total: f64 = hat.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    hat.iter_mut().for_each(|v| *v /= total);
    Some(PowerField { hat, log })
}

/// `Σ X̂ · z`.
fn weighted_mean(hat: &[f64], z: impl Iterator<Item = f64>) -> f64 {
    hat.iter().zip(z).map(|(h, z)| h * z).sum()
}

/// Ratio `dX / X`, zero where `X ≤ 0`.
fn rel(d: &[f64], x: &[f64]) -> Vec<f64> {
    d.iter().zip(x).map(|(&d, &x)| if x > 0.0 { d / x } else { 0.0 }).collect()
}

struct Potential {
    a: PowerField,
    f: PowerField,
    u: Vec<f64>,
    /// `max(U, 0) + ε`.
    v: Vec<f64>,
    v_sum: f64,
}

fn potential(state: &SceneWalkState, p: &SceneWalkParams) -> Result<Potential> {
    let a = power_field(&state.a, p.lambda).ok_or_else(|| non_finite(p, "attention normalization"))?;
    let f = power_field(&state.f, p.gamma).ok_or_else(|| non_finite(p, "inhibition normalization"))?;
    let u: Vec<f64> = a.hat.iter().zip(&f.hat).map(|(x, y)| x - p.c_f * y).collect();
    let v: Vec<f64> = u.iter().map(|x| x.max(0.0) + POTENTIAL_EPS).collect();
    let v_sum = v.iter().sum();
    Ok(Potential { a, f, u, v, v_sum })
}

fn distribution_of(pot: &Potential, zeta: f64) -> Vec<f64> {
    let n = pot.v.len() as f64;
    pot.v.iter().map(|x| (1.0 - zeta) * x / pot.v_sum + zeta / n).collect()
}

/// Next-fixation log-probability of `k` and its gradient in the order
/// `(ζ, c_F, λ, γ, ω_A, ω_F, σ_A, σ_F)`.
fn target_terms(state: &SceneWalkState, p: &SceneWalkParams, k: usize, with_grad: bool) -> Result<(f64, [f64; N_PARAMS])> {
    let mut pot = potential(state, p)?;
    let n = pot.v.len() as f64;
    let s = pot.v_sum;
    let pk = (1.0 - p.zeta) * pot.v[k] / s + p.zeta / n;
    if !(pk > 0.0 && pk.is_finite()) {
        return Err(non_finite(p, "next-fixation probability"));
    }
    let mut g = [0.0; N_PARAMS];
    if !with_grad {
        return Ok((pk.ln(), g));
    }
    g[0] = (-pot.v[k] / s + 1.0 / n) / pk;

    // Every potential partial has the form coef · X̂ · (z − Σ X̂ z).
    let (ah, fh) = (&pot.a.hat, &pot.f.hat);
    let za = [
        std::mem::take(&mut pot.a.log),
        rel(&state.da_domega, &state.a),
        rel(&state.da_dsigma, &state.a),
    ];
    let zf = [
        std::mem::take(&mut pot.f.log),
        rel(&state.df_domega, &state.f),
        rel(&state.df_dsigma, &state.f),
    ];
    let ma: Vec<f64> = za.iter().map(|z| weighted_mean(ah, z.iter().copied())).collect();
    let mf: Vec<f64> = zf.iter().map(|z| weighted_mean(fh, z.iter().copied())).collect();
    // (λ, γ, ω_A, ω_F, σ_A, σ_F) as (field, z index, coefficient).
    let terms: [(bool, usize, f64); 6] = [
        (true, 0, 1.0),
        (false, 0, -p.c_f),
        (true, 1, p.lambda),
        (false, 1, -p.c_f * p.gamma),
        (true, 2, p.lambda),
        (false, 2, -p.c_f * p.gamma),
    ];
    let du = |param: usize, i: usize| -> f64 {
        if param == 0 {
            return -fh[i];
        }
        let (is_a, zi, coef) = terms[param - 1];
        if is_a {
            coef * ah[i] * (za[zi][i] - ma[zi])
        } else {
            coef * fh[i] * (zf[zi][i] - mf[zi])
        }
    };
    for param in 0..7 {
        let mut sum_pos = 0.0;
        for i in 0..pot.u.len() {
            if pot.u[i] > 0.0 {
                sum_pos += du(param, i);
            }
        }
        let dk = if pot.u[k] > 0.0 { du(param, k) } else { 0.0 };
        g[param + 1] = (1.0 - p.zeta) * (dk * s - pot.v[k] * sum_pos) / (s * s) / pk;
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(non_finite(p, "gradient"));
    }
    Ok((pk.ln(), g))
}

/// Advances `state` by a fixation at `q` (degrees) lasting `d_ms`, and
/// returns the potential and next-fixation distribution.
pub fn step(
    state: &mut SceneWalkState,
    q: (f64, f64),
    d_ms: f64,
    params: &SceneWalkParams,
    h: &SaliencyMap,
) -> Result<StepOutput> {
    params.validate()?;
    if !(d_ms.is_finite() && d_ms > 0.0) {
        return Err(Error::Domain(format!("fixation duration must be positive, got {d_ms}")));
    }
    if state.a.len() != h.grid.n_cells() {
        return Err(Error::DimensionMismatch {
            expected: h.grid.n_cells(),
            got: state.a.len(),
        });
    }
    let (cell, _) = h.grid.cell_of(q.0, q.1);
    state.advance(cell, d_ms, params, h)?;
    let pot = potential(state, params)?;
    let distribution = distribution_of(&pot, params.zeta);
    Ok(StepOutput {
        potential: pot.u,
        distribution,
    })
}

/// Counts of fixations that fell outside the grid and were clamped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SceneWalkDiagnostics {
    pub clamped: usize,
}

fn sweep(
    path: &Scanpath,
    h: &SaliencyMap,
    p: &SceneWalkParams,
    init: InitPolicy,
    with_grad: bool,
) -> Result<(f64, [f64; N_PARAMS], SceneWalkDiagnostics)> {
    path.validate()?;
    p.validate()?;
    let mut diag = SceneWalkDiagnostics::default();
    let cells: Vec<usize> = path
        .fixations
        .iter()
        .map(|f| {
            let (c, clamped) = h.grid.cell_of(f.x, f.y);
            diag.clamped += clamped as usize;
            c
        })
        .collect();
    let mut ll = match init {
        InitPolicy::Excluded => 0.0,
        InitPolicy::Uniform => -(h.grid.n_cells() as f64).ln(),
        InitPolicy::Saliency => h.values()[cells[0]].ln(),
    };
    let mut grad = [0.0; N_PARAMS];
    let mut state = SceneWalkState::new(h);
    for t in 0..cells.len() - 1 {
        state.advance(cells[t], path.fixations[t].duration_ms, p, h)?;
        let (lp, g) = target_terms(&state, p, cells[t + 1], with_grad)?;
        ll += lp;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((ll, grad, diag))
}

/// Log-likelihood of the fixation positions of `path`.
pub fn loglik(path: &Scanpath, h: &SaliencyMap, params: &SceneWalkParams, init: InitPolicy) -> Result<f64> {
    sweep(path, h, params, init, false).map(|r| r.0)
}

pub fn loglik_with_diagnostics(
    path: &Scanpath,
    h: &SaliencyMap,
    params: &SceneWalkParams,
    init: InitPolicy,
) -> Result<(f64, SceneWalkDiagnostics)> {
    sweep(path, h, params, init, false).map(|r| (r.0, r.2))
}

/// Gradient of the log-likelihood in the order
/// `(ζ, c_F, λ, γ, ω_A, ω_F, σ_A, σ_F)`. The first fixation never contributes.
pub fn grad_loglik(path: &Scanpath, h: &SaliencyMap, params: &SceneWalkParams) -> Result<[f64; N_PARAMS]> {
    sweep(path, h, params, InitPolicy::Excluded, true).map(|r| r.1)
}

/// Log-likelihood and gradient in one sweep.
pub(crate) fn loglik_and_grad(
    path: &Scanpath,
    h: &SaliencyMap,
    params: &SceneWalkParams,
    init: InitPolicy,
) -> Result<(f64, [f64; N_PARAMS])> {
    sweep(path, h, params, init, true).map(|r| (r.0, r.1))
}

/// Source of fixation durations for sampling; SceneWalk does not model them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DurationSource {
    Constant(f64),
    Gamma(GammaParams),
}

/// Samples `t_len` fixations starting at `q1`; each later position is the
/// center of a cell drawn from the step distribution.
#[allow(clippy::too_many_arguments)]
pub fn sample_scanpath(
    h: &SaliencyMap,
    params: &SceneWalkParams,
    t_len: usize,
    q1: (f64, f64),
    durations: DurationSource,
    seed: u64,
    subject_id: &str,
    image_id: &str,
) -> Result<Scanpath> {
    params.validate()?;
    if t_len < 2 {
        return Err(Error::InvalidInput(format!("scanpath length must be at least 2, got {t_len}")));
    }
    if let DurationSource::Constant(d) = durations {
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::Domain(format!("fixation duration must be positive, got {d}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_duration = |rng: &mut ChaCha8Rng| match durations {
        DurationSource::Constant(d) => d,
        DurationSource::Gamma(g) => g.sample(rng),
    };
    let mut state = SceneWalkState::new(h);
    let mut fixations = Vec::with_capacity(t_len);
    let mut cell = h.grid.cell_of(q1.0, q1.1).0;
    let (x, y) = h.grid.center(cell);
    fixations.push(Fixation::new(x, y, draw_duration(&mut rng)));
    for _ in 1..t_len {
        let d = fixations.last().unwrap().duration_ms;
        state.advance(cell, d, params, h)?;
        let pot = potential(&state, params)?;
        let dist = distribution_of(&pot, params.zeta);
        cell = draw_index(&dist, rng.random::<f64>());
        let (x, y) = h.grid.center(cell);
        fixations.push(Fixation::new(x, y, draw_duration(&mut rng)));
    }
    Ok(Scanpath::new(fixations, subject_id, image_id))
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn draw_index(p: &[f64], u: f64) -> usize {
    let total: f64 = p.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if target < acc {
            return i;
        }
    }
    p.len() - 1
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::scenewalk::estimate_saliency;

    pub(crate) fn test_map(rows: usize, cols: usize, seed: u64) -> SaliencyMap {
        let grid = Grid::new(rows, cols, [cols as f64, rows as f64]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let (cx, cy) = if i % 2 == 0 { (0.3, 0.4) } else { (0.7, 0.6) };
                (
                    (cx + 0.1 * rng.random::<f64>()) * cols as f64,
                    (cy + 0.1 * rng.random::<f64>()) * rows as f64,
                )
            })
            .collect();
        estimate_saliency(&pts, grid).unwrap()
    }

    pub(crate) fn random_params(rng: &mut ChaCha8Rng) -> SceneWalkParams {
        SceneWalkParams {
            zeta: rng.random_range(0.01..0.3),
            c_f: rng.random_range(0.0..0.6),
            lambda: rng.random_range(0.5..2.0),
            gamma: rng.random_range(0.5..2.0),
            omega_a: rng.random_range(1.0..20.0),
            omega_f: rng.random_range(0.5..10.0),
            sigma_a: rng.random_range(1.0..5.0),
            sigma_f: rng.random_range(0.5..4.0),
        }
    }

    pub(crate) fn random_path(h: &SaliencyMap, t_len: usize, rng: &mut ChaCha8Rng) -> Scanpath {
        let [w, ht] = h.grid.extent_deg;
        let fix = (0..t_len)
            .map(|_| Fixation::new(rng.random_range(0.0..w), rng.random_range(0.0..ht), rng.random_range(100.0..500.0)))
            .collect();
        Scanpath::new(fix, "s", "i")
    }

    /// Fields after `t` fixations written as an explicit weighted sum:
    /// `A_t = W₀·A₀ + Σ_s w_s·Ĝ_s` with `w_s = (1 − e_s)·Π_{r>s} e_r` and
    /// `W₀ = Π e_r`, and the partials obtained by differentiating the weights
    /// and windows directly.
    pub(crate) struct Unrolled {
        pub a: Vec<f64>,
        pub f: Vec<f64>,
        pub da_domega: Vec<f64>,
        pub da_dsigma: Vec<f64>,
        pub df_domega: Vec<f64>,
        pub df_dsigma: Vec<f64>,
    }

    fn unrolled_field(
        grid: &Grid,
        cells: &[usize],
        durs: &[f64],
        omega: f64,
        sigma: f64,
        weights: Option<&[f64]>,
        init: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = grid.n_cells();
        let ds: Vec<f64> = durs.iter().map(|d| d / 1000.0).collect();
        let total: f64 = ds.iter().sum();
        let w0 = (-omega * total).exp();
        let mut a: Vec<f64> = init.iter().map(|x| w0 * x).collect();
        let mut dom: Vec<f64> = init.iter().map(|x| -total * w0 * x).collect();
        let mut dsg = vec![0.0; n];
        for s in 0..cells.len() {
            let later: f64 = ds[s + 1..].iter().sum();
            let tail = (-omega * later).exp();
            let es = (-omega * ds[s]).exp();
            let ws = (1.0 - es) * tail;
            let dws = ds[s] * es * tail - later * ws;
            // Window and its σ-derivative from the raw Gaussian by the
            // quotient rule.
            let (cx, cy) = grid.center(cells[s]);
            let r2 = grid.squared_distances(cx, cy);
            let raw: Vec<f64> = r2
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    (-r / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma)
                        * weights.map_or(1.0, |w| w[i])
                })
                .collect();
            let draw: Vec<f64> = raw
                .iter()
                .zip(&r2)
                .map(|(g, r)| g * (r / sigma.powi(3) - 2.0 / sigma))
                .collect();
            let z: f64 = raw.iter().sum();
            let dz: f64 = draw.iter().sum();
            for i in 0..n {
                let ghat = raw[i] / z;
                let dghat = (draw[i] * z - raw[i] * dz) / (z * z);
                a[i] += ws * ghat;
                dom[i] += dws * ghat;
                dsg[i] += ws * dghat;
            }
        }
        (a, dom, dsg)
    }

    pub(crate) fn unrolled(h: &SaliencyMap, p: &SceneWalkParams, cells: &[usize], durs: &[f64]) -> Unrolled {
        let n = h.grid.n_cells();
        let (a, da_domega, da_dsigma) =
            unrolled_field(&h.grid, cells, durs, p.omega_a, p.sigma_a, Some(h.values()), h.values());
        let (f, df_domega, df_dsigma) =
            unrolled_field(&h.grid, cells, durs, p.omega_f, p.sigma_f, None, &vec![1.0 / n as f64; n]);
        Unrolled {
            a,
            f,
            da_domega,
            da_dsigma,
            df_domega,
            df_dsigma,
        }
    }

    /// Next-fixation probability of `k` from fields, written directly from
    /// the model definition.
    pub(crate) fn direct_probability(a: &[f64], f: &[f64], p: &SceneWalkParams, k: usize) -> f64 {
        let sa: f64 = a.iter().map(|x| x.powf(p.lambda)).sum();
        let sf: f64 = f.iter().map(|x| x.powf(p.gamma)).sum();
        let u: Vec<f64> = a
            .iter()
            .zip(f)
            .map(|(x, y)| x.powf(p.lambda) / sa - p.c_f * y.powf(p.gamma) / sf)
            .map(|u| u.max(0.0) + 1e-12)
            .collect();
        let su: f64 = u.iter().sum();
        (1.0 - p.zeta) * u[k] / su + p.zeta / a.len() as f64
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn uniform_mixture_gives_uniform_distribution() {
        let h = test_map(12, 10, 1);
        let mut p = SceneWalkParams::default();
        p.zeta = 1.0;
        let mut st = SceneWalkState::new(&h);
        let out = step(&mut st, (3.0, 4.0), 250.0, &p, &h).unwrap();
        assert!(out.distribution.iter().all(|&x| x == 1.0 / 120.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let path = random_path(&h, 7, &mut rng);
        let ll = loglik(&path, &h, &p, InitPolicy::Excluded).unwrap();
        assert!((ll - 6.0 * (1.0f64 / 120.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn distributions_are_normalized() {
        let h = test_map(16, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = random_params(&mut rng);
            let mut st = SceneWalkState::new(&h);
            for _ in 0..8 {
                let q = (rng.random_range(0.0..16.0), rng.random_range(0.0..16.0));
                let out = step(&mut st, q, rng.random_range(100.0..400.0), &p, &h).unwrap();
                let s: f64 = out.distribution.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(out.distribution.iter().all(|&x| x >= 0.0));
                assert!((st.a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fast_decay_reaches_the_window() {
        let h = test_map(10, 10, 5);
        let mut p = SceneWalkParams::default();
        p.omega_a = 50.0 / 0.2;
        let mut st = SceneWalkState::new(&h);
        step(&mut st, (4.0, 4.0), 200.0, &p, &h).unwrap();
        let (ghat, _) = normalized_window(&h.grid, h.grid.cell_of(4.0, 4.0).0, p.sigma_a, Some(h.values()));
        for (a, g) in st.a.iter().zip(&ghat) {
            assert!((a - g).abs() < 1e-15);
        }
    }

    #[test]
    fn incremental_state_matches_unrolled_sum() {
        let h = test_map(16, 20, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let p = random_params(&mut rng);
            let path = random_path(&h, 8, &mut rng);
            let cells: Vec<usize> = path.fixations.iter().map(|f| h.grid.cell_of(f.x, f.y).0).collect();
            let durs: Vec<f64> = path.fixations.iter().map(|f| f.duration_ms).collect();
            let mut st = SceneWalkState::new(&h);
            for t in 0..cells.len() {
                st.advance(cells[t], durs[t], &p, &h).unwrap();
                let u = unrolled(&h, &p, &cells[..=t], &durs[..=t]);
                let pairs = [
                    (&st.a, &u.a),
                    (&st.f, &u.f),
                    (&st.da_domega, &u.da_domega),
                    (&st.da_dsigma, &u.da_dsigma),
                    (&st.df_domega, &u.df_domega),
                    (&st.df_dsigma, &u.df_dsigma),
                ];
                for (x, y) in pairs {
                    for (a, b) in x.iter().zip(y.iter()) {
                        assert!(close(*a, *b, 1e-12), "t={t}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn loglik_matches_direct_evaluation() {
        let h = test_map(16, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let p = random_params(&mut rng);
            let path = random_path(&h, 6, &mut rng);
            let cells: Vec<usize> = path.fixations.iter().map(|f| h.grid.cell_of(f.x, f.y).0).collect();
            let durs: Vec<f64> = path.fixations.iter().map(|f| f.duration_ms).collect();
            let mut expected = 0.0;
            for t in 0..cells.len() - 1 {
                let u = unrolled(&h, &p, &cells[..=t], &durs[..=t]);
                expected += direct_probability(&u.a, &u.f, &p, cells[t + 1]).ln();
            }
            let got = loglik(&path, &h, &p, InitPolicy::Excluded).unwrap();
            assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0), "{got} vs {expected}");
        }
    }

    #[test]
    fn init_policies_add_first_term() {
        let h = test_map(8, 8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng);
        let path = random_path(&h, 5, &mut rng);
        let base = loglik(&path, &h, &p, InitPolicy::Excluded).unwrap();
        let uni = loglik(&path, &h, &p, InitPolicy::Uniform).unwrap();
        let sal = loglik(&path, &h, &p, InitPolicy::Saliency).unwrap();
        assert!((uni - base - (1.0f64 / 64.0).ln()).abs() < 1e-12);
        let c0 = h.grid.cell_of(path.fixations[0].x, path.fixations[0].y).0;
        assert!((sal - base - h.values()[c0].ln()).abs() < 1e-12);
    }

    #[test]
    fn loglik_is_invariant_under_grid_reflection() {
        // H symmetric under x ↦ W − x; reflecting the scanpath leaves the
        // likelihood unchanged.
        let grid = Grid::new(12, 12, [12.0, 12.0]).unwrap();
        let pts = [(3.0, 5.0), (9.0, 5.0), (3.5, 8.0), (8.5, 8.0), (6.0, 2.0), (6.0, 2.5)];
        let h = estimate_saliency(&pts, grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&mut rng);
        let path = random_path(&h, 7, &mut rng);
        let mirrored = Scanpath::new(
            path.fixations.iter().map(|f| Fixation::new(12.0 - f.x, f.y, f.duration_ms)).collect(),
            "s",
            "i",
        );
        let a = loglik(&path, &h, &p, InitPolicy::Excluded).unwrap();
        let b = loglik(&mirrored, &h, &p, InitPolicy::Excluded).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn clamped_fixations_are_counted() {
        let h = test_map(8, 8, 12);
        let path = Scanpath::new(
            vec![Fixation::new(-3.0, 2.0, 200.0), Fixation::new(4.0, 4.0, 200.0), Fixation::new(4.0, 40.0, 200.0)],
            "s",
            "i",
        );
        let (_, d) = loglik_with_diagnostics(&path, &h, &SceneWalkParams::default(), InitPolicy::Excluded).unwrap();
        assert_eq!(d.clamped, 2);
    }

    pub(crate) fn fd_gradient(path: &Scanpath, h: &SaliencyMap, p: &SceneWalkParams, rel_step: f64) -> [f64; N_PARAMS] {
        let theta = p.to_array();
        let mut out = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            let hstep = rel_step * theta[i].abs().max(1e-2);
            let f = |x: f64| {
                let mut t = theta;
                t[i] = x;
                loglik(path, h, &SceneWalkParams::from_array(t), InitPolicy::Excluded).unwrap()
            };
            out[i] = (-f(theta[i] + 2.0 * hstep) + 8.0 * f(theta[i] + hstep) - 8.0 * f(theta[i] - hstep)
                + f(theta[i] - 2.0 * hstep))
                / (12.0 * hstep);
        }
        out
    }

    /// Relative error with an absolute floor of 1e−4 in the denominator.
    pub(crate) fn grad_rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    #[test]
    fn gradient_matches_finite_differences_16() {
        let h = test_map(16, 16, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let mut p = random_params(&mut rng);
            p.c_f = p.c_f.max(0.05);
            let path = random_path(&h, 6, &mut rng);
            let g = grad_loglik(&path, &h, &p).unwrap();
            let n = fd_gradient(&path, &h, &p, 1e-4);
            for i in 0..N_PARAMS {
                assert!(grad_rel_err(g[i], n[i]) < 1e-4, "param {i}: {} vs {} at {p:?}", g[i], n[i]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_32() {
        let h = test_map(32, 32, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let mut p = random_params(&mut rng);
            p.c_f = p.c_f.max(0.05);
            let path = random_path(&h, 6, &mut rng);
            let g = grad_loglik(&path, &h, &p).unwrap();
            let n = fd_gradient(&path, &h, &p, 1e-5);
            for i in 0..N_PARAMS {
                assert!(grad_rel_err(g[i], n[i]) < 1e-3, "param {i}: {} vs {} at {p:?}", g[i], n[i]);
            }
        }
    }

    #[test]
    fn zero_inhibition_weight_gives_zero_gamma_score() {
        let h = test_map(10, 10, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut p = random_params(&mut rng);
        p.c_f = 0.0;
        let path = random_path(&h, 6, &mut rng);
        let g = grad_loglik(&path, &h, &p).unwrap();
        assert_eq!(g[3], 0.0);
        assert_eq!(g[5], 0.0);
        assert_eq!(g[7], 0.0);
    }

    #[test]
    fn zeta_score_at_full_mixture() {
        let h = test_map(10, 10, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut p = random_params(&mut rng);
        p.zeta = 1.0;
        let path = random_path(&h, 6, &mut rng);
        let g = grad_loglik(&path, &h, &p).unwrap();
        // One-sided difference since ζ cannot exceed 1.
        let f = |z: f64| loglik(&path, &h, &SceneWalkParams { zeta: z, ..p }, InitPolicy::Excluded).unwrap();
        let hstep = 1e-5;
        let num = (3.0 * f(1.0) - 4.0 * f(1.0 - hstep) + f(1.0 - 2.0 * hstep)) / (2.0 * hstep);
        assert!(grad_rel_err(g[0], num) < 1e-3, "{} vs {num}", g[0]);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let grid = Grid::new(4, 5, [5.0, 4.0]).unwrap();
        let h = SaliencyMap::uniform(grid);
        let p = SceneWalkParams { zeta: 1.0, ..SceneWalkParams::default() };
        let path = sample_scanpath(&h, &p, 100_001, (1.0, 1.0), DurationSource::Constant(200.0), 3, "s", "i").unwrap();
        let mut counts = [0usize; 20];
        for f in &path.fixations[1..] {
            counts[grid.cell_of(f.x, f.y).0] += 1;
        }
        let n = 100_000.0;
        let (pc, sd) = (1.0 / 20.0, (n * 0.05 * 0.95f64).sqrt());
        for c in counts {
            assert!((c as f64 - n * pc).abs() < 3.5 * sd, "{c}");
        }
    }

    #[test]
    fn inhibition_reduces_refixations() {
        // Uniform saliency isolates the inhibition effect; with peaked
        // saliency a peak cell can out-compete its own inhibition.
        let h = SaliencyMap::uniform(Grid::new(12, 12, [12.0, 12.0]).unwrap());
        let refix = |c_f: f64| {
            let p = SceneWalkParams { c_f, zeta: 0.01, ..SceneWalkParams::default() };
            let path = sample_scanpath(&h, &p, 10_000, (4.0, 4.0), DurationSource::Constant(250.0), 5, "s", "i").unwrap();
            path.fixations.windows(2).filter(|w| w[0].x == w[1].x && w[0].y == w[1].y).count()
        };
        let (free, inhibited) = (refix(0.0), refix(5.0));
        assert!(inhibited < free, "{inhibited} vs {free}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let h = test_map(10, 10, 20);
        let p = SceneWalkParams::default();
        let g = DurationSource::Gamma(GammaParams::new(4.0, 60.0).unwrap());
        let a = sample_scanpath(&h, &p, 30, (5.0, 5.0), g, 42, "s", "i").unwrap();
        let b = sample_scanpath(&h, &p, 30, (5.0, 5.0), g, 42, "s", "i").unwrap();
        assert_eq!(a, b);
    }
}
