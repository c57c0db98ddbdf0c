//! Limited-memory BFGS minimization with Armijo backtracking.

use std::collections::VecDeque;

use crate::error::Result;

const MEMORY: usize = 7;
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;

pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f`, which returns the value and gradient. Evaluation errors at
/// trial points count as infinitely bad and shrink the step; an error at the
/// starting point is returned. A step must strictly decrease `f`, so a search
/// that stalls at roundoff level ends the run unconverged.
pub(crate) fn minimize(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: Vec<f64>,
    grad_tol: f64,
    max_iter: usize,
) -> Result<Outcome> {
    let (mut fx, mut g) = f(&x0)?;
    let mut x = x0;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut iterations = 0;
    loop {
        if inf_norm(&g) < grad_tol {
            return Ok(Outcome { x, value: fx, grad: g, iterations, converged: true });
        }
        if iterations >= max_iter {
            return Ok(Outcome { x, value: fx, grad: g, iterations, converged: false });
        }

        // Two-loop recursion for d = −H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let scale = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= scale);
        } else {
            let scale = 1.0 / inf_norm(&g).max(1.0);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            history.clear();
            let scale = 1.0 / inf_norm(&g).max(1.0);
            d = g.iter().map(|v| -v * scale).collect();
            slope = dot(&d, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft < fx && ft <= fx + ARMIJO_C * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((xn, fxn, gn)) = accepted else {
            return Ok(Outcome { x, value: fx, grad: g, iterations, converged: false });
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fxn;
        g = gn;
    }
}
