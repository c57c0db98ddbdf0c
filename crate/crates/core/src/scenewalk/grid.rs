//! Discrete image grid, saliency maps and Gaussian windows.

use serde::{Deserialize, Serialize};

use crate::dist::apply_floor;
use crate::error::{Error, Result};

/// Floor applied to every saliency entry before renormalization.
pub const SALIENCY_FLOOR: f64 = 1e-12;

/// Regular grid of `rows × cols` cells spanning `[0, width] × [0, height]`
/// degrees. Row `i` covers `y ∈ [i·h, (i+1)·h)` and column `j` covers
/// `x ∈ [j·w, (j+1)·w)` for cell size `w × h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    /// Extent in degrees as `[width, height]`.
    pub extent_deg: [f64; 2],
}

impl Grid {
    pub fn new(rows: usize, cols: usize, extent_deg: [f64; 2]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!("grid must be non-empty, got {rows}x{cols}")));
        }
        if !extent_deg.iter().all(|e| e.is_finite() && *e > 0.0) {
            return Err(Error::InvalidInput(format!(
                "grid extent must be positive, got {extent_deg:?}"
            )));
        }
        Ok(Self { rows, cols, extent_deg })
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_width(&self) -> f64 {
        self.extent_deg[0] / self.cols as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.extent_deg[1] / self.rows as f64
    }

    /// Row-major index of the cell nearest to `(x, y)`, and whether the
    /// position had to be clamped into the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, bool) {
        let fit = |v: f64, size: f64, n: usize| {
            let k = (v / size).floor();
            if k < 0.0 || k.is_nan() {
                (0, true)
            } else if k >= n as f64 {
                (n - 1, true)
            } else {
                (k as usize, false)
            }
        };
        let (j, cx) = fit(x, self.cell_width(), self.cols);
        let (i, cy) = fit(y, self.cell_height(), self.rows);
        (i * self.cols + j, cx || cy)
    }

    /// Center of a cell in degrees.
    pub fn center(&self, idx: usize) -> (f64, f64) {
        let (i, j) = (idx / self.cols, idx % self.cols);
        ((j as f64 + 0.5) * self.cell_width(), (i as f64 + 0.5) * self.cell_height())
    }

    /// Squared distances in degrees² from `(x, y)` to every cell center.
    pub(crate) fn squared_distances(&self, x: f64, y: f64) -> Vec<f64> {
        let (w, h) = (self.cell_width(), self.cell_height());
        let mut out = Vec::with_capacity(self.n_cells());
        for i in 0..self.rows {
            let dy = (i as f64 + 0.5) * h - y;
            for j in 0..self.cols {
                let dx = (j as f64 + 0.5) * w - x;
                out.push(dx * dx + dy * dy);
            }
        }
        out
    }
}

/// Normalized, floored saliency over a grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub grid: Grid,
    values: Vec<f64>,
}

impl SaliencyMap {
    /// Normalizes non-negative `values` and applies the floor.
    pub fn from_values(grid: Grid, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_cells(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("saliency values must be finite and non-negative".into()));
        }
        let total: f64 = values.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("saliency map has zero mass".into()));
        }
        values.iter_mut().for_each(|v| *v /= total);
        apply_floor(&mut values, SALIENCY_FLOOR);
        Ok(Self { grid, values })
    }

    pub fn uniform(grid: Grid) -> Self {
        let n = grid.n_cells();
        Self {
            grid,
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn argmax(&self) -> usize {
        crate::markov::argmax_first(&self.values)
    }
}

fn sample_sd(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Gaussian kernel density estimate of fixation positions on `grid`.
///
/// Per-axis bandwidths follow Scott's rule for two dimensions,
/// `h_k = σ̂_k · n^(−1/6)`. An axis with zero spread (all fixations on one
/// line) uses one cell size as its bandwidth.
pub fn estimate_saliency(fixations: &[(f64, f64)], grid: Grid) -> Result<SaliencyMap> {
    if fixations.len() < 2 {
        return Err(Error::InsufficientData {
            subject: "<pooled>".into(),
            detail: format!("saliency needs at least 2 fixations, got {}", fixations.len()),
        });
    }
    if fixations.iter().any(|(x, y)| !(x.is_finite() && y.is_finite())) {
        return Err(Error::InvalidInput("fixation positions must be finite".into()));
    }
    let sx = sample_sd(fixations.iter().map(|p| p.0));
    let sy = sample_sd(fixations.iter().map(|p| p.1));
    if sx == 0.0 && sy == 0.0 {
        return Err(Error::Degenerate("all fixations coincide; saliency bandwidth is zero".into()));
    }
    let scale = (fixations.len() as f64).powf(-1.0 / 6.0);
    let hx = if sx > 0.0 { sx * scale } else { grid.cell_width() };
    let hy = if sy > 0.0 { sy * scale } else { grid.cell_height() };

    let mut values = vec![0.0; grid.n_cells()];
    for (idx, v) in values.iter_mut().enumerate() {
        let (cx, cy) = grid.center(idx);
        *v = fixations
            .iter()
            .map(|&(x, y)| (-0.5 * (((cx - x) / hx).powi(2) + ((cy - y) / hy).powi(2))).exp())
            .sum();
    }
    if values.iter().sum::<f64>() <= 0.0 {
        // Every fixation is far outside the extent; treat as no information.
        return Ok(SaliencyMap::uniform(grid));
    }
    SaliencyMap::from_values(grid, values)
}

/// Isotropic Gaussian `exp(−r²/(2σ²)) / (2πσ²)` centered at `center`
/// (degrees), evaluated at every cell center.
pub fn gaussian_window(center: (f64, f64), sigma: f64, grid: &Grid) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Domain(format!("window width must be positive, got {sigma}")));
    }
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    Ok(grid
        .squared_distances(center.0, center.1)
        .into_iter()
        .map(|r2| norm * (-r2 / (2.0 * sigma * sigma)).exp())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn grid(n: usize) -> Grid {
        Grid::new(n, n, [n as f64, n as f64]).unwrap()
    }

    #[test]
    fn cell_lookup_and_clamping() {
        let g = Grid::new(4, 8, [16.0, 8.0]).unwrap();
        assert_eq!(g.cell_of(0.1, 0.1), (0, false));
        assert_eq!(g.cell_of(15.9, 7.9), (31, false));
        assert_eq!(g.cell_of(3.0, 5.0), (2 * 8 + 1, false));
        assert_eq!(g.cell_of(-1.0, 3.0), (8, true));
        assert_eq!(g.cell_of(20.0, 20.0), (31, true));
        assert_eq!(g.center(9), (3.0, 3.0));
    }

    #[test]
    fn single_cluster_peaks_at_center() {
        let g = grid(15);
        let c = 7.5;
        let fix = [(c - 0.5, c), (c + 0.5, c), (c, c - 0.5), (c, c + 0.5)];
        let h = estimate_saliency(&fix, g).unwrap();
        assert_eq!(h.argmax(), g.cell_of(c, c).0);
    }

    #[test]
    fn two_clusters_are_mirror_symmetric() {
        let g = grid(16);
        let fix = [(4.0, 8.0), (4.5, 8.5), (3.5, 7.5), (12.0, 8.0), (11.5, 7.5), (12.5, 8.5)];
        let h = estimate_saliency(&fix, g).unwrap();
        let v = h.values();
        for i in 0..16 {
            for j in 0..16 {
                // Reflection x ↦ 16 − x, y ↦ 16 − y swaps the clusters.
                let a = v[i * 16 + j];
                let b = v[(15 - i) * 16 + (15 - j)];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coincident_fixations_are_rejected() {
        let g = grid(8);
        assert!(matches!(estimate_saliency(&[(2.0, 2.0); 5], g), Err(Error::Degenerate(_))));
        assert!(estimate_saliency(&[(2.0, 2.0)], g).is_err());
    }

    #[test]
    fn window_center_and_symmetry() {
        let g = grid(21);
        let sigma = 2.0;
        let w = gaussian_window((10.5, 10.5), sigma, &g).unwrap();
        let center = g.cell_of(10.5, 10.5).0;
        assert_eq!(w[center], 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma));
        assert_eq!(w[center + 3], w[center - 3]);
        assert_eq!(w[center + 3 * 21], w[center + 3]);
        assert_eq!(w[center + 3 * 21 + 4], w[center - 4 * 21 - 3]);
    }

    #[test]
    fn window_integrates_to_one() {
        // Fine cells (0.25 deg) on a 40 deg square with σ = 2.
        let g = Grid::new(160, 160, [40.0, 40.0]).unwrap();
        let w = gaussian_window((20.0, 20.0), 2.0, &g).unwrap();
        let mass: f64 = w.iter().sum::<f64>() * g.cell_width() * g.cell_height();
        assert!((mass - 1.0).abs() < 0.01, "{mass}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn saliency_is_normalized_and_floored(
            pts in proptest::collection::vec((-5.0f64..25.0, -5.0f64..25.0), 2..40)
        ) {
            let g = grid(20);
            if let Ok(h) = estimate_saliency(&pts, g) {
                let s: f64 = h.values().iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(h.values().iter().all(|&v| v >= SALIENCY_FLOOR));
            }
        }
    }
}
