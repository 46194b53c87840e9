//! Nonparametric within-subject covariance: smoothed variance curve,
//! smoothed covariance surface truncated to be positive semidefinite, and
//! per-subject covariance matrices assembled from both.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::LongitudinalDataset;
use crate::error::Result;
use crate::linalg::{cholesky_in_place, min_eigenvalue, symmetrize};
use crate::smoothers::{bracket, unit_grid, CovSmoother, SmootherOptions, VarianceSmoother};

/// Fraction of the median positive variance used as the variance floor.
pub const VARIANCE_FLOOR_FRACTION: f64 = 0.05;

/// Smallest nugget `σ̂²(t) - σ̂(t, t)` allowed in `Σ̂_i`, as a fraction of
/// `σ̂²(t)`.
pub const NUGGET_FLOOR_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenReport {
    pub retained: usize,
    pub zeroed: usize,
    pub min_eig_before: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceSettings {
    pub h2: f64,
    pub h3: f64,
    pub lambda_l: f64,
    pub grid_size: usize,
    pub pd_floor: f64,
    pub smoother: SmootherOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    pub grid: Vec<f64>,
    /// `σ̂²` on `grid`, floored to be positive.
    pub variance: Vec<f64>,
    /// Symmetrized smoothed surface before truncation.
    pub raw_surface: DMatrix<f64>,
    /// Truncated surface used for the off-diagonal entries.
    pub surface: DMatrix<f64>,
    pub lambda_l: f64,
    pub pd_floor: f64,
    pub eigen_report: EigenReport,
    /// Grid points where the variance floor was applied.
    pub floored: usize,
    /// Grid evaluations that used the local-constant fallback.
    pub fallbacks: usize,
}

/// Trapezoid quadrature weights on a sorted grid.
fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let g = grid.len();
    if g == 1 {
        return vec![1.0];
    }
    (0..g)
        .map(|k| {
            let left = if k > 0 { grid[k] - grid[k - 1] } else { 0.0 };
            let right = if k + 1 < g { grid[k + 1] - grid[k] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Zeroes the eigenvalues `<= lambda_l` of the integral operator with kernel
/// `surface` on `grid` (trapezoid rule) and rebuilds the kernel.
pub fn truncate_surface(surface: &DMatrix<f64>, grid: &[f64], lambda_l: f64) -> (DMatrix<f64>, EigenReport) {
    let g = grid.len();
    let d: Vec<f64> = trapezoid_weights(grid).iter().map(|w| w.sqrt()).collect();
    let m = DMatrix::from_fn(g, g, |a, b| d[a] * surface[(a, b)] * d[b]);
    let eig = SymmetricEigen::new(symmetrize(&m));
    let min_eig_before = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out = DMatrix::zeros(g, g);
    let mut retained = 0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= lambda_l {
            continue;
        }
        retained += 1;
        let v = eig.eigenvectors.column(k);
        out.ger(lam, &v, &v, 1.0);
    }
    let mut rebuilt = DMatrix::from_fn(g, g, |a, b| out[(a, b)] / (d[a] * d[b]));
    rebuilt = symmetrize(&rebuilt);
    if retained == 0 {
        log::warn!("covariance truncation zeroed every eigenvalue (lambda_L = {lambda_l})");
    }
    (
        rebuilt,
        EigenReport {
            retained,
            zeroed: g - retained,
            min_eig_before,
        },
    )
}

fn floor_variance(values: &mut [f64], pd_floor: f64) -> usize {
    let mut pos: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    let floor = if pos.is_empty() {
        pd_floor
    } else {
        pos.sort_by(f64::total_cmp);
        let n = pos.len();
        let median = if n % 2 == 1 {
            pos[n / 2]
        } else {
            0.5 * (pos[n / 2 - 1] + pos[n / 2])
        };
        VARIANCE_FLOOR_FRACTION * median
    };
    let mut count = 0;
    for v in values.iter_mut() {
        if !(*v >= floor) {
            *v = floor;
            count += 1;
        }
    }
    count
}

/// Smooths the residual squares (bandwidth `h2`) and cross-products
/// (bandwidth `h3`) on a `grid_size` grid and truncates the surface.
pub fn build_covariance_model(
    ds: &LongitudinalDataset,
    residuals: &[f64],
    settings: &CovarianceSettings,
) -> Result<CovarianceModel> {
    let grid = unit_grid(settings.grid_size);
    let var_sm = VarianceSmoother::new(ds, residuals, settings.smoother)?;
    let mut variance = Vec::with_capacity(grid.len());
    let mut fallbacks = 0;
    for &t in &grid {
        let (v, fb) = var_sm.at(t, settings.h2)?;
        variance.push(v);
        fallbacks += usize::from(fb);
    }
    let floored = floor_variance(&mut variance, settings.pd_floor);
    if floored > 0 {
        log::debug!("variance floor applied at {floored} grid points");
    }
    let cov_sm = CovSmoother::new(ds, residuals, settings.smoother)?;
    let (raw, fb) = cov_sm.surface(&grid, settings.h3)?;
    fallbacks += fb;
    let raw_surface = symmetrize(&raw);
    let (surface, eigen_report) = truncate_surface(&raw_surface, &grid, settings.lambda_l);
    Ok(CovarianceModel {
        grid,
        variance,
        raw_surface,
        surface,
        lambda_l: settings.lambda_l,
        pd_floor: settings.pd_floor,
        eigen_report,
        floored,
        fallbacks,
    })
}

impl CovarianceModel {
    /// Same model with the raw surface truncated at a different threshold.
    pub fn retruncate(&self, lambda_l: f64) -> Self {
        let (surface, eigen_report) = truncate_surface(&self.raw_surface, &self.grid, lambda_l);
        Self {
            surface,
            eigen_report,
            lambda_l,
            ..self.clone()
        }
    }

    pub fn variance_at(&self, t: f64) -> f64 {
        let (i, w) = bracket(&self.grid, t);
        if w == 0.0 {
            self.variance[i]
        } else {
            (1.0 - w) * self.variance[i] + w * self.variance[i + 1]
        }
    }

    /// Bilinear interpolation of the truncated surface.
    pub fn covariance_at(&self, s: f64, t: f64) -> f64 {
        let (a, wa) = bracket(&self.grid, s);
        let (b, wb) = bracket(&self.grid, t);
        let g = self.grid.len();
        let a1 = (a + 1).min(g - 1);
        let b1 = (b + 1).min(g - 1);
        let f = &self.surface;
        (1.0 - wa) * ((1.0 - wb) * f[(a, b)] + wb * f[(a, b1)]) + wa * ((1.0 - wb) * f[(a1, b)] + wb * f[(a1, b1)])
    }

    /// `Σ̂_i` at the given times, and whether the `pd_floor` ridge repair was
    /// applied.
    pub fn sigma_matrix(&self, times: &[f64]) -> (DMatrix<f64>, bool) {
        let m = times.len();
        let mut sig = DMatrix::zeros(m, m);
        for a in 0..m {
            // the nugget σ̂²(t) - σ̂(t, t) is kept but held above a small
            // fraction of σ̂²(t)
            let v = self.variance_at(times[a]);
            let c = self.covariance_at(times[a], times[a]);
            sig[(a, a)] = c + (v - c).max(NUGGET_FLOOR_FRACTION * v);
            for b in a + 1..m {
                let (s, t) = if times[a] <= times[b] {
                    (times[a], times[b])
                } else {
                    (times[b], times[a])
                };
                let v = self.covariance_at(s, t);
                sig[(a, b)] = v;
                sig[(b, a)] = v;
            }
        }
        let repaired = repair(&mut sig, self.pd_floor);
        (sig, repaired)
    }

    /// Writes `variance.csv` (`t,sigma2`) and `surface.csv` (`s,t,cov`).
    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut w = BufWriter::new(File::create(dir.join("variance.csv"))?);
        writeln!(w, "t,sigma2")?;
        for (t, v) in self.grid.iter().zip(&self.variance) {
            writeln!(w, "{t},{v}")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("surface.csv"))?);
        writeln!(w, "s,t,cov")?;
        for (a, s) in self.grid.iter().enumerate() {
            for (b, t) in self.grid.iter().enumerate() {
                writeln!(w, "{s},{t},{}", self.surface[(a, b)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Adds `(pd_floor - λ_min) I` when `λ_min < pd_floor`.
pub fn repair(sig: &mut DMatrix<f64>, pd_floor: f64) -> bool {
    let m = sig.nrows();
    // cheap test first: Σ - pd_floor I positive definite
    let mut shifted: Vec<f64> = (0..m * m)
        .map(|k| {
            let (r, c) = (k / m, k % m);
            sig[(r, c)] - if r == c { pd_floor } else { 0.0 }
        })
        .collect();
    if cholesky_in_place(&mut shifted, m).is_some() {
        return false;
    }
    let lam = min_eigenvalue(sig);
    if lam >= pd_floor {
        return false;
    }
    for k in 0..m {
        sig[(k, k)] += pd_floor - lam;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(surface: DMatrix<f64>, variance: f64, lambda_l: f64) -> CovarianceModel {
        let g = surface.nrows();
        let grid = unit_grid(g);
        let (trunc, eigen_report) = truncate_surface(&surface, &grid, lambda_l);
        CovarianceModel {
            variance: vec![variance; g],
            raw_surface: surface,
            surface: trunc,
            grid,
            lambda_l,
            pd_floor: 1e-8,
            eigen_report,
            floored: 0,
            fallbacks: 0,
        }
    }

    fn ar_surface(g: usize, omega: f64, rho: f64) -> DMatrix<f64> {
        let grid = unit_grid(g);
        DMatrix::from_fn(g, g, |a, b| omega * rho.powf((grid[a] - grid[b]).abs()))
    }

    #[test]
    fn psd_surface_is_unchanged() {
        let s = ar_surface(21, 4.95, 0.4);
        let (t, rep) = truncate_surface(&s, &unit_grid(21), 0.0);
        assert!((&t - &s).amax() < 1e-9);
        assert_eq!(rep.retained, 21);
        assert!(rep.min_eig_before > 0.0);
    }

    #[test]
    fn small_rank_one_surface_is_zeroed() {
        // operator eigenvalue of v v' is sum_k w_k v_k^2
        let g = 21;
        let grid = unit_grid(g);
        let w = trapezoid_weights(&grid);
        let v: Vec<f64> = grid.iter().map(|t| 1.0 + t).collect();
        let norm: f64 = v.iter().zip(&w).map(|(a, b)| a * a * b).sum();
        let c = 0.04 / norm;
        let s = DMatrix::from_fn(g, g, |a, b| c * v[a] * v[b]);
        let (t, rep) = truncate_surface(&s, &grid, 0.05);
        assert!(t.amax() < 1e-15);
        assert_eq!(rep.retained, 0);
        let (t, rep) = truncate_surface(&s, &grid, 0.03);
        assert_eq!(rep.retained, 1);
        assert!((&t - &s).amax() < 1e-12);
    }

    #[test]
    fn truncation_idempotent_and_monotone() {
        let g = 31;
        let grid = unit_grid(g);
        // indefinite: AR plus a negative rank-one part
        let mut s = ar_surface(g, 2.0, 0.3);
        for a in 0..g {
            for b in 0..g {
                s[(a, b)] -= 1.5 * (3.0 * grid[a]).sin() * (3.0 * grid[b]).sin();
            }
        }
        let (once, rep) = truncate_surface(&s, &grid, 0.0);
        assert!(rep.min_eig_before < 0.0);
        assert!(rep.zeroed > 0);
        let (twice, _) = truncate_surface(&once, &grid, 0.0);
        assert!((&once - &twice).amax() < 1e-9);
        assert!((&once - once.transpose()).amax() < 1e-10);
        let d: Vec<f64> = trapezoid_weights(&grid).iter().map(|w| w.sqrt()).collect();
        let m = DMatrix::from_fn(g, g, |a, b| d[a] * once[(a, b)] * d[b]);
        assert!(min_eigenvalue(&m) > -1e-10);
        let mut last = usize::MAX;
        for lam in [0.0, 0.01, 0.05, 0.2, 1.0, 10.0] {
            let (_, r) = truncate_surface(&s, &grid, lam);
            assert!(r.retained <= last);
            last = r.retained;
        }
    }

    #[test]
    fn sigma_matrix_cases() {
        let g = 11;
        let m = model(DMatrix::from_element(g, g, 0.5), 2.0, 0.0);
        let (s, rep) = m.sigma_matrix(&[0.3]);
        assert_eq!(s.shape(), (1, 1));
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12 && !rep);

        // compound symmetry: v I + c (J - I), λ_min = v - c
        let (s, rep) = m.sigma_matrix(&[0.37; 4]);
        assert!(!rep);
        for a in 0..4 {
            for b in 0..4 {
                let want = if a == b { 2.0 } else { 0.5 };
                assert!((s[(a, b)] - want).abs() < 1e-12);
            }
        }
        assert!((min_eigenvalue(&s) - 1.5).abs() < 1e-12);

        // surface above the variance: the nugget is held at its floor
        let m = model(DMatrix::from_element(g, g, 3.0), 2.0, 0.0);
        let (s, rep) = m.sigma_matrix(&[0.5; 3]);
        assert!(!rep);
        assert!((s[(0, 0)] - (3.0 + NUGGET_FLOOR_FRACTION * 2.0)).abs() < 1e-12);
        assert!((min_eigenvalue(&s) - NUGGET_FLOOR_FRACTION * 2.0).abs() < 1e-12);

        // a vanishing nugget leaves repeated times singular
        let m = model(DMatrix::from_element(g, g, 1.0), 1e-12, 0.0);
        let (s, rep) = m.sigma_matrix(&[0.5; 3]);
        assert!(rep);
        assert!(min_eigenvalue(&s) >= m.pd_floor - 1e-12);

        // grid nodes reproduce the surface
        let m = model(ar_surface(g, 4.95, 0.4), 4.95, 0.0);
        let nodes = [0.0, 0.3, 0.7, 1.0];
        let (s, _) = m.sigma_matrix(&nodes);
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    let (i, j) = ((nodes[a] * 10.0_f64).round() as usize, (nodes[b] * 10.0_f64).round() as usize);
                    assert!((s[(a, b)] - m.surface[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn variance_floor() {
        let mut v = vec![-1.0, 0.0, 1.0, 2.0, 3.0];
        assert_eq!(floor_variance(&mut v, 1e-8), 2);
        assert_eq!(v, vec![0.1, 0.1, 1.0, 2.0, 3.0]);
        let mut v = vec![-1.0, 0.0];
        floor_variance(&mut v, 1e-8);
        assert_eq!(v, vec![1e-8, 1e-8]);
    }
}
