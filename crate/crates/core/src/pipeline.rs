//! The full estimation pipeline. Errors carry the number of the stage that
//! failed:
//!
//! 1. working-independence spline fit
//! 2. local-linear curves from the partial residuals `Y - Xβ̂`
//! 3. smoothed residuals
//! 4. variance curve
//! 5. covariance surface and truncation
//! 6. refit with `V_i = Σ̂_i`
//! 7. updated curves

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{Bandwidth, PipelineConfig, ResidualSource};
use crate::covariance::{build_covariance_model, CovarianceModel, CovarianceSettings};
use crate::data::{validate, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::gee::{beta_se, gamma_given_beta, gamma_to_curves, gee_spline_fit, GeeFit, SeMode, WeightSpec};
use crate::linalg::SpdFactor;
use crate::smoothers::{
    default_candidates, loso_cv, unit_grid, CurveEstimate, Kernel, SmootherKind, SmootherOptions, VcSmoother,
};
use crate::splines::SplineBasis;

/// Points at which all curves are reported.
pub const CURVE_GRID: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidths {
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Subjects whose `Σ̂_i` needed the `pd_floor` ridge.
    pub ridge_repairs: usize,
    /// Local-constant fallbacks across all smoother evaluations.
    pub fallbacks: usize,
    /// Variance grid points raised to the floor.
    pub variance_floored: usize,
    /// `(candidate, score)` pairs from CV, empty for fixed bandwidths.
    pub cv_h1: Vec<(f64, f64)>,
    pub cv_h2: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct EfficientFitResult {
    pub kn: usize,
    pub beta_init: DVector<f64>,
    /// Sandwich standard errors of the working-independence fit.
    pub se_init: DVector<f64>,
    pub beta_eff: DVector<f64>,
    /// Model-based standard errors of the efficient fit.
    pub se_eff: DVector<f64>,
    pub g_spline_init: CurveEstimate,
    pub g_ll_init: CurveEstimate,
    pub g_ll_updated: CurveEstimate,
    pub g_spline_updated: CurveEstimate,
    pub covariance_model: CovarianceModel,
    pub bandwidths: Bandwidths,
    pub iterations: usize,
    pub diagnostics: Diagnostics,
}

/// The independence fit, its local-linear curves and smoothed residuals,
/// shared by every covariance variant.
#[derive(Debug, Clone)]
pub struct Preliminary {
    pub basis: SplineBasis,
    pub fit_init: GeeFit,
    pub h1: f64,
    pub cv_h1: Vec<(f64, f64)>,
    pub g_ll_init: CurveEstimate,
    /// `Y - Xβ̂_I - Z'ĝ(T)`.
    pub smoothed_residuals: Vec<f64>,
    pub fallbacks: usize,
}

impl Preliminary {
    pub fn residuals(&self, source: ResidualSource) -> &[f64] {
        match source {
            ResidualSource::Smoothed => &self.smoothed_residuals,
            ResidualSource::Crude => &self.fit_init.residuals,
        }
    }
}

pub fn smoother_options(cfg: &PipelineConfig) -> SmootherOptions {
    SmootherOptions {
        kernel: Kernel::Epanechnikov,
        ridge_eps: cfg.ridge_eps,
    }
}

fn select_bandwidth(
    ds: &LongitudinalDataset,
    policy: &Bandwidth,
    values: &[f64],
    kind: SmootherKind,
    opts: SmootherOptions,
) -> Result<(f64, Vec<(f64, f64)>)> {
    match policy {
        Bandwidth::Fixed(h) => Ok((*h, Vec::new())),
        Bandwidth::Cv(grid) => {
            let candidates = grid.clone().unwrap_or_else(|| default_candidates(ds));
            let cv = loso_cv(ds, values, &candidates, kind, opts)?;
            Ok((cv.bandwidth, candidates.into_iter().zip(cv.scores).collect()))
        }
    }
}

/// `Y - Xβ` in observation order.
pub fn partial_response(ds: &LongitudinalDataset, beta: &DVector<f64>) -> Vec<f64> {
    let obs = ds.observations();
    (0..obs.len())
        .map(|k| obs.y[k] - obs.x_row(k).iter().zip(beta.iter()).map(|(x, b)| x * b).sum::<f64>())
        .collect()
}

/// Independence fit, bandwidth `h1`, curves and residuals.
pub fn preliminary(ds: &LongitudinalDataset, cfg: &PipelineConfig) -> Result<Preliminary> {
    cfg.check()?;
    let violations = validate(ds);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    let opts = smoother_options(cfg);
    let kn = cfg.spline_dim(ds.n());
    let basis = SplineBasis::new(kn, cfg.spline_degree).map_err(Error::at_step(1))?;
    let fit_init = gee_spline_fit(ds, &basis, WeightSpec::Identity).map_err(Error::at_step(1))?;

    let pseudo = partial_response(ds, &fit_init.beta);
    let (h1, cv_h1) =
        select_bandwidth(ds, &cfg.h1, &pseudo, SmootherKind::VaryingCoefficient, opts).map_err(Error::at_step(2))?;
    let vc = VcSmoother::new(ds, opts);
    let g_ll_init = vc.curve(&unit_grid(CURVE_GRID), h1, &pseudo).map_err(Error::at_step(2))?;
    let mut fallbacks = g_ll_init.fallbacks;

    let smoothed_residuals = match cfg.residuals {
        ResidualSource::Smoothed => {
            let (fitted, fb) = vc.fitted(h1, &pseudo).map_err(Error::at_step(3))?;
            fallbacks += fb;
            pseudo.iter().zip(&fitted).map(|(p, f)| p - f).collect()
        }
        ResidualSource::Crude => Vec::new(),
    };
    Ok(Preliminary {
        basis,
        fit_init,
        h1,
        cv_h1,
        g_ll_init,
        smoothed_residuals,
        fallbacks,
    })
}

/// Variance and covariance smoothing of the given residuals: picks `h2`, sets `h3`, and builds
/// the truncated covariance model.
pub fn covariance_stage(
    ds: &LongitudinalDataset,
    residuals: &[f64],
    h1: f64,
    cfg: &PipelineConfig,
) -> Result<(CovarianceModel, Bandwidths, Vec<(f64, f64)>)> {
    let opts = smoother_options(cfg);
    let (h2, cv_h2) =
        select_bandwidth(ds, &cfg.h2, residuals, SmootherKind::Variance, opts).map_err(Error::at_step(4))?;
    let h3 = cfg.h3_for(h1);
    let settings = CovarianceSettings {
        h2,
        h3,
        lambda_l: cfg.lambda_l,
        grid_size: cfg.cov_grid_size,
        pd_floor: cfg.pd_floor,
        smoother: opts,
    };
    let model = build_covariance_model(ds, residuals, &settings).map_err(Error::at_step(5))?;
    Ok((model, Bandwidths { h1, h2, h3 }, cv_h2))
}

/// `Σ̂_i` for every subject and the number of ridge repairs.
pub fn sigma_hats(ds: &LongitudinalDataset, model: &CovarianceModel) -> (Vec<DMatrix<f64>>, usize) {
    let mut repairs = 0;
    let sig = ds
        .subjects()
        .iter()
        .map(|s| {
            let (m, r) = model.sigma_matrix(&s.times);
            repairs += usize::from(r);
            m
        })
        .collect();
    (sig, repairs)
}

fn relative_change(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    (new - old).norm() / old.norm().max(1e-12)
}

/// Weighted refit and curve updates on a given covariance model. With
/// `max_iter > 1` the residuals, covariance model and refit are recomputed
/// from the latest `β̂` and `ĝ_U`, holding the bandwidths fixed.
pub fn efficient_stage(
    ds: &LongitudinalDataset,
    pre: &Preliminary,
    model: CovarianceModel,
    bandwidths: Bandwidths,
    cv_h2: Vec<(f64, f64)>,
    cfg: &PipelineConfig,
) -> Result<EfficientFitResult> {
    let opts = smoother_options(cfg);
    let mut diagnostics = Diagnostics {
        fallbacks: pre.fallbacks + model.fallbacks,
        variance_floored: model.floored,
        cv_h1: pre.cv_h1.clone(),
        cv_h2,
        ..Diagnostics::default()
    };
    let mut model = model;
    let (mut sigma, repairs) = sigma_hats(ds, &model);
    diagnostics.ridge_repairs = repairs;
    let mut fit_eff = gee_spline_fit(ds, &pre.basis, WeightSpec::Explicit(&sigma)).map_err(Error::at_step(6))?;

    let vc = VcSmoother::new(ds, opts);
    let mut iterations = 1;
    while iterations < cfg.max_iter {
        let pseudo = partial_response(ds, &fit_eff.beta);
        let (fitted, fb) = vc.fitted(bandwidths.h1, &pseudo).map_err(Error::at_step(3))?;
        diagnostics.fallbacks += fb;
        let resid: Vec<f64> = pseudo.iter().zip(&fitted).map(|(p, f)| p - f).collect();
        let settings = CovarianceSettings {
            h2: bandwidths.h2,
            h3: bandwidths.h3,
            lambda_l: model.lambda_l,
            grid_size: cfg.cov_grid_size,
            pd_floor: cfg.pd_floor,
            smoother: opts,
        };
        model = build_covariance_model(ds, &resid, &settings).map_err(Error::at_step(5))?;
        diagnostics.fallbacks += model.fallbacks;
        let (s, r) = sigma_hats(ds, &model);
        sigma = s;
        diagnostics.ridge_repairs = r;
        let next = gee_spline_fit(ds, &pre.basis, WeightSpec::Explicit(&sigma)).map_err(Error::at_step(6))?;
        iterations += 1;
        let change = relative_change(&next.beta, &fit_eff.beta);
        fit_eff = next;
        if change < cfg.iter_tol {
            break;
        }
    }

    let se_eff = beta_se(ds, &fit_eff, &sigma, SeMode::Model).map_err(Error::at_step(6))?;
    let se_init = beta_se(ds, &pre.fit_init, &sigma, SeMode::Sandwich).map_err(Error::at_step(6))?;

    let grid = unit_grid(CURVE_GRID);
    let pseudo = partial_response(ds, &fit_eff.beta);
    let g_ll_updated = vc.curve(&grid, bandwidths.h1, &pseudo).map_err(Error::at_step(7))?;
    diagnostics.fallbacks += g_ll_updated.fallbacks;
    let gamma =
        gamma_given_beta(ds, &pre.basis, &fit_eff.beta, WeightSpec::Explicit(&sigma)).map_err(Error::at_step(7))?;
    let g_spline_updated = CurveEstimate::from_spline(&pre.basis, gamma.as_slice(), grid.clone());

    Ok(EfficientFitResult {
        kn: pre.basis.dim(),
        beta_init: pre.fit_init.beta.clone(),
        se_init,
        beta_eff: fit_eff.beta,
        se_eff,
        g_spline_init: gamma_to_curves(&pre.fit_init, &grid),
        g_ll_init: pre.g_ll_init.clone(),
        g_ll_updated,
        g_spline_updated,
        covariance_model: model,
        bandwidths,
        iterations,
        diagnostics,
    })
}

/// Runs every stage.
pub fn efficient_fit(ds: &LongitudinalDataset, cfg: &PipelineConfig) -> Result<EfficientFitResult> {
    let pre = preliminary(ds, cfg)?;
    let (model, bw, cv_h2) = covariance_stage(ds, pre.residuals(cfg.residuals), pre.h1, cfg)?;
    efficient_stage(ds, &pre, model, bw, cv_h2, cfg)
}

/// Updated local-linear curves: the varying-coefficient smoother applied to
/// `Y - Xβ`.
pub fn update_g_local(
    ds: &LongitudinalDataset,
    beta: &DVector<f64>,
    h1: f64,
    eval_points: &[f64],
    opts: SmootherOptions,
) -> Result<CurveEstimate> {
    VcSmoother::new(ds, opts).curve(eval_points, h1, &partial_response(ds, beta))
}

/// Updated spline curves: `γ̂` with `β` fixed and `V_i = Σ̂_i`.
pub fn spline_g_refit(
    ds: &LongitudinalDataset,
    basis: &SplineBasis,
    beta: &DVector<f64>,
    sigma: &[DMatrix<f64>],
    eval_points: &[f64],
) -> Result<CurveEstimate> {
    let gamma = gamma_given_beta(ds, basis, beta, WeightSpec::Explicit(sigma))?;
    Ok(CurveEstimate::from_spline(basis, gamma.as_slice(), eval_points.to_vec()))
}

/// GEE fit with known per-subject covariances as weights.
#[derive(Debug, Clone)]
pub struct OracleFit {
    pub beta: DVector<f64>,
    pub se: DVector<f64>,
    pub g_spline: CurveEstimate,
}

pub fn oracle_fit(ds: &LongitudinalDataset, sigma: &[DMatrix<f64>], cfg: &PipelineConfig) -> Result<OracleFit> {
    let basis = SplineBasis::new(cfg.spline_dim(ds.n()), cfg.spline_degree)?;
    let fit = gee_spline_fit(ds, &basis, WeightSpec::Explicit(sigma))?;
    let se = beta_se(ds, &fit, sigma, SeMode::Model)?;
    Ok(OracleFit {
        g_spline: gamma_to_curves(&fit, &unit_grid(CURVE_GRID)),
        beta: fit.beta,
        se,
    })
}

/// Pointwise normal-theory bands for a local-linear curve.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseBands {
    pub grid: Vec<f64>,
    pub estimate: DMatrix<f64>,
    pub half_width: DMatrix<f64>,
}

impl PointwiseBands {
    pub fn lower(&self) -> DMatrix<f64> {
        &self.estimate - &self.half_width
    }

    pub fn upper(&self) -> DMatrix<f64> {
        &self.estimate + &self.half_width
    }
}

/// Half-width `z_{(1+level)/2} sqrt(ν₀ [Λ̂₁⁻¹Λ̂₂Λ̂₁⁻¹]_ll / (N₁h))` with
/// `Λ̂₁(t) = (N₁h)⁻¹ Σ K_h Z Z'` and `Λ̂₂` the same moment weighted by
/// `σ̂²(T_ij)`. No bias correction.
pub fn pointwise_ci_g(
    ds: &LongitudinalDataset,
    curve: &CurveEstimate,
    variance: impl Fn(f64) -> f64,
    h1: f64,
    level: f64,
) -> Result<PointwiseBands> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    if !(h1 > 0.0) {
        return Err(Error::Config(format!("bandwidth must be positive, got {h1}")));
    }
    let kernel = Kernel::Epanechnikov;
    let z_crit = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    let obs = ds.observations();
    let q = obs.q;
    let n1 = obs.len() as f64;
    let s2: Vec<f64> = obs.t.iter().map(|&t| variance(t)).collect();
    let mut half = DMatrix::zeros(curve.grid.len(), q);
    for (r, &t0) in curve.grid.iter().enumerate() {
        let mut l1 = DMatrix::<f64>::zeros(q, q);
        let mut l2 = DMatrix::<f64>::zeros(q, q);
        for k in 0..obs.len() {
            let w = kernel.eval((obs.t[k] - t0) / h1);
            if w == 0.0 {
                continue;
            }
            let z = obs.z_row(k);
            for a in 0..q {
                for b in 0..q {
                    let zz = w * z[a] * z[b];
                    l1[(a, b)] += zz;
                    l2[(a, b)] += zz * s2[k];
                }
            }
        }
        l1 /= n1 * h1;
        l2 /= n1 * h1;
        let f = SpdFactor::new(&l1, "Lambda1", 1e-12).map_err(|_| Error::Singular {
            at: format!("t = {t0}"),
        })?;
        let a = f.solve(&l2);
        let psi = f.solve(&a.transpose());
        for l in 0..q {
            half[(r, l)] = z_crit * (kernel.roughness() * psi[(l, l)].max(0.0) / (n1 * h1)).sqrt();
        }
    }
    Ok(PointwiseBands {
        grid: curve.grid.clone(),
        estimate: curve.values.clone(),
        half_width: half,
    })
}

/// Writes `beta.csv`, `curves.csv`, `variance.csv`, `surface.csv`,
/// `cv.csv` and a flat `manifest.txt` of scalar fields into `dir`. The
/// curve table carries 95% pointwise bands for the updated local-linear fit.
pub fn write_result(
    ds: &LongitudinalDataset,
    result: &EfficientFitResult,
    dir: impl AsRef<Path>,
    extra_manifest: &[(String, String)],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join("beta.csv"))?;
    w.write_record(["fit", "coef", "estimate", "se", "wald"])?;
    for (fit, beta, se) in [
        ("independent", &result.beta_init, &result.se_init),
        ("efficient", &result.beta_eff, &result.se_eff),
    ] {
        for k in 0..beta.len() {
            w.write_record([
                fit.to_string(),
                format!("beta{}", k + 1),
                beta[k].to_string(),
                se[k].to_string(),
                (beta[k] / se[k]).to_string(),
            ])?;
        }
    }
    w.flush()?;

    let curves = [
        ("ll_init", &result.g_ll_init),
        ("ll_updated", &result.g_ll_updated),
        ("spline_init", &result.g_spline_init),
        ("spline_updated", &result.g_spline_updated),
    ];
    let q = result.g_ll_init.q();
    let model = &result.covariance_model;
    let half = match pointwise_ci_g(ds, &result.g_ll_updated, |t| model.variance_at(t), result.bandwidths.h1, 0.95) {
        Ok(b) => b.half_width,
        Err(e) => {
            log::warn!("no confidence bands: {e}");
            DMatrix::from_element(result.g_ll_updated.grid.len(), q, f64::NAN)
        }
    };
    let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
    let mut header = vec!["t".to_string()];
    for (name, _) in &curves {
        header.extend((1..=q).map(|l| format!("{name}_g{l}")));
    }
    for side in ["lower", "upper"] {
        header.extend((1..=q).map(|l| format!("ll_updated_{side}_g{l}")));
    }
    w.write_record(&header)?;
    for (r, t) in result.g_ll_init.grid.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        for (_, c) in &curves {
            rec.extend((0..q).map(|l| c.values[(r, l)].to_string()));
        }
        let g = &result.g_ll_updated.values;
        rec.extend((0..q).map(|l| (g[(r, l)] - half[(r, l)]).to_string()));
        rec.extend((0..q).map(|l| (g[(r, l)] + half[(r, l)]).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    result.covariance_model.write_csv(dir)?;

    let mut w = csv::Writer::from_path(dir.join("cv.csv"))?;
    w.write_record(["bandwidth", "candidate", "score"])?;
    for (name, scores) in [("h1", &result.diagnostics.cv_h1), ("h2", &result.diagnostics.cv_h2)] {
        for (h, s) in scores {
            w.write_record([name.to_string(), h.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;

    let d = &result.diagnostics;
    let rep = &result.covariance_model.eigen_report;
    let mut m = String::new();
    for (k, v) in extra_manifest {
        let _ = writeln!(m, "{k}={v}");
    }
    let _ = writeln!(m, "kn={}", result.kn);
    let _ = writeln!(m, "h1={}", result.bandwidths.h1);
    let _ = writeln!(m, "h2={}", result.bandwidths.h2);
    let _ = writeln!(m, "h3={}", result.bandwidths.h3);
    let _ = writeln!(m, "iterations={}", result.iterations);
    let _ = writeln!(m, "lambda_l={}", result.covariance_model.lambda_l);
    let _ = writeln!(m, "eigen_retained={}", rep.retained);
    let _ = writeln!(m, "eigen_zeroed={}", rep.zeroed);
    let _ = writeln!(m, "eigen_min_before={}", rep.min_eig_before);
    let _ = writeln!(m, "ridge_repairs={}", d.ridge_repairs);
    let _ = writeln!(m, "smoother_fallbacks={}", d.fallbacks);
    let _ = writeln!(m, "variance_floored={}", d.variance_floored);
    fs::write(dir.join("manifest.txt"), m)?;
    Ok(())
}
