//! Monte Carlo studies over the estimator variants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{PipelineConfig, ResidualSource};
use crate::covariance::{build_covariance_model, CovarianceSettings};
use crate::error::{Error, Result};
use crate::pipeline::{
    covariance_stage, efficient_stage, oracle_fit, preliminary, smoother_options, Bandwidths, EfficientFitResult,
    CURVE_GRID,
};
use crate::simulate::{mix, simulate_dataset, true_g, SimConfig, Q};
use crate::smoothers::{unit_grid, CurveEstimate};

/// Truncation threshold of the `positive` variant.
pub const POSITIVE_LAMBDA: f64 = 0.05;
/// `h3 / h1` for the `different_h3` variant.
pub const DIFFERENT_H3: f64 = 1.5;
/// Iteration cap of the `iterative` variant when the config asks for one pass.
pub const ITERATIVE_MAX_ITER: usize = 10;
/// Largest tolerated fraction of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Independent,
    Efficient,
    Oracle,
    Crude,
    Positive,
    DifferentH3,
    Iterative,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Independent,
        Variant::Efficient,
        Variant::Oracle,
        Variant::Crude,
        Variant::Positive,
        Variant::DifferentH3,
        Variant::Iterative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Independent => "independent",
            Variant::Efficient => "efficient",
            Variant::Oracle => "oracle",
            Variant::Crude => "crude",
            Variant::Positive => "positive",
            Variant::DifferentH3 => "different_h3",
            Variant::Iterative => "iterative",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// One variant's output in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRep {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    /// Integrated squared error by curve kind.
    pub ise: Vec<(&'static str, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    /// `None` when the replication failed.
    pub error: Option<String>,
    pub variants: BTreeMap<Variant, VariantRep>,
    /// Subjects needing the ridge repair in the efficient fit.
    pub ridge_repairs: usize,
    pub subjects: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub bias: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub emp_sd: Vec<f64>,
    pub coverage: Vec<f64>,
    /// Mean integrated squared error by curve kind.
    pub mise: Vec<(&'static str, f64)>,
}

#[derive(Debug, Clone)]
pub struct McSummary {
    pub n: usize,
    pub rho: f64,
    pub beta0: Vec<f64>,
    pub reps: usize,
    pub failures: usize,
    pub variants: Vec<VariantSummary>,
    /// Median over replications of `‖β̂_iter - β̂_eff‖∞`.
    pub iter_delta_median: Option<f64>,
    /// Fraction of subjects whose `Σ̂_i` needed the ridge repair.
    pub ridge_repair_rate: f64,
    pub runtime_secs: f64,
    pub records: Vec<RepRecord>,
}

impl McSummary {
    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }
}

/// `(1/q) Σ_l ∫ (ĝ_l - g₀_l)²` by the trapezoid rule on the curve grid.
pub fn integrated_squared_error(curve: &CurveEstimate) -> f64 {
    let grid = &curve.grid;
    let q = curve.q().min(Q);
    let mut total = 0.0;
    for l in 0..q {
        let sq: Vec<f64> = grid
            .iter()
            .enumerate()
            .map(|(r, &t)| (curve.values[(r, l)] - true_g(t)[l]).powi(2))
            .collect();
        total += sq
            .windows(2)
            .zip(grid.windows(2))
            .map(|(e, t)| 0.5 * (e[0] + e[1]) * (t[1] - t[0]))
            .sum::<f64>();
    }
    total / q as f64
}

fn pipeline_rep(r: &EfficientFitResult, init: bool) -> VariantRep {
    let mut ise = Vec::new();
    if init {
        ise.push(("ll_initial", integrated_squared_error(&r.g_ll_init)));
        ise.push(("spline_initial", integrated_squared_error(&r.g_spline_init)));
    } else {
        ise.push(("ll_refined", integrated_squared_error(&r.g_ll_updated)));
        ise.push(("spline_refined", integrated_squared_error(&r.g_spline_updated)));
    }
    let (beta, se) = if init {
        (&r.beta_init, &r.se_init)
    } else {
        (&r.beta_eff, &r.se_eff)
    };
    VariantRep {
        beta: beta.as_slice().to_vec(),
        se: se.as_slice().to_vec(),
        ise,
    }
}

fn run_rep(sim: &SimConfig, rep: usize, variants: &[Variant], cfg: &PipelineConfig) -> RepRecord {
    let seed = mix(sim.seed, rep as u64);
    let mut record = RepRecord {
        rep,
        seed,
        error: None,
        variants: BTreeMap::new(),
        ridge_repairs: 0,
        subjects: sim.n,
    };
    if let Err(e) = fit_rep(sim, seed, variants, cfg, &mut record) {
        log::debug!("replication {rep} failed: {e}");
        record.error = Some(e.to_string());
        record.variants.clear();
    }
    record
}

fn fit_rep(sim: &SimConfig, seed: u64, variants: &[Variant], cfg: &PipelineConfig, out: &mut RepRecord) -> Result<()> {
    let sim = SimConfig { seed, ..sim.clone() };
    let (ds, truth) = simulate_dataset(&sim)?;
    let wants = |v: Variant| variants.contains(&v);

    if wants(Variant::Oracle) {
        let o = oracle_fit(&ds, &truth.sigma, cfg)?;
        out.variants.insert(
            Variant::Oracle,
            VariantRep {
                beta: o.beta.as_slice().to_vec(),
                se: o.se.as_slice().to_vec(),
                ise: vec![("spline_refined", integrated_squared_error(&o.g_spline))],
            },
        );
    }

    let needs_base = variants.iter().any(|v| !matches!(v, Variant::Oracle | Variant::Crude));
    let base_cfg = PipelineConfig {
        residuals: ResidualSource::Smoothed,
        max_iter: 1,
        ..cfg.clone()
    };
    let pre = if needs_base || wants(Variant::Crude) {
        Some(preliminary(&ds, &base_cfg)?)
    } else {
        None
    };

    if needs_base {
        let pre = pre.as_ref().expect("preliminary fit");
        let (model, bw, cv_h2) = covariance_stage(&ds, &pre.smoothed_residuals, pre.h1, &base_cfg)?;
        let eff = efficient_stage(&ds, pre, model.clone(), bw, cv_h2.clone(), &base_cfg)?;
        out.ridge_repairs = eff.diagnostics.ridge_repairs;
        if wants(Variant::Independent) {
            out.variants.insert(Variant::Independent, pipeline_rep(&eff, true));
        }
        if wants(Variant::Efficient) {
            out.variants.insert(Variant::Efficient, pipeline_rep(&eff, false));
        }
        if wants(Variant::Positive) {
            let m = model.retruncate(POSITIVE_LAMBDA);
            let r = efficient_stage(&ds, pre, m, bw, cv_h2.clone(), &base_cfg)?;
            out.variants.insert(Variant::Positive, pipeline_rep(&r, false));
        }
        if wants(Variant::DifferentH3) {
            let h3 = DIFFERENT_H3 * bw.h1;
            let settings = CovarianceSettings {
                h2: bw.h2,
                h3,
                lambda_l: base_cfg.lambda_l,
                grid_size: base_cfg.cov_grid_size,
                pd_floor: base_cfg.pd_floor,
                smoother: smoother_options(&base_cfg),
            };
            let m = build_covariance_model(&ds, &pre.smoothed_residuals, &settings)?;
            let bw3 = Bandwidths { h3, ..bw };
            let r = efficient_stage(&ds, pre, m, bw3, cv_h2.clone(), &base_cfg)?;
            out.variants.insert(Variant::DifferentH3, pipeline_rep(&r, false));
        }
        if wants(Variant::Iterative) {
            let it_cfg = PipelineConfig {
                max_iter: if cfg.max_iter > 1 { cfg.max_iter } else { ITERATIVE_MAX_ITER },
                ..base_cfg.clone()
            };
            let r = efficient_stage(&ds, pre, model, bw, cv_h2, &it_cfg)?;
            out.variants.insert(Variant::Iterative, pipeline_rep(&r, false));
        }
    }

    if wants(Variant::Crude) {
        let pre = pre.as_ref().expect("preliminary fit");
        let crude_cfg = PipelineConfig {
            residuals: ResidualSource::Crude,
            ..base_cfg.clone()
        };
        let (model, bw, cv_h2) = covariance_stage(&ds, &pre.fit_init.residuals, pre.h1, &crude_cfg)?;
        let r = efficient_stage(&ds, pre, model, bw, cv_h2, &crude_cfg)?;
        out.variants.insert(Variant::Crude, pipeline_rep(&r, false));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0)).sqrt()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Runs `reps` replications with seeds `mix(sim.seed, r)` on a pool of
/// `workers` threads; results are aggregated in replication order, so the
/// summary does not depend on `workers`.
pub fn mc_study(
    sim: &SimConfig,
    reps: usize,
    variants: &[Variant],
    cfg: &PipelineConfig,
    workers: usize,
) -> Result<McSummary> {
    if reps < 2 {
        return Err(Error::Config("at least two replications are needed".into()));
    }
    if variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    sim.check()?;
    cfg.check()?;
    let mut variants = variants.to_vec();
    variants.sort();
    variants.dedup();

    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let records: Vec<RepRecord> =
        pool.install(|| (0..reps).into_par_iter().map(|r| run_rep(sim, r, &variants, cfg)).collect());

    let failures = records.iter().filter(|r| r.error.is_some()).count();
    if failures as f64 > MAX_FAILURE_RATE * reps as f64 {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: reps,
        });
    }
    let ok: Vec<&RepRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let z = Normal::standard().inverse_cdf(0.975);
    let p = sim.p();

    let summaries = variants
        .iter()
        .map(|&v| {
            let reps: Vec<&VariantRep> = ok.iter().filter_map(|r| r.variants.get(&v)).collect();
            let mut s = VariantSummary {
                variant: v,
                bias: vec![0.0; p],
                mean_se: vec![0.0; p],
                emp_sd: vec![0.0; p],
                coverage: vec![0.0; p],
                mise: Vec::new(),
            };
            for k in 0..p {
                let b: Vec<f64> = reps.iter().map(|r| r.beta[k]).collect();
                let se: Vec<f64> = reps.iter().map(|r| r.se[k]).collect();
                s.bias[k] = mean(&b) - sim.beta0[k];
                s.mean_se[k] = mean(&se);
                s.emp_sd[k] = sd(&b);
                let hits = b
                    .iter()
                    .zip(&se)
                    .filter(|(b, se)| (*b - sim.beta0[k]).abs() <= z * *se)
                    .count();
                s.coverage[k] = hits as f64 / b.len() as f64;
            }
            if let Some(first) = reps.first() {
                for (j, (kind, _)) in first.ise.iter().enumerate() {
                    let v: Vec<f64> = reps.iter().map(|r| r.ise[j].1).collect();
                    s.mise.push((kind, mean(&v)));
                }
            }
            s
        })
        .collect();

    let iter_delta_median = if variants.contains(&Variant::Iterative) && variants.contains(&Variant::Efficient) {
        median(
            ok.iter()
                .map(|r| {
                    let a = DVector::from_column_slice(&r.variants[&Variant::Iterative].beta);
                    let b = DVector::from_column_slice(&r.variants[&Variant::Efficient].beta);
                    (a - b).amax()
                })
                .collect(),
        )
    } else {
        None
    };
    let subjects: usize = ok.iter().map(|r| r.subjects).sum();
    let repairs: usize = ok.iter().map(|r| r.ridge_repairs).sum();

    Ok(McSummary {
        n: sim.n,
        rho: sim.rho,
        beta0: sim.beta0.clone(),
        reps,
        failures,
        variants: summaries,
        iter_delta_median,
        ridge_repair_rate: if subjects > 0 { repairs as f64 / subjects as f64 } else { 0.0 },
        runtime_secs: start.elapsed().as_secs_f64(),
        records,
    })
}

/// `x` with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = 5 - mag;
    if (0..=12).contains(&decimals) {
        format!("{:.*}", decimals as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Renders the summary. Runtime is left out so that renders are
/// reproducible.
pub fn report(summary: &McSummary, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => report_csv(summary),
        ReportFormat::Markdown => report_markdown(summary),
    }
}

fn report_csv(s: &McSummary) -> String {
    let mut out = String::from("n,rho,variant,quantity,bias,se,sd,coverage,mise\n");
    for v in &s.variants {
        for k in 0..s.beta0.len() {
            let _ = writeln!(
                out,
                "{},{},{},beta{},{},{},{},{},",
                s.n,
                s.rho,
                v.variant.name(),
                k + 1,
                sig6(v.bias[k]),
                sig6(v.mean_se[k]),
                sig6(v.emp_sd[k]),
                sig6(v.coverage[k]),
            );
        }
        for (kind, m) in &v.mise {
            let _ = writeln!(out, "{},{},{},{kind},,,,,{}", s.n, s.rho, v.variant.name(), sig6(*m));
        }
    }
    let _ = writeln!(out, "{},{},all,reps,,,,,{}", s.n, s.rho, s.reps);
    let _ = writeln!(out, "{},{},all,failures,,,,,{}", s.n, s.rho, s.failures);
    if let Some(d) = s.iter_delta_median {
        let _ = writeln!(out, "{},{},iterative,median_delta_inf,,,,,{}", s.n, s.rho, sig6(d));
    }
    let _ = writeln!(out, "{},{},efficient,ridge_repair_rate,,,,,{}", s.n, s.rho, sig6(s.ridge_repair_rate));
    out
}

fn report_markdown(s: &McSummary) -> String {
    let mut out = String::new();
    let _ = write!(out, "| n | rho | coef |");
    for v in &s.variants {
        let _ = write!(out, " {} bias | {} SE | {} SD | {} CP |", v.variant.name(), v.variant.name(), v.variant.name(), v.variant.name());
    }
    out.push('\n');
    let _ = write!(out, "|---|---|---|");
    for _ in &s.variants {
        out.push_str("---|---|---|---|");
    }
    out.push('\n');
    for k in 0..s.beta0.len() {
        let _ = write!(out, "| {} | {} | beta{} |", s.n, s.rho, k + 1);
        for v in &s.variants {
            let _ = write!(
                out,
                " {} | {} | {} | {} |",
                sig6(v.bias[k]),
                sig6(v.mean_se[k]),
                sig6(v.emp_sd[k]),
                sig6(v.coverage[k])
            );
        }
        out.push('\n');
    }
    let with_mise: Vec<&VariantSummary> = s.variants.iter().filter(|v| !v.mise.is_empty()).collect();
    if !with_mise.is_empty() {
        out.push_str("\n| variant | curve | MISE |\n|---|---|---|\n");
        for v in with_mise {
            for (kind, m) in &v.mise {
                let _ = writeln!(out, "| {} | {kind} | {} |", v.variant.name(), sig6(*m));
            }
        }
    }
    let _ = writeln!(out, "\n{} replications, {} failed.", s.reps, s.failures);
    out
}

/// One row per replication and variant.
pub fn write_raw<W: Write>(s: &McSummary, writer: W) -> Result<()> {
    let p = s.beta0.len();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["rep".to_string(), "seed".into(), "variant".into(), "status".into()];
    header.extend((1..=p).map(|k| format!("beta{k}")));
    header.extend((1..=p).map(|k| format!("se{k}")));
    header.extend(["curve".to_string(), "ise".into()]);
    w.write_record(&header)?;
    for r in &s.records {
        if let Some(e) = &r.error {
            let mut rec = vec![r.rep.to_string(), r.seed.to_string(), String::new(), format!("failed: {e}")];
            rec.extend(std::iter::repeat_n(String::new(), 2 * p + 2));
            w.write_record(&rec)?;
            continue;
        }
        for (v, vr) in &r.variants {
            let curves: Vec<(&str, String)> = if vr.ise.is_empty() {
                vec![("", String::new())]
            } else {
                vr.ise.iter().map(|(k, e)| (*k, e.to_string())).collect()
            };
            for (kind, ise) in curves {
                let mut rec = vec![r.rep.to_string(), r.seed.to_string(), v.name().to_string(), "ok".into()];
                rec.extend(vr.beta.iter().map(f64::to_string));
                rec.extend(vr.se.iter().map(f64::to_string));
                rec.push(kind.to_string());
                rec.push(ise);
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Curve grid used for integrated squared errors.
pub fn curve_grid() -> Vec<f64> {
    unit_grid(CURVE_GRID)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Bandwidth, SplineDim};

    fn quick_cfg() -> PipelineConfig {
        PipelineConfig {
            h1: Bandwidth::Fixed(0.12),
            h2: Bandwidth::Fixed(0.12),
            cov_grid_size: 31,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(0.0366123456), "0.0366123");
        assert_eq!(sig6(-5.0), "-5.00000");
        assert_eq!(sig6(123456.7), "123457");
        let x = 1.234567e-20;
        assert!((sig6(x).parse::<f64>().unwrap() - x).abs() < 1e-25);
    }

    #[test]
    fn ise_of_truth_is_zero() {
        let grid = curve_grid();
        let values = nalgebra::DMatrix::from_fn(grid.len(), Q, |r, l| true_g(grid[r])[l]);
        let c = CurveEstimate::from_grid(grid.clone(), values.clone(), 0);
        assert_eq!(integrated_squared_error(&c), 0.0);
        let shifted = CurveEstimate::from_grid(grid, values.add_scalar(0.5), 0);
        assert!((integrated_squared_error(&shifted) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn vanishing_noise_oracle() {
        let sim = SimConfig {
            omega: 1e-6,
            ..SimConfig::standard(100, 0.4, 1)
        };
        // a rich basis so spline approximation error does not masquerade as bias
        let cfg = PipelineConfig {
            kn: SplineDim::Fixed(10),
            ..quick_cfg()
        };
        let s = mc_study(&sim, 3, &[Variant::Oracle], &cfg, 1).unwrap();
        let o = s.variant(Variant::Oracle).unwrap();
        assert!(o.bias.iter().all(|b| b.abs() < 1e-3));
        assert!(o.mean_se.iter().all(|se| *se < 1e-3));
        assert_eq!(s.failures, 0);
    }

    #[test]
    fn reports_are_deterministic_across_workers() {
        let sim = SimConfig::standard(30, 0.4, 5);
        let vs = [Variant::Independent, Variant::Efficient];
        let a = mc_study(&sim, 3, &vs, &quick_cfg(), 1).unwrap();
        let b = mc_study(&sim, 3, &vs, &quick_cfg(), 3).unwrap();
        assert_eq!(report(&a, ReportFormat::Csv), report(&b, ReportFormat::Csv));
        let md = report(&a, ReportFormat::Markdown);
        assert_eq!(md.lines().filter(|l| l.starts_with("| 30 |")).count(), 4);
        let mut raw = Vec::new();
        write_raw(&a, &mut raw).unwrap();
        assert!(String::from_utf8(raw).unwrap().lines().count() > 1);
        assert!(mc_study(&sim, 1, &vs, &quick_cfg(), 1).is_err());
    }
}
