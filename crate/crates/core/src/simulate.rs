//! Synthetic longitudinal designs with exponential within-subject
//! covariance `ω ρ^{|s-t|}`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{LongitudinalDataset, Subject};
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;

/// Number of coefficient functions in [`true_g`].
pub const Q: usize = 4;

/// Distribution of the Gaussian covariates (all except the intercept).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateSpec {
    StandardNormal,
    /// Standard normal conditioned on `|x| <= bound` (by rejection).
    Truncated { bound: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    Bounded,
    /// `ceil(C n^{3/8})` subjects get `ceil(B n^{1/8} m_i)` equispaced times.
    Diverging { b: f64, c: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub m0: usize,
    pub mr: usize,
    pub binom_p: f64,
    pub rho: f64,
    pub omega: f64,
    pub beta0: Vec<f64>,
    pub covariates: CovariateSpec,
    pub scenario: Scenario,
    pub seed: u64,
}

impl SimConfig {
    /// `m_i = 6 + Bin(6, 0.65)`, `ω = 4.95`, `β₀ = (5, 5, -5, -5)`,
    /// covariates truncated at 2.5.
    pub fn standard(n: usize, rho: f64, seed: u64) -> Self {
        Self {
            n,
            m0: 6,
            mr: 6,
            binom_p: 0.65,
            rho,
            omega: 4.95,
            beta0: vec![5.0, 5.0, -5.0, -5.0],
            covariates: CovariateSpec::Truncated { bound: 2.5 },
            scenario: Scenario::Bounded,
            seed,
        }
    }

    pub fn p(&self) -> usize {
        self.beta0.len()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n < 2 {
            return bad("n must be >= 2");
        }
        if self.m0 < 1 {
            return bad("m0 must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.binom_p) {
            return bad("binom_p must lie in [0, 1]");
        }
        // ρ^{|s-t|} needs a nonnegative base
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1)");
        }
        if !(self.omega > 0.0) {
            return bad("omega must be positive");
        }
        if let CovariateSpec::Truncated { bound } = self.covariates {
            if !(bound > 0.0) {
                return bad("truncation bound must be positive");
            }
        }
        if let Scenario::Diverging { b, c } = self.scenario {
            if !(b > 0.0 && c > 0.0) {
                return bad("diverging scenario needs B, C > 0");
            }
        }
        Ok(())
    }

    /// `ω ρ^{|s-t|}` at the given times.
    pub fn error_covariance(&self, times: &[f64]) -> DMatrix<f64> {
        let m = times.len();
        DMatrix::from_fn(m, m, |a, b| {
            if a == b {
                self.omega
            } else {
                self.omega * self.rho.powf((times[a] - times[b]).abs())
            }
        })
    }
}

/// What generated a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub beta0: Vec<f64>,
    /// Per-subject error covariance.
    pub sigma: Vec<DMatrix<f64>>,
    /// `g₀(T_ij)` per observation, in dataset order.
    pub g_at_obs: Vec<[f64; Q]>,
}

/// The four coefficient functions.
pub fn true_g(t: f64) -> [f64; Q] {
    use std::f64::consts::PI;
    [
        3.5 * (2.0 * PI * t).sin(),
        5.0 * (1.0 - t).powi(2),
        3.5 * ((-(3.0 * t - 1.0).powi(2)).exp() + (-(4.0 * t - 3.0).powi(2)).exp()) - 1.5,
        3.5 * t.sqrt(),
    ]
}

/// SplitMix64 finalizer applied to `seed` advanced by `k + 1` steps.
pub fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Binomial draw by inversion of the cdf.
fn binomial<R: Rng>(rng: &mut R, trials: usize, p: f64) -> usize {
    if trials == 0 || p == 0.0 {
        return 0;
    }
    if p == 1.0 {
        return trials;
    }
    let u: f64 = rng.random();
    let ratio = p / (1.0 - p);
    let mut pmf = (1.0 - p).powi(trials as i32);
    let mut cdf = pmf;
    let mut k = 0;
    while u > cdf && k < trials {
        pmf *= ratio * (trials - k) as f64 / (k + 1) as f64;
        k += 1;
        cdf += pmf;
    }
    k
}

fn covariate<R: Rng>(rng: &mut R, spec: CovariateSpec) -> f64 {
    match spec {
        CovariateSpec::StandardNormal => rng.sample(StandardNormal),
        CovariateSpec::Truncated { bound } => loop {
            let x: f64 = rng.sample(StandardNormal);
            if x.abs() <= bound {
                return x;
            }
        },
    }
}

struct Generated {
    subject: Subject,
    sigma: DMatrix<f64>,
    g: Vec<[f64; Q]>,
}

fn generate_subject(cfg: &SimConfig, index: usize, diverging: Option<usize>) -> Result<Generated> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, index as u64));
    let m = cfg.m0 + binomial(&mut rng, cfg.mr, cfg.binom_p);
    let slots = (cfg.m0 + cfg.mr) as f64;
    let times: Vec<f64> = match diverging {
        Some(_) if m > 0 => {
            let Scenario::Diverging { b, .. } = cfg.scenario else {
                unreachable!()
            };
            let big = (b * (cfg.n as f64).powf(0.125) * m as f64).ceil() as usize;
            let big = big.max(2);
            (0..big).map(|k| k as f64 / (big - 1) as f64).collect()
        }
        _ => (0..m)
            .map(|j| (j as f64 + rng.random::<f64>()) / slots)
            .map(|t| t.min(1.0))
            .collect(),
    };
    let m = times.len();
    let p = cfg.p();
    let mut x = DMatrix::zeros(m, p);
    let mut z = DMatrix::from_element(m, Q, 1.0);
    for j in 0..m {
        for c in 0..p {
            x[(j, c)] = covariate(&mut rng, cfg.covariates);
        }
        for l in 1..Q {
            z[(j, l)] = covariate(&mut rng, cfg.covariates);
        }
    }
    let sigma = cfg.error_covariance(&times);
    let factor = SpdFactor::new(&sigma, "error covariance", 0.0)?;
    let e = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eps = factor.lower() * e;
    let g: Vec<[f64; Q]> = times.iter().map(|&t| true_g(t)).collect();
    let y = (0..m)
        .map(|j| {
            let xb: f64 = (0..p).map(|c| x[(j, c)] * cfg.beta0[c]).sum();
            let zg: f64 = (0..Q).map(|l| z[(j, l)] * g[j][l]).sum();
            xb + zg + eps[j]
        })
        .collect();
    Ok(Generated {
        subject: Subject {
            id: format!("s{index}"),
            times,
            y,
            x,
            z,
        },
        sigma,
        g,
    })
}

/// Simulates one dataset. Each subject draws from its own stream derived
/// from `(seed, index)`, so the output does not depend on scheduling.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<(LongitudinalDataset, SimTruth)> {
    cfg.check()?;
    let mut diverging = vec![None; cfg.n];
    if let Scenario::Diverging { c, .. } = cfg.scenario {
        let count = ((c * (cfg.n as f64).powf(0.375)).ceil() as usize).min(cfg.n);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, u64::MAX));
        for (rank, i) in sample(&mut rng, cfg.n, count).into_iter().enumerate() {
            diverging[i] = Some(rank);
        }
    }
    let generated: Vec<Generated> = (0..cfg.n)
        .into_par_iter()
        .map(|i| generate_subject(cfg, i, diverging[i]))
        .collect::<Result<_>>()?;
    let mut subjects = Vec::with_capacity(cfg.n);
    let mut sigma = Vec::with_capacity(cfg.n);
    let mut g_at_obs = Vec::new();
    for gen in generated {
        subjects.push(gen.subject);
        sigma.push(gen.sigma);
        g_at_obs.extend(gen.g);
    }
    let ds = LongitudinalDataset::new(subjects)?;
    Ok((
        ds,
        SimTruth {
            beta0: cfg.beta0.clone(),
            sigma,
            g_at_obs,
        },
    ))
}

/// Per-observation `g₀` values plus a per-subject digest of `Σ_i`
/// (log-determinant and trace, repeated on each of the subject's rows).
pub fn write_truth<W: Write>(ds: &LongitudinalDataset, truth: &SimTruth, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject".to_string(), "t".to_string()];
    header.extend((1..=Q).map(|l| format!("g{l}")));
    header.extend(["sigma_logdet".to_string(), "sigma_trace".to_string()]);
    w.write_record(&header)?;
    let mut k = 0;
    for (s, sig) in ds.subjects().iter().zip(&truth.sigma) {
        let f = SpdFactor::new(sig, "error covariance", 0.0)?;
        let logdet: f64 = 2.0 * f.lower().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let trace = sig.trace();
        for &t in &s.times {
            let mut rec = vec![s.id.clone(), t.to_string()];
            rec.extend(truth.g_at_obs[k].iter().map(f64::to_string));
            rec.push(logdet.to_string());
            rec.push(trace.to_string());
            w.write_record(&rec)?;
            k += 1;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_truth(ds: &LongitudinalDataset, truth: &SimTruth, path: impl AsRef<Path>) -> Result<()> {
    write_truth(ds, truth, std::fs::File::create(path)?)
}
