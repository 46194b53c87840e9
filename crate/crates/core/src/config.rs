//! Pipeline configuration and its flat `key=value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// How the spline dimension `K_n` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplineDim {
    Fixed(usize),
    /// `floor(c_k * n^(1/5))`, raised to `degree + 1` if smaller.
    Rule { c_k: f64 },
}

/// Bandwidth policy for `h1` and `h2`.
#[derive(Debug, Clone, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Leave-one-subject-out CV over the given candidates, or over the
    /// default geometric grid around the rule-of-thumb bandwidth when `None`.
    Cv(Option<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum H3Rule {
    Multiplier(f64),
    Fixed(f64),
}

/// Residuals fed to the covariance estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualSource {
    /// Residuals from the local-linear curves.
    Smoothed,
    /// Raw spline residuals from the working-independence fit.
    Crude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub spline_degree: usize,
    pub kn: SplineDim,
    pub h1: Bandwidth,
    pub h2: Bandwidth,
    pub h3: H3Rule,
    pub lambda_l: f64,
    pub cov_grid_size: usize,
    pub ridge_eps: f64,
    pub pd_floor: f64,
    pub max_iter: usize,
    pub iter_tol: f64,
    pub residuals: ResidualSource,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            spline_degree: 3,
            kn: SplineDim::Rule { c_k: 2.0 },
            h1: Bandwidth::Cv(None),
            h2: Bandwidth::Cv(None),
            h3: H3Rule::Multiplier(2.0),
            lambda_l: 0.0,
            cov_grid_size: 101,
            ridge_eps: 1e-10,
            pd_floor: 1e-8,
            max_iter: 1,
            iter_tol: 1e-6,
            residuals: ResidualSource::Smoothed,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "spline_degree",
    "kn",
    "c_k",
    "h1",
    "h2",
    "h3_multiplier",
    "h3",
    "lambda_l",
    "cov_grid_size",
    "ridge_eps",
    "pd_floor",
    "max_iter",
    "iter_tol",
    "residuals",
];

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: expected a number, got `{value}`")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: expected an integer, got `{value}`")))
}

fn parse_bandwidth(key: &str, value: &str) -> Result<Bandwidth> {
    if value == "cv" {
        return Ok(Bandwidth::Cv(None));
    }
    if let Some(list) = value.strip_prefix("cv:") {
        let grid = list
            .split(',')
            .map(|v| parse_f64(key, v.trim()))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Bandwidth::Cv(Some(grid)));
    }
    parse_f64(key, value).map(Bandwidth::Fixed)
}

fn fmt_bandwidth(b: &Bandwidth) -> String {
    match b {
        Bandwidth::Fixed(h) => h.to_string(),
        Bandwidth::Cv(None) => "cv".into(),
        Bandwidth::Cv(Some(g)) => {
            let list: Vec<String> = g.iter().map(f64::to_string).collect();
            format!("cv:{}", list.join(","))
        }
    }
}

impl PipelineConfig {
    /// Applies one `key=value` setting. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "spline_degree" => self.spline_degree = parse_usize(key, value)?,
            "kn" => {
                self.kn = if value == "rule" {
                    SplineDim::Rule { c_k: 2.0 }
                } else {
                    SplineDim::Fixed(parse_usize(key, value)?)
                }
            }
            "c_k" => self.kn = SplineDim::Rule { c_k: parse_f64(key, value)? },
            "h1" => self.h1 = parse_bandwidth(key, value)?,
            "h2" => self.h2 = parse_bandwidth(key, value)?,
            "h3_multiplier" => self.h3 = H3Rule::Multiplier(parse_f64(key, value)?),
            "h3" => self.h3 = H3Rule::Fixed(parse_f64(key, value)?),
            "lambda_l" => self.lambda_l = parse_f64(key, value)?,
            "cov_grid_size" => self.cov_grid_size = parse_usize(key, value)?,
            "ridge_eps" => self.ridge_eps = parse_f64(key, value)?,
            "pd_floor" => self.pd_floor = parse_f64(key, value)?,
            "max_iter" => self.max_iter = parse_usize(key, value)?,
            "iter_tol" => self.iter_tol = parse_f64(key, value)?,
            "residuals" => {
                self.residuals = match value {
                    "smoothed" => ResidualSource::Smoothed,
                    "crude" => ResidualSource::Crude,
                    _ => {
                        return Err(Error::Config(format!(
                            "`residuals`: expected `smoothed` or `crude`, got `{value}`"
                        )))
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat `key=value` file body on top of the defaults. Blank
    /// lines and `#` comments are ignored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_kv(text)?;
        Ok(cfg)
    }

    pub fn merge_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            self.set(k, v)?;
        }
        self.check()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "spline_degree={}", self.spline_degree);
        match self.kn {
            SplineDim::Fixed(k) => {
                let _ = writeln!(s, "kn={k}");
            }
            SplineDim::Rule { c_k } => {
                let _ = writeln!(s, "c_k={c_k}");
            }
        }
        let _ = writeln!(s, "h1={}", fmt_bandwidth(&self.h1));
        let _ = writeln!(s, "h2={}", fmt_bandwidth(&self.h2));
        match self.h3 {
            H3Rule::Multiplier(m) => {
                let _ = writeln!(s, "h3_multiplier={m}");
            }
            H3Rule::Fixed(h) => {
                let _ = writeln!(s, "h3={h}");
            }
        }
        let _ = writeln!(s, "lambda_l={}", self.lambda_l);
        let _ = writeln!(s, "cov_grid_size={}", self.cov_grid_size);
        let _ = writeln!(s, "ridge_eps={}", self.ridge_eps);
        let _ = writeln!(s, "pd_floor={}", self.pd_floor);
        let _ = writeln!(s, "max_iter={}", self.max_iter);
        let _ = writeln!(s, "iter_tol={}", self.iter_tol);
        let res = match self.residuals {
            ResidualSource::Smoothed => "smoothed",
            ResidualSource::Crude => "crude",
        };
        let _ = writeln!(s, "residuals={res}");
        s
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.spline_degree < 1 {
            return bad("spline_degree must be >= 1");
        }
        match self.kn {
            SplineDim::Fixed(k) if k < self.spline_degree + 1 => {
                return bad("kn must be >= spline_degree + 1")
            }
            SplineDim::Rule { c_k } if !(c_k > 0.0) => return bad("c_k must be positive"),
            _ => {}
        }
        for (name, b) in [("h1", &self.h1), ("h2", &self.h2)] {
            let ok = match b {
                Bandwidth::Fixed(h) => *h > 0.0,
                Bandwidth::Cv(Some(g)) => !g.is_empty() && g.iter().all(|h| *h > 0.0),
                Bandwidth::Cv(None) => true,
            };
            if !ok {
                return Err(Error::Config(format!("{name}: bandwidths must be positive")));
            }
        }
        match self.h3 {
            H3Rule::Multiplier(m) | H3Rule::Fixed(m) if !(m > 0.0) => {
                return bad("h3 rule must be positive")
            }
            _ => {}
        }
        if !(self.lambda_l >= 0.0) {
            return bad("lambda_l must be >= 0");
        }
        if self.cov_grid_size < 11 {
            return bad("cov_grid_size must be >= 11");
        }
        if !(self.ridge_eps > 0.0) || !(self.pd_floor > 0.0) || !(self.iter_tol > 0.0) {
            return bad("ridge_eps, pd_floor and iter_tol must be positive");
        }
        if self.max_iter < 1 {
            return bad("max_iter must be >= 1");
        }
        Ok(())
    }

    /// Resolves the spline dimension for `n` subjects.
    pub fn spline_dim(&self, n: usize) -> usize {
        match self.kn {
            SplineDim::Fixed(k) => k,
            SplineDim::Rule { c_k } => {
                let k = (c_k * (n as f64).powf(0.2)).floor() as usize;
                k.max(self.spline_degree + 1)
            }
        }
    }

    pub fn h3_for(&self, h1: f64) -> f64 {
        match self.h3 {
            H3Rule::Multiplier(m) => m * h1,
            H3Rule::Fixed(h) => h,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn parses_overrides() {
        let cfg = PipelineConfig::from_kv(
            "# comment\nh1=0.2\nh2=cv:0.1,0.3\nh3_multiplier=1.5\nlambda_l=0.05\nresiduals=crude\n",
        )
        .unwrap();
        assert_eq!(cfg.h1, Bandwidth::Fixed(0.2));
        assert_eq!(cfg.h2, Bandwidth::Cv(Some(vec![0.1, 0.3])));
        assert_eq!(cfg.h3_for(0.2), 1.5 * 0.2);
        assert_eq!(cfg.residuals, ResidualSource::Crude);
        assert_eq!(PipelineConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_and_bad_values_fail() {
        assert!(PipelineConfig::from_kv("bogus=1").is_err());
        assert!(PipelineConfig::from_kv("lambda_l=-1").is_err());
        assert!(PipelineConfig::from_kv("cov_grid_size=5").is_err());
        assert!(PipelineConfig::from_kv("h1").is_err());
    }

    #[test]
    fn kn_rule() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.spline_dim(100), 5);
        assert_eq!(cfg.spline_dim(200), 5);
        assert_eq!(cfg.spline_dim(1000), 7);
        // floor(2 * 10^0.2) = 3 is lifted to degree + 1
        assert_eq!(cfg.spline_dim(10), 4);
    }
}
