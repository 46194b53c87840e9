//! Local-linear kernel smoothers.
//!
//! Three estimators share one structure: a kernel-weighted least-squares fit
//! of a local affine model whose level coefficient is returned.
//!
//! * [`VcSmoother`]: varying coefficients, regressors `Z ⊗ (1, u)`.
//! * [`VarianceSmoother`]: variance curve from squared residuals.
//! * [`CovSmoother`]: covariance surface from within-subject residual
//!   cross-products over ordered pairs `j != j'`, regressors `(1, u_s, u_t)`
//!   with a product kernel.
//!
//! The local normal matrix is normalized (divided by `N h` or `N2 h^2`).
//! When its pivot ratio exceeds `1e12` the fit falls back to the
//! local-constant value, solved with `ridge_eps` times the largest diagonal
//! entry added to the diagonal, and the fallback is counted.

use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::{LongitudinalDataset, Observations};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::splines::SplineBasis;

const MAX_CONDITION: f64 = 1e12;

/// Symmetric compactly supported kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernel {
    /// `0.75 (1 - u^2)` on `|u| <= 1`.
    #[default]
    Epanechnikov,
}

impl Kernel {
    #[inline]
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn radius(self) -> f64 {
        1.0
    }

    /// `∫ K(u)^2 du`.
    pub fn roughness(self) -> f64 {
        match self {
            Kernel::Epanechnikov => 0.6,
        }
    }

    /// `∫ u^2 K(u) du`.
    pub fn second_moment(self) -> f64 {
        match self {
            Kernel::Epanechnikov => 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmootherOptions {
    pub kernel: Kernel,
    pub ridge_eps: f64,
}

impl Default for SmootherOptions {
    fn default() -> Self {
        Self {
            kernel: Kernel::Epanechnikov,
            ridge_eps: 1e-10,
        }
    }
}

/// A vector-valued curve on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveEstimate {
    pub grid: Vec<f64>,
    /// `|grid| x q`.
    pub values: DMatrix<f64>,
    /// Grid points where the local-constant fallback was used.
    pub fallbacks: usize,
    spline: Option<(SplineBasis, Vec<f64>)>,
}

impl CurveEstimate {
    pub fn from_grid(grid: Vec<f64>, values: DMatrix<f64>, fallbacks: usize) -> Self {
        Self {
            grid,
            values,
            fallbacks,
            spline: None,
        }
    }

    /// Curves `gamma_l' B(t)`, `gamma` blocked by coefficient.
    pub fn from_spline(basis: &SplineBasis, gamma: &[f64], grid: Vec<f64>) -> Self {
        let k = basis.dim();
        let q = gamma.len() / k;
        let mut b = vec![0.0; k];
        let mut values = DMatrix::zeros(grid.len(), q);
        for (r, &t) in grid.iter().enumerate() {
            basis.eval_into(t, &mut b);
            for l in 0..q {
                values[(r, l)] = dot(&gamma[l * k..(l + 1) * k], &b);
            }
        }
        Self {
            grid,
            values,
            fallbacks: 0,
            spline: Some((basis.clone(), gamma.to_vec())),
        }
    }

    pub fn q(&self) -> usize {
        self.values.ncols()
    }

    /// Value at arbitrary `t`: exact for spline curves, linear interpolation
    /// between grid points otherwise (constant beyond the grid ends).
    pub fn eval(&self, t: f64) -> Vec<f64> {
        if let Some((basis, gamma)) = &self.spline {
            let k = basis.dim();
            let mut b = vec![0.0; k];
            basis.eval_into(t.clamp(0.0, 1.0), &mut b);
            return (0..self.q())
                .map(|l| dot(&gamma[l * k..(l + 1) * k], &b))
                .collect();
        }
        let (i, w) = bracket(&self.grid, t);
        (0..self.q())
            .map(|l| {
                let a = self.values[(i, l)];
                if w == 0.0 {
                    a
                } else {
                    a + w * (self.values[(i + 1, l)] - a)
                }
            })
            .collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index `i` and weight `w` with `t ≈ (1 - w) grid[i] + w grid[i + 1]`.
pub(crate) fn bracket(grid: &[f64], t: f64) -> (usize, f64) {
    let n = grid.len();
    if n == 1 || t <= grid[0] {
        return (0, 0.0);
    }
    if t >= grid[n - 1] {
        return (n - 1, 0.0);
    }
    let i = grid.partition_point(|&g| g <= t) - 1;
    let w = (t - grid[i]) / (grid[i + 1] - grid[i]);
    (i, w)
}

/// `n` equispaced points on `[0, 1]`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5];
    }
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

/// Positions sorted by a key, with window lookup.
#[derive(Debug, Clone)]
struct SortedIndex {
    order: Vec<usize>,
    keys: Vec<f64>,
}

impl SortedIndex {
    fn new(keys: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
        let keys = order.iter().map(|&k| keys[k]).collect();
        Self { order, keys }
    }

    fn window(&self, center: f64, radius: f64) -> Range<usize> {
        let lo = self.keys.partition_point(|&k| k < center - radius);
        let hi = self.keys.partition_point(|&k| k <= center + radius);
        lo..hi
    }
}

/// Accumulated local system `A c = b` of dimension `d`, row-major.
struct LocalSystem {
    d: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    weight: f64,
}

impl LocalSystem {
    fn new(d: usize) -> Self {
        Self {
            d,
            a: vec![0.0; d * d],
            b: vec![0.0; d],
            weight: 0.0,
        }
    }

    fn reset(&mut self) {
        self.a.fill(0.0);
        self.b.fill(0.0);
        self.weight = 0.0;
    }

    #[inline]
    fn add(&mut self, r: &[f64], w: f64, y: f64) {
        let d = self.d;
        for i in 0..d {
            let wi = w * r[i];
            if wi == 0.0 {
                continue;
            }
            self.b[i] += wi * y;
            let row = &mut self.a[i * d..i * d + d];
            for j in i..d {
                row[j] += wi * r[j];
            }
        }
        self.weight += w;
    }

    /// Solves for the coefficients after scaling by `scale` and adding
    /// `ridge` to the diagonal. Returns `None` when ill-conditioned.
    fn solve(&self, scale: f64, ridge: f64) -> Option<Vec<f64>> {
        let idx: Vec<usize> = (0..self.d).collect();
        self.solve_subset(&idx, scale, ridge)
    }

    /// Solve restricted to the rows/columns in `keep`.
    fn solve_subset(&self, keep: &[usize], scale: f64, ridge: f64) -> Option<Vec<f64>> {
        let d = self.d;
        let k = keep.len();
        let mut a = vec![0.0; k * k];
        for (i, &li) in keep.iter().enumerate() {
            for (j, &lj) in keep.iter().enumerate() {
                let (r, c) = if li <= lj { (li, lj) } else { (lj, li) };
                a[i * k + j] = self.a[r * d + c] * scale;
            }
        }
        if ridge > 0.0 {
            // relative to the largest diagonal entry
            let top = (0..k).map(|i| a[i * k + i]).fold(0.0f64, f64::max);
            for i in 0..k {
                a[i * k + i] += ridge * top;
            }
        }
        let (lo, hi) = cholesky_in_place(&mut a, k)?;
        if hi / lo > MAX_CONDITION {
            return None;
        }
        let mut b: Vec<f64> = keep.iter().map(|&i| self.b[i] * scale).collect();
        cholesky_solve(&a, k, &mut b);
        Some(b)
    }
}

/// Solution of one local fit: level coefficients and whether the
/// local-constant fallback was used.
struct LocalFit {
    level: Vec<f64>,
    fallback: bool,
}

fn finish(
    sys: &LocalSystem,
    level_idx: &[usize],
    scale: f64,
    ridge: f64,
    at: impl FnOnce() -> String,
) -> Result<LocalFit> {
    if !(sys.weight > 0.0) {
        return Err(Error::EmptyWindow { at: at() });
    }
    if let Some(c) = sys.solve(scale, 0.0) {
        return Ok(LocalFit {
            level: level_idx.iter().map(|&i| c[i]).collect(),
            fallback: false,
        });
    }
    match sys.solve_subset(level_idx, scale, ridge) {
        Some(level) => Ok(LocalFit {
            level,
            fallback: true,
        }),
        None => Err(Error::Singular { at: at() }),
    }
}

/// Local-linear smoother in time with covariate-weighted regressors
/// `z ⊗ (1, (T - t)/h)`; with `z ≡ 1` it is the ordinary scalar smoother.
#[derive(Debug, Clone)]
struct LocalLinear1d<'a> {
    t: &'a [f64],
    /// Row-major `N x q`; `None` means a single intercept column.
    z: Option<&'a [f64]>,
    q: usize,
    subject: &'a [usize],
    index: SortedIndex,
    opts: SmootherOptions,
}

impl<'a> LocalLinear1d<'a> {
    fn new(obs: &'a Observations, with_z: bool, opts: SmootherOptions) -> Self {
        Self {
            t: &obs.t,
            z: with_z.then_some(obs.z.as_slice()),
            q: if with_z { obs.q } else { 1 },
            subject: &obs.subject,
            index: SortedIndex::new(&obs.t),
            opts,
        }
    }

    fn fit(&self, t0: f64, h: f64, y: &[f64], exclude: Option<usize>, sys: &mut LocalSystem) -> Result<LocalFit> {
        let q = self.q;
        let k = self.opts.kernel;
        let mut r = vec![0.0; 2 * q];
        sys.reset();
        for pos in self.index.window(t0, h * k.radius()) {
            let obs = self.index.order[pos];
            if exclude == Some(self.subject[obs]) {
                continue;
            }
            let u = (self.t[obs] - t0) / h;
            let w = k.eval(u);
            if w == 0.0 {
                continue;
            }
            match self.z {
                Some(z) => {
                    for l in 0..q {
                        let zl = z[obs * q + l];
                        r[2 * l] = zl;
                        r[2 * l + 1] = zl * u;
                    }
                }
                None => {
                    r[0] = 1.0;
                    r[1] = u;
                }
            }
            sys.add(&r, w, y[obs]);
        }
        let level: Vec<usize> = (0..q).map(|l| 2 * l).collect();
        let scale = 1.0 / (self.t.len() as f64 * h);
        finish(sys, &level, scale, self.opts.ridge_eps, || format!("t = {t0}"))
    }

    /// Prediction `z' g(t)` at each observation of each subject, with that
    /// subject left out, accumulated into a squared-error score.
    fn loso_score(&self, h: f64, y: &[f64], target: &[f64]) -> Result<f64> {
        let mut sys = LocalSystem::new(2 * self.q);
        let mut score = 0.0;
        for obs in 0..self.t.len() {
            let fit = self.fit(self.t[obs], h, y, Some(self.subject[obs]), &mut sys)?;
            let pred = match self.z {
                Some(z) => dot(&z[obs * self.q..(obs + 1) * self.q], &fit.level),
                None => fit.level[0],
            };
            let e = target[obs] - pred;
            score += e * e;
        }
        Ok(score)
    }
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("bandwidth must be positive, got {h}")))
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what}: length {got}, expected {want}")))
    }
}

/// Varying-coefficient local-linear smoother over a fixed dataset.
#[derive(Debug, Clone)]
pub struct VcSmoother<'a> {
    inner: LocalLinear1d<'a>,
}

impl<'a> VcSmoother<'a> {
    pub fn new(ds: &'a LongitudinalDataset, opts: SmootherOptions) -> Self {
        Self {
            inner: LocalLinear1d::new(ds.observations(), true, opts),
        }
    }

    /// `ĝ(t)` for pseudo-responses aligned with the observation order.
    /// The flag reports a local-constant fallback.
    pub fn at(&self, t: f64, h: f64, pseudo: &[f64]) -> Result<(Vec<f64>, bool)> {
        check_bandwidth(h)?;
        check_len("pseudo-responses", pseudo.len(), self.inner.t.len())?;
        let mut sys = LocalSystem::new(2 * self.inner.q);
        let fit = self.inner.fit(t, h, pseudo, None, &mut sys)?;
        Ok((fit.level, fit.fallback))
    }

    pub fn curve(&self, points: &[f64], h: f64, pseudo: &[f64]) -> Result<CurveEstimate> {
        check_bandwidth(h)?;
        check_len("pseudo-responses", pseudo.len(), self.inner.t.len())?;
        if let Some(&t) = points.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::OutOfDomain { t });
        }
        let q = self.inner.q;
        let mut sys = LocalSystem::new(2 * q);
        let mut values = DMatrix::zeros(points.len(), q);
        let mut fallbacks = 0;
        for (r, &t) in points.iter().enumerate() {
            let fit = self.inner.fit(t, h, pseudo, None, &mut sys)?;
            fallbacks += usize::from(fit.fallback);
            for l in 0..q {
                values[(r, l)] = fit.level[l];
            }
        }
        Ok(CurveEstimate::from_grid(points.to_vec(), values, fallbacks))
    }

    /// `Z_ij' ĝ(T_ij)` at every observation; also returns the fallback count.
    pub fn fitted(&self, h: f64, pseudo: &[f64]) -> Result<(Vec<f64>, usize)> {
        check_bandwidth(h)?;
        check_len("pseudo-responses", pseudo.len(), self.inner.t.len())?;
        let q = self.inner.q;
        let z = self.inner.z.unwrap_or(&[]);
        let mut sys = LocalSystem::new(2 * q);
        let mut out = Vec::with_capacity(self.inner.t.len());
        let mut fallbacks = 0;
        for (obs, &t) in self.inner.t.iter().enumerate() {
            let fit = self.inner.fit(t, h, pseudo, None, &mut sys)?;
            fallbacks += usize::from(fit.fallback);
            out.push(dot(&z[obs * q..(obs + 1) * q], &fit.level));
        }
        Ok((out, fallbacks))
    }

    pub fn loso_score(&self, h: f64, pseudo: &[f64]) -> Result<f64> {
        check_bandwidth(h)?;
        check_len("pseudo-responses", pseudo.len(), self.inner.t.len())?;
        self.inner.loso_score(h, pseudo, pseudo)
    }
}

/// Local-linear smoother of squared residuals.
#[derive(Debug, Clone)]
pub struct VarianceSmoother<'a> {
    inner: LocalLinear1d<'a>,
    squared: Vec<f64>,
}

impl<'a> VarianceSmoother<'a> {
    pub fn new(ds: &'a LongitudinalDataset, residuals: &[f64], opts: SmootherOptions) -> Result<Self> {
        check_len("residuals", residuals.len(), ds.n1())?;
        Ok(Self {
            inner: LocalLinear1d::new(ds.observations(), false, opts),
            squared: residuals.iter().map(|e| e * e).collect(),
        })
    }

    pub fn at(&self, t: f64, h: f64) -> Result<(f64, bool)> {
        check_bandwidth(h)?;
        let mut sys = LocalSystem::new(2);
        let fit = self.inner.fit(t, h, &self.squared, None, &mut sys)?;
        Ok((fit.level[0], fit.fallback))
    }

    pub fn loso_score(&self, h: f64) -> Result<f64> {
        check_bandwidth(h)?;
        self.inner.loso_score(h, &self.squared, &self.squared)
    }
}

/// Local-plane smoother of within-subject residual cross-products.
#[derive(Debug, Clone)]
pub struct CovSmoother {
    /// First time of each ordered pair.
    s: Vec<f64>,
    /// Second time.
    t: Vec<f64>,
    value: Vec<f64>,
    subject: Vec<usize>,
    index: SortedIndex,
    opts: SmootherOptions,
}

impl CovSmoother {
    pub fn new(ds: &LongitudinalDataset, residuals: &[f64], opts: SmootherOptions) -> Result<Self> {
        check_len("residuals", residuals.len(), ds.n1())?;
        let obs = ds.observations();
        let n2 = ds.n2();
        let mut s = Vec::with_capacity(n2);
        let mut t = Vec::with_capacity(n2);
        let mut value = Vec::with_capacity(n2);
        let mut subject = Vec::with_capacity(n2);
        for i in 0..ds.n() {
            let range = obs.range(i);
            for j in range.clone() {
                for k in range.clone() {
                    if j != k {
                        s.push(obs.t[j]);
                        t.push(obs.t[k]);
                        value.push(residuals[j] * residuals[k]);
                        subject.push(i);
                    }
                }
            }
        }
        if s.is_empty() {
            return Err(Error::Dimension("no within-subject pairs (N2 = 0)".into()));
        }
        let index = SortedIndex::new(&s);
        Ok(Self {
            s,
            t,
            value,
            subject,
            index,
            opts,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.s.len()
    }

    fn fit(&self, s0: f64, t0: f64, h: f64, exclude: Option<usize>, sys: &mut LocalSystem) -> Result<LocalFit> {
        let k = self.opts.kernel;
        sys.reset();
        let radius = h * k.radius();
        for pos in self.index.window(s0, radius) {
            let p = self.index.order[pos];
            let dt = self.t[p] - t0;
            if dt.abs() > radius || exclude == Some(self.subject[p]) {
                continue;
            }
            let us = (self.s[p] - s0) / h;
            let ut = dt / h;
            let w = k.eval(us) * k.eval(ut);
            if w == 0.0 {
                continue;
            }
            sys.add(&[1.0, us, ut], w, self.value[p]);
        }
        let scale = 1.0 / (self.s.len() as f64 * h * h);
        finish(sys, &[0], scale, self.opts.ridge_eps, || format!("(s, t) = ({s0}, {t0})"))
    }

    /// `σ̂(s, t)`; evaluated with the arguments ordered so the result is
    /// exactly symmetric.
    pub fn at(&self, s: f64, t: f64, h: f64) -> Result<(f64, bool)> {
        check_bandwidth(h)?;
        let (a, b) = if s <= t { (s, t) } else { (t, s) };
        let mut sys = LocalSystem::new(3);
        let fit = self.fit(a, b, h, None, &mut sys)?;
        Ok((fit.level[0], fit.fallback))
    }

    /// Surface on the tensor grid `points x points`; the upper triangle is
    /// computed and mirrored. Cells whose kernel window holds no pair take
    /// the value of the nearest nonempty cell. Returns the surface and the
    /// number of fallback or filled cells.
    pub fn surface(&self, points: &[f64], h: f64) -> Result<(DMatrix<f64>, usize)> {
        check_bandwidth(h)?;
        let g = points.len();
        let rows: Vec<Result<(Vec<Option<f64>>, usize)>> = (0..g)
            .into_par_iter()
            .map(|a| {
                let mut sys = LocalSystem::new(3);
                let mut row = Vec::with_capacity(g - a);
                let mut fb = 0;
                for b in a..g {
                    match self.fit(points[a], points[b], h, None, &mut sys) {
                        Ok(fit) => {
                            fb += usize::from(fit.fallback);
                            row.push(Some(fit.level[0]));
                        }
                        Err(Error::EmptyWindow { .. }) => row.push(None),
                        Err(e) => return Err(e),
                    }
                }
                Ok((row, fb))
            })
            .collect();
        let mut cells = vec![None; g * g];
        let mut fallbacks = 0;
        for (a, row) in rows.into_iter().enumerate() {
            let (row, fb) = row?;
            fallbacks += fb;
            for (off, v) in row.into_iter().enumerate() {
                cells[a * g + a + off] = v;
                cells[(a + off) * g + a] = v;
            }
        }
        let filled: Vec<(usize, usize)> = (0..g * g).filter(|&k| cells[k].is_some()).map(|k| (k / g, k % g)).collect();
        if filled.is_empty() {
            return Err(Error::EmptyWindow {
                at: format!("every covariance grid cell (h = {h})"),
            });
        }
        let mut out = DMatrix::zeros(g, g);
        for a in 0..g {
            for b in 0..g {
                out[(a, b)] = match cells[a * g + b] {
                    Some(v) => v,
                    None => {
                        fallbacks += 1;
                        let d2 = |&(r, c): &(usize, usize)| r.abs_diff(a).pow(2) + c.abs_diff(b).pow(2);
                        let &(r, c) = filled.iter().min_by_key(|x| d2(x)).expect("nonempty");
                        cells[r * g + c].expect("filled cell")
                    }
                };
            }
        }
        Ok((symmetrize_exact(out), fallbacks))
    }

    pub fn loso_score(&self, h: f64) -> Result<f64> {
        check_bandwidth(h)?;
        let mut sys = LocalSystem::new(3);
        let mut score = 0.0;
        for p in 0..self.s.len() {
            let fit = self.fit(self.s[p], self.t[p], h, Some(self.subject[p]), &mut sys)?;
            let e = self.value[p] - fit.level[0];
            score += e * e;
        }
        Ok(score)
    }
}

/// Copies the upper triangle onto the lower one.
fn symmetrize_exact(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for a in 0..m.nrows() {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    m
}

/// `ĝ(t)` at each evaluation point.
pub fn local_linear_vc(
    ds: &LongitudinalDataset,
    pseudo: &[f64],
    h: f64,
    eval_points: &[f64],
    opts: SmootherOptions,
) -> Result<CurveEstimate> {
    VcSmoother::new(ds, opts).curve(eval_points, h, pseudo)
}

/// `σ̂²(t)` from residuals (squared internally).
pub fn local_linear_variance(
    residuals: &[f64],
    ds: &LongitudinalDataset,
    h: f64,
    t: f64,
    opts: SmootherOptions,
) -> Result<f64> {
    VarianceSmoother::new(ds, residuals, opts)?.at(t, h).map(|(v, _)| v)
}

/// `σ̂(s, t)` from residual cross-products.
pub fn local_linear_cov2d(
    residuals: &[f64],
    ds: &LongitudinalDataset,
    h: f64,
    s: f64,
    t: f64,
    opts: SmootherOptions,
) -> Result<f64> {
    CovSmoother::new(ds, residuals, opts)?.at(s, t, h).map(|(v, _)| v)
}

/// Which smoother a cross-validation run targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmootherKind {
    /// Pseudo-responses through the varying-coefficient smoother.
    VaryingCoefficient,
    /// Values are residuals; the target is their square.
    Variance,
    /// Values are residuals; the targets are within-subject cross-products.
    Covariance,
}

/// Outcome of leave-one-subject-out cross-validation.
#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub bandwidth: f64,
    /// Score per candidate, `+inf` where some held-out fit failed.
    pub scores: Vec<f64>,
}

/// Leave-one-subject-out CV. Ties (within `1e-9` of the total squared
/// target) go to the smaller bandwidth.
pub fn loso_cv(
    ds: &LongitudinalDataset,
    values: &[f64],
    candidates: &[f64],
    kind: SmootherKind,
    opts: SmootherOptions,
) -> Result<CvResult> {
    if candidates.is_empty() {
        return Err(Error::Config("empty bandwidth candidate list".into()));
    }
    for &h in candidates {
        check_bandwidth(h)?;
    }
    check_len("values", values.len(), ds.n1())?;
    let (scores, scale): (Vec<f64>, f64) = match kind {
        SmootherKind::VaryingCoefficient => {
            let sm = VcSmoother::new(ds, opts);
            let scores = candidates
                .par_iter()
                .map(|&h| sm.loso_score(h, values).unwrap_or(f64::INFINITY))
                .collect();
            (scores, values.iter().map(|v| v * v).sum())
        }
        SmootherKind::Variance => {
            let sm = VarianceSmoother::new(ds, values, opts)?;
            let scores = candidates
                .par_iter()
                .map(|&h| sm.loso_score(h).unwrap_or(f64::INFINITY))
                .collect();
            (scores, values.iter().map(|v| v.powi(4)).sum())
        }
        SmootherKind::Covariance => {
            let sm = CovSmoother::new(ds, values, opts)?;
            let scores = candidates
                .par_iter()
                .map(|&h| sm.loso_score(h).unwrap_or(f64::INFINITY))
                .collect();
            (scores, sm.value.iter().map(|v| v * v).sum())
        }
    };
    Ok(CvResult {
        bandwidth: pick_bandwidth(candidates, &scores, scale)?,
        scores,
    })
}

fn pick_bandwidth(candidates: &[f64], scores: &[f64], scale: f64) -> Result<f64> {
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::AllCandidatesFailed);
    }
    let tol = 1e-9 * scale.max(f64::MIN_POSITIVE);
    candidates
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s <= best + tol)
        .map(|(&h, _)| h)
        .min_by(f64::total_cmp)
        .ok_or(Error::AllCandidatesFailed)
}

/// `1.06 sd(T) N1^{-1/5}`.
pub fn rule_of_thumb_bandwidth(ds: &LongitudinalDataset) -> f64 {
    let t = &ds.observations().t;
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// Ten geometrically spaced values over `[0.5, 3] x` the rule-of-thumb
/// bandwidth.
pub fn default_candidates(ds: &LongitudinalDataset) -> Vec<f64> {
    let h0 = rule_of_thumb_bandwidth(ds);
    let (lo, hi) = (0.5 * h0, 3.0 * h0);
    let n = 10;
    (0..n)
        .map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64))
        .collect()
}
