//! Identity-link GEE with B-spline varying coefficients.
//!
//! Minimizes `sum_i (Y_i - X_i β - W_i γ)' V_i^{-1} (Y_i - X_i β - W_i γ)`
//! where row `j` of `W_i` is `Z_ij ⊗ B(T_ij)`. Each `V_i` is applied through
//! its Cholesky factor (never inverted), the blocks
//! `H11 = Σ X'V⁻¹X`, `H12 = Σ X'V⁻¹W`, `H22 = Σ W'V⁻¹W` are accumulated, and
//! the system is solved by eliminating `γ` through `H22` and then solving
//! `H11·2 β = c1 - H12 H22⁻¹ c2` with `H11·2 = H11 - H12 H22⁻¹ H21`.

use nalgebra::{DMatrix, DVector};

use crate::covariance::CovarianceModel;
use crate::data::{LongitudinalDataset, Subject};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize, SpdFactor};
use crate::smoothers::CurveEstimate;
use crate::splines::SplineBasis;

/// Pivots below this fraction of the largest diagonal are rank deficient.
pub const RANK_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-10;

/// Per-subject inverse weight matrices `V_i`.
#[derive(Debug, Clone, Copy)]
pub enum WeightSpec<'a> {
    Identity,
    Explicit(&'a [DMatrix<f64>]),
    FromCovarianceModel(&'a CovarianceModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Identity,
    Explicit,
    FromCovarianceModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeMode {
    /// `(Σ U'Σ̂⁻¹U)⁻¹`.
    Model,
    /// `(Σ U'U)⁻¹ Σ U'Σ̂U (Σ U'U)⁻¹`.
    Sandwich,
}

#[derive(Debug, Clone)]
pub struct GeeFit {
    pub beta: DVector<f64>,
    /// Blocked by coefficient: `gamma[l * K_n + k]`.
    pub gamma: DVector<f64>,
    pub h11: DMatrix<f64>,
    pub h12: DMatrix<f64>,
    pub h22: DMatrix<f64>,
    pub h11_dot2: DMatrix<f64>,
    pub basis: SplineBasis,
    /// `Y - Xβ̂ - Wγ̂` in observation order.
    pub residuals: Vec<f64>,
    pub weights: WeightKind,
}

impl GeeFit {
    pub fn p(&self) -> usize {
        self.beta.len()
    }
}

/// `U_i = [X_i W_i]`, `m_i x (p + q K_n)`.
pub fn subject_design(s: &Subject, basis: &SplineBasis) -> DMatrix<f64> {
    let (m, p, q, k) = (s.len(), s.x.ncols(), s.z.ncols(), basis.dim());
    let mut u = DMatrix::zeros(m, p + q * k);
    let mut b = vec![0.0; k];
    for j in 0..m {
        for c in 0..p {
            u[(j, c)] = s.x[(j, c)];
        }
        basis.eval_into(s.times[j], &mut b);
        for l in 0..q {
            let zl = s.z[(j, l)];
            for (kk, bk) in b.iter().enumerate() {
                u[(j, p + l * k + kk)] = zl * bk;
            }
        }
    }
    u
}

/// Materializes `V_i` for every subject (`None` for identity weights).
pub fn weight_matrices(ds: &LongitudinalDataset, weights: WeightSpec<'_>) -> Result<Option<Vec<DMatrix<f64>>>> {
    match weights {
        WeightSpec::Identity => Ok(None),
        WeightSpec::Explicit(v) => {
            if v.len() != ds.n() {
                return Err(Error::Dimension(format!(
                    "{} weight matrices for {} subjects",
                    v.len(),
                    ds.n()
                )));
            }
            for (s, vi) in ds.subjects().iter().zip(v) {
                if vi.nrows() != s.len() || vi.ncols() != s.len() {
                    return Err(Error::Dimension(format!(
                        "subject `{}`: weight matrix {}x{}, expected {}x{}",
                        s.id,
                        vi.nrows(),
                        vi.ncols(),
                        s.len(),
                        s.len()
                    )));
                }
                if (vi - vi.transpose()).amax() > SYMMETRY_TOL {
                    return Err(Error::Dimension(format!("subject `{}`: weight matrix not symmetric", s.id)));
                }
            }
            Ok(Some(v.to_vec()))
        }
        WeightSpec::FromCovarianceModel(model) => Ok(Some(
            ds.subjects().iter().map(|s| model.sigma_matrix(&s.times).0).collect(),
        )),
    }
}

fn kind(weights: &WeightSpec<'_>) -> WeightKind {
    match weights {
        WeightSpec::Identity => WeightKind::Identity,
        WeightSpec::Explicit(_) => WeightKind::Explicit,
        WeightSpec::FromCovarianceModel(_) => WeightKind::FromCovarianceModel,
    }
}

fn factor_weight(v: &DMatrix<f64>) -> Result<SpdFactor> {
    SpdFactor::new(v, "V_i", 0.0).map_err(|_| Error::NotPositiveDefinite {
        min_eig: min_eigenvalue(v),
    })
}

/// Whitened normal equations `Σ Ũ'Ũ` and `Σ Ũ'ỹ` for the given response.
fn normal_equations(
    ds: &LongitudinalDataset,
    basis: &SplineBasis,
    v: Option<&[DMatrix<f64>]>,
    response: impl Fn(usize, &Subject) -> DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let dim = ds.p() + ds.q() * basis.dim();
    let mut h = DMatrix::zeros(dim, dim);
    let mut c = DVector::zeros(dim);
    for (i, s) in ds.subjects().iter().enumerate() {
        let mut u = subject_design(s, basis);
        let mut y = DMatrix::from_column_slice(s.len(), 1, response(i, s).as_slice());
        if let Some(v) = v {
            let f = factor_weight(&v[i])?;
            f.forward_mut(&mut u);
            f.forward_mut(&mut y);
        }
        h += u.transpose() * &u;
        c += u.transpose() * y.column(0);
    }
    Ok((symmetrize(&h), c))
}

/// Solves the GEE spline normal equations by block elimination.
pub fn gee_spline_fit(ds: &LongitudinalDataset, basis: &SplineBasis, weights: WeightSpec<'_>) -> Result<GeeFit> {
    let v = weight_matrices(ds, weights)?;
    let (h, c) = normal_equations(ds, basis, v.as_deref(), |_, s| DVector::from_column_slice(&s.y))?;
    let p = ds.p();
    let dim = h.nrows();
    let h11 = h.view((0, 0), (p, p)).into_owned();
    let h12 = h.view((0, p), (p, dim - p)).into_owned();
    let h22 = h.view((p, p), (dim - p, dim - p)).into_owned();
    let c1 = c.rows(0, p).into_owned();
    let c2 = c.rows(p, dim - p).into_owned();

    let f22 = SpdFactor::new(&h22, "H22", RANK_TOL)?;
    let h22_inv_h21 = f22.solve(&h12.transpose());
    let h11_dot2 = symmetrize(&(&h11 - &h12 * &h22_inv_h21));
    let f11 = SpdFactor::new(&h11_dot2, "H11.2", RANK_TOL)?;
    let rhs = &c1 - h22_inv_h21.transpose() * &c2;
    let beta = f11.solve_vec(&rhs);
    let gamma = f22.solve_vec(&(&c2 - h12.transpose() * &beta));

    let residuals = residuals(ds, basis, &beta, &gamma);
    Ok(GeeFit {
        beta,
        gamma,
        h11,
        h12,
        h22,
        h11_dot2,
        basis: basis.clone(),
        residuals,
        weights: kind(&weights),
    })
}

fn residuals(ds: &LongitudinalDataset, basis: &SplineBasis, beta: &DVector<f64>, gamma: &DVector<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(ds.n1());
    let mut coef = beta.as_slice().to_vec();
    coef.extend_from_slice(gamma.as_slice());
    let coef = DVector::from_vec(coef);
    for s in ds.subjects() {
        let fitted = subject_design(s, basis) * &coef;
        out.extend(s.y.iter().zip(fitted.iter()).map(|(y, f)| y - f));
    }
    out
}

/// `(Σ X'V⁻¹r, Σ W'V⁻¹r)` at the fit's residuals; both vanish at a solution.
pub fn estimating_equations(
    ds: &LongitudinalDataset,
    fit: &GeeFit,
    weights: WeightSpec<'_>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let v = weight_matrices(ds, weights)?;
    let p = ds.p();
    let dim = p + ds.q() * fit.basis.dim();
    let mut score = DVector::zeros(dim);
    let obs = ds.observations();
    for (i, s) in ds.subjects().iter().enumerate() {
        let u = subject_design(s, &fit.basis);
        let r = DVector::from_column_slice(&fit.residuals[obs.range(i)]);
        let vr = match &v {
            Some(v) => factor_weight(&v[i])?.solve_vec(&r),
            None => r,
        };
        score += u.transpose() * vr;
    }
    Ok((score.rows(0, p).into_owned(), score.rows(p, dim - p).into_owned()))
}

/// `γ̂` with `β` held fixed: solves `H22 γ = Σ W'V⁻¹(Y - Xβ)`.
pub fn gamma_given_beta(
    ds: &LongitudinalDataset,
    basis: &SplineBasis,
    beta: &DVector<f64>,
    weights: WeightSpec<'_>,
) -> Result<DVector<f64>> {
    if beta.len() != ds.p() {
        return Err(Error::Dimension(format!("beta has length {}, expected {}", beta.len(), ds.p())));
    }
    let v = weight_matrices(ds, weights)?;
    let (h, c) = normal_equations(ds, basis, v.as_deref(), |_, s| {
        DVector::from_column_slice(&s.y) - &s.x * beta
    })?;
    let p = ds.p();
    let dim = h.nrows();
    let h22 = h.view((p, p), (dim - p, dim - p)).into_owned();
    let c2 = c.rows(p, dim - p).into_owned();
    let f22 = SpdFactor::new(&h22, "H22", RANK_TOL)?;
    Ok(f22.solve_vec(&c2))
}

/// Standard errors of `β̂` from the first `p` diagonal entries of the model
/// or sandwich covariance.
pub fn beta_se(ds: &LongitudinalDataset, fit: &GeeFit, sigma: &[DMatrix<f64>], mode: SeMode) -> Result<DVector<f64>> {
    if sigma.len() != ds.n() {
        return Err(Error::Dimension(format!("{} covariance matrices for {} subjects", sigma.len(), ds.n())));
    }
    if mode == SeMode::Sandwich && fit.weights != WeightKind::Identity {
        return Err(Error::Config("sandwich standard errors need a working-independence fit".into()));
    }
    let p = fit.p();
    let basis = &fit.basis;
    let cov = match mode {
        SeMode::Model => {
            let (m, _) = normal_equations(ds, basis, Some(sigma), |_, s| DVector::zeros(s.len()))?;
            inverse_top_left(&m, p)?
        }
        SeMode::Sandwich => {
            let dim = p + ds.q() * basis.dim();
            let mut bread = DMatrix::zeros(dim, dim);
            let mut meat = DMatrix::zeros(dim, dim);
            for (s, sig) in ds.subjects().iter().zip(sigma) {
                if sig.nrows() != s.len() {
                    return Err(Error::Dimension(format!("subject `{}`: covariance size mismatch", s.id)));
                }
                let u = subject_design(s, basis);
                bread += u.transpose() * &u;
                meat += u.transpose() * sig * &u;
            }
            let inv = pd_inverse(&symmetrize(&bread))?;
            let full = &inv * symmetrize(&meat) * &inv;
            full.view((0, 0), (p, p)).into_owned()
        }
    };
    let mut se = DVector::zeros(p);
    for k in 0..p {
        let v = cov[(k, k)];
        if !(v >= 0.0) {
            return Err(Error::NotPositiveDefinite { min_eig: v });
        }
        se[k] = v.sqrt();
    }
    Ok(se)
}

fn pd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    SpdFactor::new(m, "SE", RANK_TOL)
        .map(|f| f.inverse())
        .map_err(|_| Error::NotPositiveDefinite {
            min_eig: min_eigenvalue(m),
        })
}

/// Top-left `p x p` block of `m⁻¹`, i.e. `(M11 - M12 M22⁻¹ M21)⁻¹`.
fn inverse_top_left(m: &DMatrix<f64>, p: usize) -> Result<DMatrix<f64>> {
    let dim = m.nrows();
    let m11 = m.view((0, 0), (p, p)).into_owned();
    let m12 = m.view((0, p), (p, dim - p)).into_owned();
    let m22 = m.view((p, p), (dim - p, dim - p)).into_owned();
    let f22 = SpdFactor::new(&m22, "SE", RANK_TOL).map_err(|_| Error::NotPositiveDefinite {
        min_eig: min_eigenvalue(&m22),
    })?;
    let schur = symmetrize(&(&m11 - &m12 * f22.solve(&m12.transpose())));
    pd_inverse(&schur)
}

/// Curves `γ̂_l' B(t)` on the evaluation points.
pub fn gamma_to_curves(fit: &GeeFit, eval_points: &[f64]) -> CurveEstimate {
    CurveEstimate::from_spline(&fit.basis, fit.gamma.as_slice(), eval_points.to_vec())
}
