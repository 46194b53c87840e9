//! Equispaced B-spline bases on `[0, 1]`.

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 15;

/// Clamped B-spline basis with equispaced interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    dim: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// `dim - degree - 1` interior knots at `k / (dim - degree)`, with the
    /// boundary knots repeated `degree + 1` times.
    pub fn new(dim: usize, degree: usize) -> Result<Self> {
        if dim < degree + 1 {
            return Err(Error::SplineDimension { kn: dim, degree });
        }
        if degree > MAX_DEGREE {
            return Err(Error::Config(format!("spline degree {degree} above {MAX_DEGREE}")));
        }
        let spans = dim - degree;
        let mut knots = vec![0.0; degree + 1];
        knots.extend((1..spans).map(|k| k as f64 / spans as f64));
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self { degree, dim, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.dim]
    }

    /// Index `mu` of the knot span holding `t`; `t = 1` goes to the last span.
    fn span(&self, t: f64) -> usize {
        let last = self.dim - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // knots[degree..=last] are the span starts
        let starts = &self.knots[self.degree..=last];
        self.degree + starts.partition_point(|&k| k <= t) - 1
    }

    /// The `degree + 1` possibly-nonzero basis values at `t`, and the index
    /// of the first one.
    pub fn eval_local(&self, t: f64, out: &mut [f64]) -> usize {
        let d = self.degree;
        let mu = self.span(t);
        let k = &self.knots;
        let mut left = [0.0f64; MAX_DEGREE + 1];
        let mut right = [0.0f64; MAX_DEGREE + 1];
        out[0] = 1.0;
        for j in 1..=d {
            left[j] = t - k[mu + 1 - j];
            right[j] = k[mu + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        mu - d
    }

    /// Evaluates the full basis vector `B(t)` of length `K_n`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfDomain { t });
        }
        let mut full = vec![0.0; self.dim];
        self.eval_into(t, &mut full);
        Ok(full)
    }

    /// Like [`eval`](Self::eval) without the domain check; `out` has length
    /// `K_n` and is overwritten.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let mut local = [0.0f64; MAX_DEGREE + 1];
        let start = self.eval_local(t, &mut local[..=self.degree]);
        out.fill(0.0);
        out[start..=start + self.degree].copy_from_slice(&local[..=self.degree]);
    }
}

/// `z ⊗ b`, blocked by z-coordinate: entry `l * K_n + k` is `z_l * b_k`.
pub fn design_row(z: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len() * b.len());
    for &zl in z {
        out.extend(b.iter().map(|bk| zl * bk));
    }
    out
}
