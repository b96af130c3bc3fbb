//! Canonical correlation analysis by QR of each side followed by an SVD of
//! the product of the orthonormal factors.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Problem sizes. `r` and `s` count nuisance columns on the left and right
/// sides, including an intercept when one is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemDims {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub r: usize,
    pub s: usize,
    pub n_prime: usize,
    pub n_dprime: usize,
}

impl ProblemDims {
    pub fn new(n: usize, p: usize, q: usize, r: usize, s: usize) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::InvalidDims(format!(
                "both sides need at least one variable (P={p}, Q={q})"
            )));
        }
        if n < p + q {
            return Err(Error::InvalidDims(format!(
                "need N >= P + Q observations, got N={n}, P={p}, Q={q}"
            )));
        }
        if r >= n || s >= n {
            return Err(Error::InvalidDims(format!(
                "nuisance counts R={r}, S={s} must be below N={n}"
            )));
        }
        Ok(Self {
            n,
            p,
            q,
            k: p.min(q),
            r,
            s,
            n_prime: n - r,
            n_dprime: n - s,
        })
    }
}

/// Canonical coefficients and correlations. Columns of `a` and `b` pair up
/// with entries of `r`, which are sorted in descending order.
#[derive(Debug, Clone)]
pub struct CcaFit {
    pub a: Mat,
    pub b: Mat,
    pub r: Vec<f64>,
}

impl CcaFit {
    pub fn k(&self) -> usize {
        self.r.len()
    }
}

/// Population (or sample) covariance blocks for the eigenvalue formulation.
#[derive(Debug, Clone)]
pub struct CovBlocks {
    pub syy: Mat,
    pub sxx: Mat,
    pub syx: Mat,
}

impl CovBlocks {
    /// Sample cross-products of already centered data (unscaled).
    pub fn from_data(y: &Mat, x: &Mat) -> Result<Self> {
        same_rows(y, x)?;
        Ok(Self {
            syy: y.transpose() * y,
            sxx: x.transpose() * x,
            syx: y.transpose() * x,
        })
    }
}

fn same_rows(y: &Mat, x: &Mat) -> Result<()> {
    if y.nrows() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "left side has {} rows, right side has {}",
            y.nrows(),
            x.nrows()
        )));
    }
    Ok(())
}

pub fn center_columns(m: &Mat) -> Mat {
    let mut out = m.clone();
    let rows = m.nrows().max(1) as f64;
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / rows;
        col.add_scalar_mut(-mean);
    }
    out
}

/// Solves `R x = b` for upper-triangular `R` (square, leading block of the QR
/// factor) and returns `x` with rows reordered by the pivot permutation.
fn unpivot_solve(qr: &linalg::PivotedQr, rhs: &Mat) -> Result<Mat> {
    let cols = qr.perm.len();
    let r = qr.r.view((0, 0), (cols, cols));
    let sol = r
        .solve_upper_triangular(rhs)
        .ok_or(Error::SingularMatrix)?;
    let mut out = Mat::zeros(cols, rhs.ncols());
    for (i, &p) in qr.perm.iter().enumerate() {
        out.row_mut(p).copy_from(&sol.row(i));
    }
    Ok(out)
}

/// CCA of pre-centered (or pre-residualized) `y` and `x`.
///
/// `r` and `s` are the degrees of freedom already consumed on each side; the
/// canonical coefficients are scaled by `sqrt(rows - r)` and `sqrt(rows - s)`
/// so that the canonical variables have unit variance. They do not affect the
/// correlations.
pub fn cca(y: &Mat, x: &Mat, r: usize, s: usize) -> Result<CcaFit> {
    same_rows(y, x)?;
    if y.ncols() == 0 || x.ncols() == 0 {
        return Err(Error::InvalidDims("CCA needs at least one column per side".into()));
    }
    let n = y.nrows();
    let k = y.ncols().min(x.ncols());
    let qr_y = linalg::qr_pivoted(y)?;
    let qr_x = linalg::qr_pivoted(x)?;
    let cross = qr_y.q.transpose() * &qr_x.q;
    let dec = linalg::svd(&cross)?;

    let corr: Vec<f64> = dec.d.iter().take(k).map(|d| d.clamp(0.0, 1.0)).collect();
    let l = dec.u.columns(0, k).into_owned();
    let m = dec.v.columns(0, k).into_owned();

    let scale_y = (n.saturating_sub(r) as f64).sqrt();
    let scale_x = (n.saturating_sub(s) as f64).sqrt();
    let a = unpivot_solve(&qr_y, &l)? * scale_y;
    let b = unpivot_solve(&qr_x, &m)? * scale_x;
    Ok(CcaFit { a, b, r: corr })
}

/// Canonical correlations from the eigenvalues of
/// `Syy^-1 Syx Sxx^-1 Sxy`, computed through the symmetric similar matrix
/// `Syy^-1/2 Syx Sxx^-1 Sxy Syy^-1/2`. Used as an independent check on
/// [`cca`].
pub fn cca_eig_oracle(cov: &CovBlocks) -> Result<Vec<f64>> {
    let p = cov.syy.nrows();
    let q = cov.sxx.nrows();
    if cov.syx.shape() != (p, q) {
        return Err(Error::DimensionMismatch(format!(
            "Syx is {}x{}, expected {p}x{q}",
            cov.syx.nrows(),
            cov.syx.ncols()
        )));
    }
    let syy_isqrt = linalg::inv_sqrt_psd(&cov.syy)?;
    let sxx_isqrt = linalg::inv_sqrt_psd(&cov.sxx)?;
    let sxx_inv = &sxx_isqrt * &sxx_isqrt;
    let m = &syy_isqrt * &cov.syx * sxx_inv * cov.syx.transpose() * &syy_isqrt;
    let m = (&m + m.transpose()) * 0.5;
    let eig = linalg::sym_eig(&m)?;
    Ok(eig
        .values
        .iter()
        .take(p.min(q))
        .map(|&e| e.max(0.0).sqrt().min(1.0))
        .collect())
}

/// Canonical variables. With `augment`, the coefficient matrices are extended
/// by an orthonormal basis of their orthogonal complement so that the result
/// spans the same column spaces as `y` and `x`.
pub fn canonical_variables(y: &Mat, x: &Mat, fit: &CcaFit, augment: bool) -> Result<(Mat, Mat)> {
    same_rows(y, x)?;
    if fit.a.nrows() != y.ncols() || fit.b.nrows() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "coefficients are {}x{} and {}x{} for data with {} and {} columns",
            fit.a.nrows(),
            fit.a.ncols(),
            fit.b.nrows(),
            fit.b.ncols(),
            y.ncols(),
            x.ncols()
        )));
    }
    let (a, b) = coefficient_bases(fit, augment)?;
    Ok((y * a, x * b))
}

/// Canonical coefficients, extended by an orthonormal basis of their
/// orthogonal complement when `augment` is set.
pub fn coefficient_bases(fit: &CcaFit, augment: bool) -> Result<(Mat, Mat)> {
    if !augment {
        return Ok((fit.a.clone(), fit.b.clone()));
    }
    Ok((
        linalg::hcat(&fit.a, &linalg::null_basis(&fit.a)?)?,
        linalg::hcat(&fit.b, &linalg::null_basis(&fit.b)?)?,
    ))
}
