//! Dense linear-algebra kernel.
//!
//! Matrices are `nalgebra::DMatrix<f64>` with observations in rows. The
//! pivoted Householder QR is implemented here because rank decisions and
//! column ordering feed directly into the CCA estimator; SVD and symmetric
//! eigendecomposition are delegated to nalgebra and post-processed into a
//! deterministic form (descending order, fixed signs).

use nalgebra::{DMatrix, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Dense real matrix, rows are observations.
pub type Mat = DMatrix<f64>;

/// Relative tolerance on `|R_ii| / |R_11|` below which a pivoted QR declares
/// rank loss.
pub const QR_RANK_TOL: f64 = 1e-10;

/// Scale applied to `max(rows, cols) * d_max` when truncating singular values
/// in the pseudo-inverse.
pub const PINV_TOL: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 10_000;
// nalgebra's bidiagonal SVD can stop on a wrong answer for rank-deficient
// input when given machine epsilon itself; its own default is five times that.
const SVD_EPS: f64 = 5.0 * f64::EPSILON;

pub fn check_finite(m: &Mat) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Result of a column-pivoted QR factorization `M[:, perm] = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Orthonormal columns; `rows x min(rows, cols)` when thin, `rows x rows` when full.
    pub q: Mat,
    /// Upper-triangular (trapezoidal), non-negative diagonal with non-increasing magnitude.
    pub r: Mat,
    /// Column `i` of `Q R` is column `perm[i]` of the input.
    pub perm: Vec<usize>,
    /// Numerical rank under [`QR_RANK_TOL`].
    pub rank: usize,
}

impl PivotedQr {
    /// Permutation matrix `T` with `M T = Q R`.
    pub fn perm_matrix(&self) -> Mat {
        let n = self.perm.len();
        let mut t = Mat::zeros(n, n);
        for (i, &p) in self.perm.iter().enumerate() {
            t[(p, i)] = 1.0;
        }
        t
    }
}

/// Householder QR. `pivot` selects the remaining column of largest norm at each
/// step; `full` accumulates the complete square `Q`.
pub(crate) fn householder_qr(m: &Mat, pivot: bool, full: bool) -> PivotedQr {
    let (rows, cols) = m.shape();
    let steps = rows.min(cols);
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(steps);

    for j in 0..steps {
        if pivot {
            let mut best = j;
            let mut best_norm = -1.0;
            for c in j..cols {
                let norm: f64 = (j..rows).map(|i| a[(i, c)] * a[(i, c)]).sum();
                if norm > best_norm {
                    best_norm = norm;
                    best = c;
                }
            }
            if best != j {
                a.swap_columns(j, best);
                perm.swap(j, best);
            }
        }

        let norm_x: f64 = (j..rows).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt();
        let mut v: Vec<f64> = (j..rows).map(|i| a[(i, j)]).collect();
        if norm_x == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm_x } else { norm_x };
        v[0] -= alpha;
        let vnorm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);

        for c in j..cols {
            let dot: f64 = v.iter().enumerate().map(|(t, vt)| vt * a[(j + t, c)]).sum();
            if dot != 0.0 {
                for (t, vt) in v.iter().enumerate() {
                    a[(j + t, c)] -= 2.0 * vt * dot;
                }
            }
        }
        for i in (j + 1)..rows {
            a[(i, j)] = 0.0;
        }
        reflectors.push(v);
    }

    let qcols = if full { rows } else { steps };
    let mut q = Mat::identity(rows, qcols);
    for j in (0..steps).rev() {
        let v = &reflectors[j];
        if v.is_empty() {
            continue;
        }
        for c in 0..qcols {
            let dot: f64 = v.iter().enumerate().map(|(t, vt)| vt * q[(j + t, c)]).sum();
            if dot != 0.0 {
                for (t, vt) in v.iter().enumerate() {
                    q[(j + t, c)] -= 2.0 * vt * dot;
                }
            }
        }
    }

    let rrows = if full { rows } else { steps };
    let mut r = Mat::zeros(rrows, cols);
    for i in 0..steps {
        for c in i..cols {
            r[(i, c)] = a[(i, c)];
        }
    }
    for i in 0..steps {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }

    let rank = numerical_rank(&r, steps);
    PivotedQr { q, r, perm, rank }
}

fn numerical_rank(r: &Mat, steps: usize) -> usize {
    if steps == 0 {
        return 0;
    }
    let lead = r[(0, 0)].abs();
    if lead == 0.0 {
        return 0;
    }
    (0..steps)
        .take_while(|&i| r[(i, i)].abs() > QR_RANK_TOL * lead)
        .count()
}

/// Thin column-pivoted QR; fails with `RankDeficient` when the numerical rank
/// is below the column count.
pub fn qr_pivoted(m: &Mat) -> Result<PivotedQr> {
    check_finite(m)?;
    let qr = householder_qr(m, true, false);
    if qr.rank < m.ncols() {
        return Err(Error::RankDeficient {
            rank: qr.rank,
            cols: m.ncols(),
        });
    }
    Ok(qr)
}

/// Thin singular value decomposition `M = U diag(d) V'`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub d: Vec<f64>,
    pub v: Mat,
}

/// Index of the first entry whose magnitude is non-negligible relative to the
/// largest one in the column.
fn leading_entry(col: impl Iterator<Item = f64> + Clone) -> Option<usize> {
    let max = col.clone().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return None;
    }
    col.enumerate()
        .find(|(_, x)| x.abs() > 1e-8 * max)
        .map(|(i, _)| i)
}

fn fix_sign(col: &mut [f64]) -> bool {
    if let Some(i) = leading_entry(col.iter().copied()) {
        if col[i] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
            return true;
        }
    }
    false
}

pub fn svd(m: &Mat) -> Result<Svd> {
    check_finite(m)?;
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(Svd {
            u: Mat::zeros(rows, 0),
            d: Vec::new(),
            v: Mat::zeros(cols, 0),
        });
    }
    let dec = SVD::try_new(m.clone(), true, true, SVD_EPS, MAX_SWEEPS)
        .ok_or(Error::NoConvergence)?;
    let u_raw = dec.u.ok_or(Error::NoConvergence)?;
    let vt_raw = dec.v_t.ok_or(Error::NoConvergence)?;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        dec.singular_values[b]
            .partial_cmp(&dec.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut u = Mat::zeros(rows, k);
    let mut v = Mat::zeros(cols, k);
    let mut d = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        d.push(dec.singular_values[src].max(0.0));
        let mut ucol: Vec<f64> = u_raw.column(src).iter().copied().collect();
        let mut vcol: Vec<f64> = vt_raw.row(src).iter().copied().collect();
        if fix_sign(&mut ucol) {
            vcol.iter_mut().for_each(|x| *x = -*x);
        }
        u.column_mut(dst).copy_from_slice(&ucol);
        v.column_mut(dst).copy_from_slice(&vcol);
    }
    Ok(Svd { u, d, v })
}

/// Singular values only, descending.
pub fn singular_values(m: &Mat) -> Result<Vec<f64>> {
    if m.nrows().min(m.ncols()) == 0 {
        return Ok(Vec::new());
    }
    let dec = SVD::try_new(m.clone(), false, false, SVD_EPS, MAX_SWEEPS)
        .ok_or(Error::NoConvergence)?;
    let mut d: Vec<f64> = dec.singular_values.iter().map(|x| x.max(0.0)).collect();
    d.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(d)
}

/// Spectral decomposition `M V = V diag(e)` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub vectors: Mat,
    pub values: Vec<f64>,
}

pub fn sym_eig(m: &Mat) -> Result<SymEig> {
    check_finite(m)?;
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "sym_eig requires a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    if n == 0 {
        return Ok(SymEig {
            vectors: Mat::zeros(0, 0),
            values: Vec::new(),
        });
    }
    let sym = (m + m.transpose()) * 0.5;
    let dec = SymmetricEigen::try_new(sym, f64::EPSILON, MAX_SWEEPS).ok_or(Error::NoConvergence)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        dec.eigenvalues[b]
            .partial_cmp(&dec.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vectors = Mat::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(dec.eigenvalues[src]);
        let mut col: Vec<f64> = dec.eigenvectors.column(src).iter().copied().collect();
        fix_sign(&mut col);
        vectors.column_mut(dst).copy_from_slice(&col);
    }
    Ok(SymEig { vectors, values })
}

/// Moore-Penrose pseudo-inverse.
pub fn pinv(m: &Mat) -> Result<Mat> {
    let (rows, cols) = m.shape();
    let dec = svd(m)?;
    let dmax = dec.d.first().copied().unwrap_or(0.0);
    let cutoff = PINV_TOL * rows.max(cols) as f64 * dmax;
    let mut out = Mat::zeros(cols, rows);
    for (i, &di) in dec.d.iter().enumerate() {
        if di > cutoff && di > 0.0 {
            out += dec.v.column(i) * dec.u.column(i).transpose() / di;
        }
    }
    Ok(out)
}

/// Orthonormal basis of the orthogonal complement of the column space of `m`,
/// i.e. `null(m')`. Returns a `rows x 0` matrix when `m` has full row rank.
pub fn null_basis(m: &Mat) -> Result<Mat> {
    check_finite(m)?;
    let rows = m.nrows();
    if m.ncols() == 0 {
        return Ok(Mat::identity(rows, rows));
    }
    let qr = householder_qr(m, true, true);
    let mut basis = qr.q.columns(qr.rank, rows - qr.rank).into_owned();
    for mut col in basis.column_iter_mut() {
        let mut tmp: Vec<f64> = col.iter().copied().collect();
        if fix_sign(&mut tmp) {
            col.neg_mut();
        }
    }
    Ok(basis)
}

/// Symmetric inverse square root of a positive definite matrix.
pub fn inv_sqrt_psd(m: &Mat) -> Result<Mat> {
    let eig = sym_eig(m)?;
    let max = eig.values.first().copied().unwrap_or(0.0);
    let min = eig.values.last().copied().unwrap_or(0.0);
    if max <= 0.0 || min <= 1e-10 * max {
        return Err(Error::SingularMatrix);
    }
    let n = m.nrows();
    let mut scaled = eig.vectors.clone();
    for (j, &e) in eig.values.iter().enumerate() {
        let s = 1.0 / e.sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    let w = &scaled * eig.vectors.transpose();
    debug_assert_eq!(w.shape(), (n, n));
    Ok((&w + w.transpose()) * 0.5)
}

/// Row `i` of the output is row `perm[i]` of `m`.
pub fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
    debug_assert_eq!(perm.len(), m.nrows());
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], j)])
}

pub fn select_rows(m: &Mat, keep: &[usize]) -> Mat {
    Mat::from_fn(keep.len(), m.ncols(), |i, j| m[(keep[i], j)])
}

pub fn hcat(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "cannot concatenate {} rows with {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    Ok(out)
}

/// Numerical rank from singular values with the pseudo-inverse cutoff.
pub fn rank(m: &Mat) -> Result<usize> {
    let d = singular_values(m)?;
    let dmax = d.first().copied().unwrap_or(0.0);
    let cutoff = PINV_TOL * m.nrows().max(m.ncols()) as f64 * dmax;
    Ok(d.iter().filter(|&&x| x > cutoff && x > 0.0).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn qr_identity_is_trivial() {
        let qr = qr_pivoted(&Mat::identity(3, 3)).unwrap();
        assert_eq!(qr.q, Mat::identity(3, 3));
        assert_eq!(qr.r, Mat::identity(3, 3));
        assert_eq!(qr.perm, vec![0, 1, 2]);
    }

    #[test]
    fn qr_duplicated_column_is_rank_deficient() {
        let mut m = random(6, 3, 1);
        let c0 = m.column(0).into_owned();
        m.set_column(2, &c0);
        assert!(matches!(
            qr_pivoted(&m),
            Err(Error::RankDeficient { rank: 2, cols: 3 })
        ));
    }

    #[test]
    fn qr_reconstructs_with_pivoting() {
        let m = random(10, 4, 2);
        let qr = qr_pivoted(&m).unwrap();
        let mt = &m * qr.perm_matrix();
        assert!(rel_err(&(&qr.q * &qr.r), &mt) < 1e-10);
        assert!((qr.q.transpose() * &qr.q - Mat::identity(4, 4)).amax() < 1e-12);
        for i in 1..4 {
            assert!(qr.r[(i, i)].abs() <= qr.r[(i - 1, i - 1)].abs() + 1e-14);
        }
    }

    #[test]
    fn svd_diagonal_and_zero() {
        let d = svd(&Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 3.0, 2.0]))).unwrap();
        assert_eq!(d.d.len(), 3);
        for (got, want) in d.d.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        let z = svd(&Mat::zeros(3, 2)).unwrap();
        assert!(z.d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn svd_reconstructs_random() {
        let m = random(6, 4, 3);
        let s = svd(&m).unwrap();
        let rec = &s.u * Mat::from_diagonal(&nalgebra::DVector::from_vec(s.d.clone())) * s.v.transpose();
        assert!(rel_err(&rec, &m) < 1e-10);
        assert!((s.u.transpose() * &s.u - Mat::identity(4, 4)).amax() < 1e-12);
        assert!((s.v.transpose() * &s.v - Mat::identity(4, 4)).amax() < 1e-12);
        assert!(s.d.windows(2).all(|w| w[0] >= w[1]));
        // wide input goes through the same path
        let w = random(3, 5, 4);
        let s = svd(&w).unwrap();
        let rec = &s.u * Mat::from_diagonal(&nalgebra::DVector::from_vec(s.d.clone())) * s.v.transpose();
        assert!(rel_err(&rec, &w) < 1e-10);
    }

    #[test]
    fn svd_is_deterministic_in_sign() {
        let m = random(5, 3, 5);
        let a = svd(&m).unwrap();
        let b = svd(&(-&m)).unwrap();
        assert!((&a.u - &b.u).amax() < 1e-12);
        assert!((&a.v + &b.v).amax() < 1e-12);
        for j in 0..3 {
            let lead = leading_entry(a.u.column(j).iter().copied()).unwrap();
            assert!(a.u[(lead, j)] > 0.0);
        }
    }

    #[test]
    fn svd_of_rank_one_matrix() {
        let m = Mat::from_fn(10, 3, |i, j| (i as f64 - 4.5) * (j as f64 + 1.0));
        let dec = svd(&m).unwrap();
        assert!((dec.d[0] - m.norm()).abs() < 1e-10, "{:?}", dec.d);
        assert!(dec.d[1] < 1e-10);
        assert!((singular_values(&m).unwrap()[0] - m.norm()).abs() < 1e-10);
    }

    #[test]
    fn sym_eig_cases() {
        let e = sym_eig(&Mat::identity(3, 3)).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-14));

        let c = Mat::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        let e = sym_eig(&c).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14 && e.values[1].abs() < 1e-14);

        let g = random(5, 5, 6);
        let s = &g + g.transpose();
        let e = sym_eig(&s).unwrap();
        let lhs = &s * &e.vectors;
        let rhs = &e.vectors * Mat::from_diagonal(&nalgebra::DVector::from_vec(e.values.clone()));
        assert!((lhs - rhs).norm() <= 1e-10 * s.norm());
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn svd_matches_eig_on_psd() {
        let g = random(7, 5, 7);
        let s = g.transpose() * &g;
        let d = singular_values(&s).unwrap();
        let e = sym_eig(&s).unwrap().values;
        for (a, b) in d.iter().zip(&e) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn pinv_cases() {
        let m = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let inv = m.clone().try_inverse().unwrap();
        assert!((pinv(&m).unwrap() - inv).amax() < 1e-12);

        let z = pinv(&Mat::zeros(3, 2)).unwrap();
        assert_eq!(z.shape(), (2, 3));
        assert!(z.iter().all(|&v| v == 0.0));

        // (Z'Z)^-1 Z' for a column of ones
        let ones = Mat::from_element(4, 1, 1.0);
        let p = pinv(&ones).unwrap();
        assert_eq!(p.shape(), (1, 4));
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-14));
    }

    #[test]
    fn pinv_satisfies_penrose_conditions() {
        let mut m = random(6, 4, 8);
        let c = m.column(0) + m.column(1);
        m.set_column(3, &c);
        let p = pinv(&m).unwrap();
        assert!((&m * &p * &m - &m).amax() < 1e-10);
        assert!((&p * &m * &p - &p).amax() < 1e-10);
        let mp = &m * &p;
        let pm = &p * &m;
        assert!((&mp - mp.transpose()).amax() < 1e-10);
        assert!((&pm - pm.transpose()).amax() < 1e-10);
    }

    #[test]
    fn pinv_of_projector_is_itself() {
        let z = random(6, 2, 9);
        let q = householder_qr(&z, true, false).q;
        let proj = Mat::identity(6, 6) - &q * q.transpose();
        assert!((pinv(&proj).unwrap() - &proj).amax() < 1e-10);
    }

    #[test]
    fn null_basis_cases() {
        let m = Mat::identity(3, 3).columns(0, 2).into_owned();
        let n = null_basis(&m).unwrap();
        assert_eq!(n.shape(), (3, 1));
        assert!((n[(2, 0)].abs() - 1.0).abs() < 1e-14);

        let sq = random(4, 4, 10);
        assert_eq!(null_basis(&sq).unwrap().shape(), (4, 0));

        let r = random(5, 2, 11);
        let n = null_basis(&r).unwrap();
        assert_eq!(n.shape(), (5, 3));
        assert!((r.transpose() * &n).amax() < 1e-10);
        assert!((n.transpose() * &n - Mat::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn inv_sqrt_cases() {
        assert!((inv_sqrt_psd(&Mat::identity(3, 3)).unwrap() - Mat::identity(3, 3)).amax() < 1e-14);
        let d = Mat::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let w = inv_sqrt_psd(&d).unwrap();
        assert!((w[(0, 0)] - 0.5).abs() < 1e-14 && (w[(1, 1)] - 1.0 / 3.0).abs() < 1e-14);

        let g = random(4, 4, 12);
        let spd = g.transpose() * &g + Mat::identity(4, 4);
        let w = inv_sqrt_psd(&spd).unwrap();
        assert!((&w * &spd * &w - Mat::identity(4, 4)).amax() < 1e-8);

        let singular = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(inv_sqrt_psd(&singular), Err(Error::SingularMatrix));
    }
}
