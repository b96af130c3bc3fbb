//! Nuisance handling.
//!
//! Residualizing both sides of a CCA against nuisance variables leaves the
//! rows of the residuals dependent, so they are no longer exchangeable. The
//! residuals are therefore mapped onto a semi-orthogonal basis `Q` of the
//! column space of the residual-forming matrix `R = I - Z Z+` (`Q'Q = I`,
//! `QQ' = R`), permuted in that lower-dimensional space, and, when the two
//! sides live in different spaces, mapped back to `N` rows with `Q`.
//!
//! Two bases are supported. Huh-Jhun takes the eigenvectors of `R` with unit
//! eigenvalue. Theil uses `Q = R S' (S R S')^-1/2` for a selection matrix `S`
//! that drops some observations; the remaining rows keep a one-to-one mapping
//! to the original observations, which is what block-restricted permutations
//! need.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::permute::BlockStructure;

/// `I - Z Z+` for a full-column-rank nuisance matrix `Z`.
#[derive(Debug, Clone)]
pub struct ResidualMatrix {
    pub r: Mat,
    /// `N` minus the number of nuisance columns.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisMethod {
    /// No nuisance on this side; `Q = I`.
    Identity,
    HuhJhun,
    Theil,
}

#[derive(Debug, Clone)]
pub struct SemiOrthoBasis {
    pub q: Mat,
    pub method: BasisMethod,
    /// Observations removed by the selection matrix (Theil only), ascending.
    pub dropped: Vec<usize>,
}

impl SemiOrthoBasis {
    pub fn identity(n: usize) -> Self {
        Self {
            q: Mat::identity(n, n),
            method: BasisMethod::Identity,
            dropped: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.q.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.q.ncols()
    }

    pub fn is_identity(&self) -> bool {
        self.method == BasisMethod::Identity
    }

    /// `Q' M`, skipping the product when `Q` is the identity.
    pub fn project(&self, m: &Mat) -> Result<Mat> {
        if m.nrows() != self.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "basis has {} rows, data has {}",
                self.nrows(),
                m.nrows()
            )));
        }
        if self.is_identity() {
            Ok(m.clone())
        } else {
            Ok(self.q.tr_mul(m))
        }
    }
}

/// Observations retained by a selection matrix `S` (the rows of the identity
/// that are kept).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionPlan {
    keep: Vec<usize>,
    n: usize,
}

impl SelectionPlan {
    pub fn new(keep: Vec<usize>, n: usize) -> Result<Self> {
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidOptions(
                "selection indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = keep.last() {
            if last >= n {
                return Err(Error::InvalidOptions(format!(
                    "selection index {last} out of range for {n} observations"
                )));
            }
        }
        Ok(Self { keep, n })
    }

    pub fn from_dropped(n: usize, dropped: &[usize]) -> Result<Self> {
        let keep = (0..n).filter(|i| !dropped.contains(i)).collect();
        Self::new(keep, n)
    }

    pub fn keep(&self) -> &[usize] {
        &self.keep
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dropped(&self) -> Vec<usize> {
        (0..self.n).filter(|i| self.keep.binary_search(i).is_err()).collect()
    }

    /// `S'`, an `N x N̄` matrix.
    pub fn transpose_matrix(&self) -> Mat {
        let mut s = Mat::zeros(self.n, self.keep.len());
        for (j, &i) in self.keep.iter().enumerate() {
            s[(i, j)] = 1.0;
        }
        s
    }
}

pub fn residual_matrix(z: &Mat) -> Result<ResidualMatrix> {
    linalg::qr_pivoted(z)?;
    let n = z.nrows();
    let r = Mat::identity(n, n) - z * linalg::pinv(z)?;
    let r = (&r + r.transpose()) * 0.5;
    Ok(ResidualMatrix {
        r,
        rank: n - z.ncols(),
    })
}

/// Huh-Jhun basis when `selection` is `None`, Theil otherwise.
pub fn semiortho(res: &ResidualMatrix, selection: Option<&SelectionPlan>) -> Result<SemiOrthoBasis> {
    let n = res.r.nrows();
    match selection {
        None => {
            let eig = linalg::sym_eig(&res.r)?;
            let keep = eig.values.iter().take_while(|&&e| e > 0.5).count();
            Ok(SemiOrthoBasis {
                q: eig.vectors.columns(0, keep).into_owned(),
                method: BasisMethod::HuhJhun,
                dropped: Vec::new(),
            })
        }
        Some(plan) => {
            if plan.n() != n {
                return Err(Error::DimensionMismatch(format!(
                    "selection plan is for {} observations, residual matrix has {n}",
                    plan.n()
                )));
            }
            let keep = plan.keep();
            let rs = Mat::from_fn(n, keep.len(), |i, j| res.r[(i, keep[j])]);
            let srs = Mat::from_fn(keep.len(), keep.len(), |i, j| res.r[(keep[i], keep[j])]);
            let w = linalg::inv_sqrt_psd(&srs)?;
            Ok(SemiOrthoBasis {
                q: rs * w,
                method: BasisMethod::Theil,
                dropped: plan.dropped(),
            })
        }
    }
}

fn leverages(z: &Mat) -> Result<Vec<f64>> {
    let h = z * linalg::pinv(z)?;
    Ok((0..z.nrows()).map(|i| h[(i, i)]).collect())
}

fn rows_rank(m: &Mat, rows: &[usize]) -> Result<usize> {
    if rows.is_empty() || m.ncols() == 0 {
        return Ok(0);
    }
    linalg::rank(&linalg::select_rows(m, rows))
}

/// Chooses `max(R, S)` observations to drop for the Theil basis.
///
/// Candidates are ranked by: membership of a block whose size occurs only once
/// (such observations can barely be permuted anyway), then leverage on the
/// nuisance variables, then the larger index. An observation is accepted only
/// if it raises the rank of the dropped rows of `Z` or `W` while that side is
/// still short of full rank.
pub fn default_selection(
    z: &Mat,
    w: Option<&Mat>,
    blocks: Option<&BlockStructure>,
) -> Result<SelectionPlan> {
    let n = z.nrows();
    let r = z.ncols();
    let s = w.map_or(0, |w| w.ncols());
    if let Some(w) = w {
        if w.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "Z has {n} rows, W has {}",
                w.nrows()
            )));
        }
    }
    let drops = r.max(s);
    if drops >= n {
        return Err(Error::NoValidSelection(format!(
            "cannot drop {drops} of {n} observations"
        )));
    }

    let mut lev = leverages(z)?;
    if let Some(w) = w {
        for (l, lw) in lev.iter_mut().zip(leverages(w)?) {
            *l += lw;
        }
    }
    let unique_block = match blocks {
        Some(b) => {
            if b.len() != n {
                return Err(Error::InvalidBlocks(format!(
                    "{} block labels for {n} observations",
                    b.len()
                )));
            }
            let groups = b.groups();
            let mut flag = vec![false; n];
            for g in &groups {
                if groups.iter().filter(|h| h.len() == g.len()).count() == 1 {
                    g.iter().for_each(|&i| flag[i] = true);
                }
            }
            flag
        }
        None => vec![false; n],
    };

    // leverages are compared after rounding so that numerically equal values
    // fall through to the index tie-break
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| {
        let lev_key = (lev[i] * 1e8).round() as i64;
        std::cmp::Reverse((unique_block[i], lev_key, i))
    });

    let mut dropped: Vec<usize> = Vec::with_capacity(drops);
    let mut rank_z = 0;
    let mut rank_w = 0;
    for &cand in &order {
        if dropped.len() == drops {
            break;
        }
        let mut trial = dropped.clone();
        trial.push(cand);
        let new_z = rows_rank(z, &trial)?;
        let new_w = match w {
            Some(w) => rows_rank(w, &trial)?,
            None => 0,
        };
        let z_full = rank_z == r;
        let w_full = rank_w == s;
        let useful = (!z_full && new_z > rank_z) || (!w_full && new_w > rank_w) || (z_full && w_full);
        if useful {
            dropped = trial;
            rank_z = new_z;
            rank_w = new_w;
        }
    }
    if dropped.len() != drops || rank_z != r || rank_w != s {
        return Err(Error::NoValidSelection(format!(
            "no set of {drops} rows gives full-rank nuisance rows (reached rank {rank_z}/{r} and {rank_w}/{s})"
        )));
    }
    dropped.sort_unstable();
    SelectionPlan::from_dropped(n, &dropped)
}

/// How nuisance variables are removed before permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Residualization {
    /// No nuisance variables.
    None,
    /// Plain `R Y` residuals permuted in `N` rows. Not exchangeable; kept to
    /// demonstrate the inflation it causes.
    Simple,
    HuhJhun,
    Theil,
}

/// Which sides carry nuisance variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    Full,
    Partial,
    Part,
    Bipartial,
}

/// Residualized sides plus the bases needed to place permutations.
#[derive(Debug, Clone)]
pub struct PreparedSides {
    /// `Qz' Y`.
    pub yt: Mat,
    /// `Qw' X`.
    pub xt: Mat,
    pub qz: SemiOrthoBasis,
    pub qw: SemiOrthoBasis,
    pub layout: Layout,
    pub method: Residualization,
    /// Sides live in different row spaces and must be mapped back to `N` rows
    /// after permutation.
    pub lift: bool,
    /// Both sides are permuted independently.
    pub both_sides: bool,
    /// Nuisance column counts.
    pub r: usize,
    pub s: usize,
    /// Selection used for Theil.
    pub selection: Option<SelectionPlan>,
}

impl PreparedSides {
    pub fn n(&self) -> usize {
        self.qz.nrows()
    }
}

/// Residualizes `y` and `x`.
///
/// With `partial` and no `w`, `z` is used for both sides. Passing `selection`
/// selects the Theil basis (the same `S` for both sides); `simple` selects
/// plain residuals and ignores `selection`.
pub fn prepare_sides(
    y: &Mat,
    x: &Mat,
    z: Option<&Mat>,
    w: Option<&Mat>,
    partial: bool,
    selection: Option<&SelectionPlan>,
    simple: bool,
) -> Result<PreparedSides> {
    let n = y.nrows();
    for (name, m) in [("X", Some(x)), ("Z", z), ("W", w)] {
        if let Some(m) = m {
            if m.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "Y has {n} rows, {name} has {}",
                    m.nrows()
                )));
            }
        }
    }
    let (z, w, layout) = match (z, w) {
        (None, None) => (None, None, Layout::Full),
        (Some(z), None) if partial => (Some(z), Some(z), Layout::Partial),
        (Some(z), None) => (Some(z), None, Layout::Part),
        (None, Some(w)) => (None, Some(w), Layout::Part),
        (Some(z), Some(w)) => (Some(z), Some(w), Layout::Bipartial),
    };
    let r = z.map_or(0, |m| m.ncols());
    let s = w.map_or(0, |m| m.ncols());

    if layout == Layout::Full {
        if selection.is_some() && !simple {
            return Err(Error::InvalidOptions(
                "a selection plan needs nuisance variables".into(),
            ));
        }
        return Ok(PreparedSides {
            yt: y.clone(),
            xt: x.clone(),
            qz: SemiOrthoBasis::identity(n),
            qw: SemiOrthoBasis::identity(n),
            layout,
            method: Residualization::None,
            lift: false,
            both_sides: false,
            r,
            s,
            selection: None,
        });
    }

    if simple {
        let yt = match z {
            Some(z) => residual_matrix(z)?.r * y,
            None => y.clone(),
        };
        let xt = match w {
            Some(w) => residual_matrix(w)?.r * x,
            None => x.clone(),
        };
        return Ok(PreparedSides {
            yt,
            xt,
            qz: SemiOrthoBasis::identity(n),
            qw: SemiOrthoBasis::identity(n),
            layout,
            method: Residualization::Simple,
            lift: false,
            both_sides: false,
            r,
            s,
            selection: None,
        });
    }

    if let Some(plan) = selection {
        let expected = n - r.max(s);
        if plan.n() != n || plan.keep().len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "selection keeps {} of {} observations, expected {expected} of {n}",
                plan.keep().len(),
                plan.n()
            )));
        }
    }

    let side_basis = |nuisance: Option<&Mat>| -> Result<SemiOrthoBasis> {
        match (nuisance, selection) {
            (Some(m), sel) => semiortho(&residual_matrix(m)?, sel),
            (None, Some(plan)) => Ok(SemiOrthoBasis {
                q: plan.transpose_matrix(),
                method: BasisMethod::Theil,
                dropped: plan.dropped(),
            }),
            (None, None) => Ok(SemiOrthoBasis::identity(n)),
        }
    };
    let qz = side_basis(z)?;
    let qw = if layout == Layout::Partial {
        qz.clone()
    } else {
        side_basis(w)?
    };
    let yt = qz.project(y)?;
    let xt = qw.project(x)?;
    let lift = matches!(layout, Layout::Part | Layout::Bipartial);
    let both_sides = lift && yt.nrows() != xt.nrows();
    Ok(PreparedSides {
        yt,
        xt,
        qz,
        qw,
        layout,
        method: if selection.is_some() {
            Residualization::Theil
        } else {
            Residualization::HuhJhun
        },
        lift,
        both_sides,
        r,
        s,
        selection: selection.cloned(),
    })
}

/// Applies a permutation to already projected data `side` (`Q' M`). With
/// `lift`, the result is mapped back to `N` rows as `Q P Q' M`; otherwise `P Q' M`
/// is returned.
pub fn place_permutation(side: &Mat, q: &SemiOrthoBasis, perm: &[usize], lift: bool) -> Result<Mat> {
    if perm.len() != side.nrows() || side.nrows() != q.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "permutation of length {}, data with {} rows, basis with {} columns",
            perm.len(),
            side.nrows(),
            q.ncols()
        )));
    }
    let permuted = linalg::permute_rows(side, perm);
    if lift && !q.is_identity() {
        Ok(&q.q * permuted)
    } else {
        Ok(permuted)
    }
}
