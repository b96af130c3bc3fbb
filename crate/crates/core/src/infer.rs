//! Stepwise permutation inference for CCA.
//!
//! The observed canonical variables (optionally augmented by the orthogonal
//! complement of the coefficients, so that each side keeps the full column
//! space of the data) are permuted, and at step `k` a fresh CCA of the
//! trailing columns `[u_k..]`, `[v_k..]` is fitted. Components already
//! tested are thus removed from every permuted problem. Each step's
//! statistic is compared with its unpermuted value; the counts give
//! uncorrected p-values, and their running maximum gives p-values adjusted by
//! closed testing.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::linalg::Cholesky;
use rayon::prelude::*;
use statrs::function::gamma::gamma_ur;

use crate::cca::{self, ProblemDims};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::permute::{self, BlockStructure, PermutationPair};
use crate::residualize::{self, PreparedSides, SelectionPlan};
use crate::simulate::apply_pca;

/// Lower bound applied to `1 - r^2` before taking logarithms.
pub const ONE_MINUS_R2_FLOOR: f64 = 1e-15;

static WILKS_EVALUATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of Wilks statistics evaluated so far in this process. Always zero
/// unless the `instrument` feature is enabled.
pub fn wilks_evaluations() -> usize {
    WILKS_EVALUATIONS.load(Ordering::Relaxed)
}

#[inline]
fn note_wilks() {
    if cfg!(feature = "instrument") {
        WILKS_EVALUATIONS.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticKind {
    /// `-sum_{i>=k} ln(1 - r_i^2)`.
    Wilks,
    /// `r_k^2`.
    Roy,
}

/// How nuisance variables are handled when present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NuisanceMethod {
    HuhJhun,
    Theil,
    /// Permute plain residuals. Invalid; kept to demonstrate the inflation.
    Simple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOptions {
    pub stat: StatisticKind,
    /// Number of permutations including the identity.
    pub j: usize,
    pub seed: u64,
    /// Refit the CCA at every step. Disabling it is invalid and only useful
    /// for demonstrating inflated error rates.
    pub stepwise: bool,
    /// Keep the orthogonal complement of the coefficients. Disabling it is
    /// invalid and only useful for demonstrating inflated error rates.
    pub augment_null_space: bool,
    pub compute_max_pvalues: bool,
    pub compute_parametric: bool,
    pub nuisance_method: NuisanceMethod,
    pub pca_y: Option<usize>,
    pub pca_x: Option<usize>,
    /// Worker cap; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    /// Keep the `J x K` matrix of permutation statistics.
    pub retain_statistics: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            stat: StatisticKind::Wilks,
            j: 1000,
            seed: 0,
            stepwise: true,
            augment_null_space: true,
            compute_max_pvalues: false,
            compute_parametric: false,
            nuisance_method: NuisanceMethod::HuhJhun,
            pca_y: None,
            pca_x: None,
            threads: None,
            retain_statistics: false,
        }
    }
}

impl InferenceOptions {
    pub fn validate(&self) -> Result<()> {
        if self.j < 2 {
            return Err(Error::InvalidOptions(format!(
                "need at least 2 permutations, got {}",
                self.j
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidOptions("thread count must be positive".into()));
        }
        Ok(())
    }
}

/// Input data. Without nuisance variables, `center` removes column means
/// (equivalent to an intercept-only nuisance model).
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub y: &'a Mat,
    pub x: &'a Mat,
    pub z: Option<&'a Mat>,
    pub w: Option<&'a Mat>,
    /// Use `z` for both sides.
    pub partial: bool,
    /// Explicit selection for the Theil basis.
    pub selection: Option<&'a SelectionPlan>,
    pub blocks: Option<&'a BlockStructure>,
    pub center: bool,
}

impl<'a> Dataset<'a> {
    pub fn new(y: &'a Mat, x: &'a Mat) -> Self {
        Self {
            y,
            x,
            z: None,
            w: None,
            partial: false,
            selection: None,
            blocks: None,
            center: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    /// Canonical correlations of the unpermuted data.
    pub r: Vec<f64>,
    pub stat0: Vec<f64>,
    pub counts: Vec<usize>,
    pub p_unc: Vec<f64>,
    pub p_fwer: Vec<f64>,
    pub p_max: Option<Vec<f64>>,
    pub p_param: Option<Vec<f64>>,
    pub j: usize,
    /// Row `j` holds the statistics of permutation `j` (row 0 is the identity).
    pub null_statistics: Option<Mat>,
    pub warnings: Vec<String>,
}

impl InferenceResult {
    pub fn k(&self) -> usize {
        self.r.len()
    }
}

/// `-sum_{i>=k} ln(1 - r_i^2)` with `k` one-based.
pub fn wilks_stat(r: &[f64], k: usize) -> f64 {
    note_wilks();
    r.iter()
        .skip(k.saturating_sub(1))
        .map(|&ri| -(1.0 - ri * ri).max(ONE_MINUS_R2_FLOOR).ln())
        .sum()
}

/// `r_k^2` with `k` one-based.
pub fn roy_stat(r: &[f64], k: usize) -> f64 {
    r.get(k.saturating_sub(1)).map_or(0.0, |&ri| ri * ri)
}

pub fn statistic(kind: StatisticKind, r: &[f64], k: usize) -> f64 {
    match kind {
        StatisticKind::Wilks => wilks_stat(r, k),
        StatisticKind::Roy => roy_stat(r, k),
    }
}

/// Running maximum of the uncorrected p-values.
pub fn adjust_closure(p_unc: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(p_unc.len());
    let mut running = f64::NEG_INFINITY;
    for &p in p_unc {
        running = running.max(p);
        out.push(running);
    }
    out
}

/// `p_k = mean_j [max_i stats[j, i] >= stat0[k]]`.
pub fn adjust_max_distribution(stats: &Mat, stat0: &[f64]) -> Result<Vec<f64>> {
    if stats.ncols() != stat0.len() || stats.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "statistics matrix is {}x{}, observed vector has {} entries",
            stats.nrows(),
            stats.ncols(),
            stat0.len()
        )));
    }
    let maxima: Vec<f64> = stats.row_iter().map(|row| row.max()).collect();
    let j = stats.nrows() as f64;
    Ok(stat0
        .iter()
        .map(|&s0| maxima.iter().filter(|&&m| m >= s0).count() as f64 / j)
        .collect())
}

/// Chi-square approximation to the distribution of Wilks' lambda at step `k`
/// (one-based). `c` counts the nuisance columns.
pub fn parametric_wilks_p(r: &[f64], k: usize, dims: &ProblemDims, c: usize) -> Result<f64> {
    let mult = dims.n as f64 - c as f64 - (dims.p + dims.q + 3) as f64 / 2.0;
    if mult <= 0.0 {
        return Err(Error::InvalidDims(format!(
            "N - C - (P + Q + 3)/2 = {mult} is not positive"
        )));
    }
    if k == 0 || k > dims.p.min(dims.q) {
        return Err(Error::InvalidDims(format!(
            "component {k} outside 1..={}",
            dims.p.min(dims.q)
        )));
    }
    let lambda = mult * wilks_stat(r, k);
    let dof = ((dims.p - k + 1) * (dims.q - k + 1)) as f64;
    if lambda <= 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_ur(dof / 2.0, lambda / 2.0).clamp(0.0, 1.0))
}

/// Everything needed to evaluate permuted statistics.
#[derive(Debug, Clone)]
pub struct PreparedProblem {
    pub sides: PreparedSides,
    /// Left canonical variables in the left side's reduced coordinates.
    pub u: Mat,
    /// Right canonical variables in the right side's reduced coordinates.
    pub v: Mat,
    /// Unpermuted canonical correlations.
    pub r: Vec<f64>,
    /// Blocks over the permutable rows.
    pub blocks: Option<BlockStructure>,
    /// Dimensions of the problem passed to the initial CCA.
    pub dims: ProblemDims,
    /// Nuisance column count used by the parametric approximation.
    pub c: usize,
}

impl PreparedProblem {
    pub fn k(&self) -> usize {
        self.r.len()
    }

    fn lifted(&self, m: &Mat, left: bool) -> Mat {
        let q = if left { &self.sides.qz } else { &self.sides.qw };
        if self.sides.lift && !q.is_identity() {
            &q.q * m
        } else {
            m.clone()
        }
    }
}

/// Residualizes, reduces and fits the initial CCA.
pub fn prepare(data: &Dataset<'_>, opts: &InferenceOptions) -> Result<PreparedProblem> {
    opts.validate()?;
    for m in [Some(data.y), Some(data.x), data.z, data.w].into_iter().flatten() {
        linalg::check_finite(m)?;
    }
    let has_nuisance = data.z.is_some() || data.w.is_some();
    let method = opts.nuisance_method;
    if has_nuisance && method == NuisanceMethod::HuhJhun && data.blocks.is_some() {
        return Err(Error::InvalidOptions(
            "the Huh-Jhun basis does not preserve exchangeability blocks; use the Theil basis".into(),
        ));
    }

    let (y, x) = if !has_nuisance && data.center {
        (cca::center_columns(data.y), cca::center_columns(data.x))
    } else {
        (data.y.clone(), data.x.clone())
    };

    let default_plan;
    let selection = match (method, has_nuisance) {
        (NuisanceMethod::Theil, true) => match data.selection {
            Some(s) => Some(s),
            None => {
                let (z, w) = if data.partial || data.z.is_none() {
                    (data.z.or(data.w).expect("nuisance present"), None)
                } else {
                    (data.z.expect("checked"), data.w)
                };
                default_plan = residualize::default_selection(z, w, data.blocks)?;
                Some(&default_plan)
            }
        },
        _ => None,
    };
    let simple = method == NuisanceMethod::Simple && has_nuisance;
    let sides = residualize::prepare_sides(&y, &x, data.z, data.w, data.partial, selection, simple)?;

    let blocks = match (data.blocks, &sides.selection) {
        (Some(b), Some(plan)) => {
            if b.len() != plan.n() {
                return Err(Error::InvalidBlocks(format!(
                    "{} block labels for {} observations",
                    b.len(),
                    plan.n()
                )));
            }
            Some(b.subset(plan.keep())?)
        }
        (Some(b), None) => Some(b.clone()),
        (None, _) => None,
    };

    let mut sides = sides;
    if let Some(k) = opts.pca_y {
        sides.yt = apply_pca(&sides.yt, k)?;
    }
    if let Some(k) = opts.pca_x {
        sides.xt = apply_pca(&sides.xt, k)?;
    }

    let (df_y, df_x) = match sides.method {
        residualize::Residualization::None => (usize::from(data.center), usize::from(data.center)),
        residualize::Residualization::Simple => (sides.r, sides.s),
        _ => (0, 0),
    };

    let n = data.y.nrows();
    let dims = ProblemDims::new(n, sides.yt.ncols(), sides.xt.ncols(), sides.r, sides.s)?;
    let c = sides.r.max(sides.s);

    let (y_fit, x_fit) = if sides.lift {
        (
            if sides.qz.is_identity() { sides.yt.clone() } else { &sides.qz.q * &sides.yt },
            if sides.qw.is_identity() { sides.xt.clone() } else { &sides.qw.q * &sides.xt },
        )
    } else {
        (sides.yt.clone(), sides.xt.clone())
    };
    let fit = cca::cca(&y_fit, &x_fit, df_y, df_x)?;
    let (a, b) = cca::coefficient_bases(&fit, opts.augment_null_space)?;
    let u = &sides.yt * a;
    let v = &sides.xt * b;
    Ok(PreparedProblem {
        sides,
        u,
        v,
        r: fit.r,
        blocks,
        dims,
        c,
    })
}

/// Statistics of one permutation by explicit placement and a fresh CCA per
/// step. `inspect` receives `(k, left columns, right columns)` for each CCA
/// fitted.
pub fn direct_statistics(
    problem: &PreparedProblem,
    pair: &PermutationPair,
    kind: StatisticKind,
    stepwise: bool,
    inspect: &mut dyn FnMut(usize, usize, usize),
) -> Result<Vec<f64>> {
    let sides = &problem.sides;
    let k_total = problem.k();
    let place = |k: usize| -> Result<(Mat, Mat)> {
        let u = problem.u.columns(k - 1, problem.u.ncols() - k + 1).into_owned();
        let v = problem.v.columns(k - 1, problem.v.ncols() - k + 1).into_owned();
        let left = residualize::place_permutation(&u, &sides.qz, &pair.py, sides.lift)?;
        let right = if sides.both_sides {
            residualize::place_permutation(&v, &sides.qw, &pair.px, sides.lift)?
        } else {
            problem.lifted(&v, false)
        };
        Ok((left, right))
    };
    if stepwise {
        (1..=k_total)
            .map(|k| {
                let (left, right) = place(k)?;
                inspect(k, left.ncols(), right.ncols());
                let fit = cca::cca(&left, &right, 0, 0)?;
                Ok(statistic(kind, &fit.r, 1))
            })
            .collect()
    } else {
        let (left, right) = place(1)?;
        inspect(1, left.ncols(), right.ncols());
        let fit = cca::cca(&left, &right, 0, 0)?;
        Ok((1..=k_total).map(|k| statistic(kind, &fit.r, k)).collect())
    }
}

/// Orthonormal basis whose leading `m` columns span the trailing `m` columns
/// of `m`.
fn nested_basis(m: &Mat) -> Result<Mat> {
    let cols = m.ncols();
    let reversed = Mat::from_fn(m.nrows(), cols, |i, j| m[(i, cols - 1 - j)]);
    linalg::check_finite(&reversed)?;
    let qr = linalg::householder_qr(&reversed, false, false);
    let diag: Vec<f64> = (0..cols).map(|i| qr.r[(i, i)].abs()).collect();
    let top = diag.iter().cloned().fold(0.0, f64::max);
    let rank = diag.iter().filter(|&&d| d > linalg::QR_RANK_TOL * top).count();
    if cols > m.nrows() || rank < cols {
        return Err(Error::RankDeficient {
            rank: rank.min(m.nrows()),
            cols,
        });
    }
    Ok(qr.q)
}

/// Evaluates permuted statistics through cross-products of nested
/// orthonormal bases. For each permutation it forms one `P x Q` matrix whose
/// leading blocks hold the cross-correlations of every stepwise subproblem.
#[derive(Debug, Clone)]
pub struct FastEngine {
    bu: Mat,
    bv: Mat,
    /// `Qz' Qw`, present when the sides live in different row spaces.
    bridge: Option<Mat>,
    /// `bridge * bv` (or `bv`) when the right side is never permuted.
    fixed_right: Option<Mat>,
    k: usize,
    kind: StatisticKind,
    stepwise: bool,
}

impl FastEngine {
    pub fn new(problem: &PreparedProblem, kind: StatisticKind, stepwise: bool) -> Result<Self> {
        let sides = &problem.sides;
        let bu = nested_basis(&problem.u)?;
        let bv = nested_basis(&problem.v)?;
        let bridge = if sides.lift {
            Some(match (sides.qz.is_identity(), sides.qw.is_identity()) {
                (true, true) => Mat::identity(bu.nrows(), bv.nrows()),
                (true, false) => sides.qw.q.clone(),
                (false, true) => sides.qz.q.transpose(),
                (false, false) => sides.qz.q.tr_mul(&sides.qw.q),
            })
        } else {
            None
        };
        let fixed_right = if sides.both_sides {
            None
        } else {
            Some(match &bridge {
                Some(g) => g * &bv,
                None => bv.clone(),
            })
        };
        Ok(Self {
            bu,
            bv,
            bridge,
            fixed_right,
            k: problem.k(),
            kind,
            stepwise,
        })
    }

    fn cross(&self, pair: &PermutationPair) -> Mat {
        let left = linalg::permute_rows(&self.bu, &pair.py);
        let right_owned;
        let right = match &self.fixed_right {
            Some(r) => r,
            None => {
                let permuted = linalg::permute_rows(&self.bv, &pair.px);
                right_owned = match &self.bridge {
                    Some(g) => g * permuted,
                    None => permuted,
                };
                &right_owned
            }
        };
        left.tr_mul(right)
    }

    pub fn statistics(&self, pair: &PermutationPair) -> Result<Vec<f64>> {
        let c = self.cross(pair);
        let (p, q) = c.shape();
        if self.stepwise {
            (1..=self.k)
                .map(|k| block_statistic(&c, p - k + 1, q - k + 1, self.kind))
                .collect()
        } else {
            let r2 = squared_correlations(&c, p, q)?;
            Ok((1..=self.k)
                .map(|k| match self.kind {
                    StatisticKind::Wilks => {
                        note_wilks();
                        r2.iter()
                            .skip(k - 1)
                            .map(|&v| -(1.0 - v).max(ONE_MINUS_R2_FLOOR).ln())
                            .sum()
                    }
                    StatisticKind::Roy => r2[k - 1],
                })
                .collect())
        }
    }
}

fn block_gram(c: &Mat, rows: usize, cols: usize) -> Mat {
    let blk = c.view((0, 0), (rows, cols));
    if rows <= cols {
        blk * blk.transpose()
    } else {
        blk.transpose() * blk
    }
}

/// Squared singular values of the leading `rows x cols` block, descending and
/// clamped to `[0, 1]`.
fn squared_correlations(c: &Mat, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let gram = block_gram(c, rows, cols);
    let mut vals: Vec<f64> = gram
        .symmetric_eigenvalues()
        .iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

fn block_statistic(c: &Mat, rows: usize, cols: usize, kind: StatisticKind) -> Result<f64> {
    match kind {
        StatisticKind::Roy => Ok(squared_correlations(c, rows, cols)?[0]),
        StatisticKind::Wilks => {
            note_wilks();
            let gram = block_gram(c, rows, cols);
            let m = gram.nrows();
            let resid = Mat::identity(m, m) - gram;
            // every eigenvalue of I - CC' lies in [det, 1], so a determinant
            // above the floor means no term needs flooring
            if let Some(chol) = Cholesky::new(resid) {
                let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
                if logdet.is_finite() && logdet >= ONE_MINUS_R2_FLOOR.ln() {
                    return Ok(-logdet);
                }
            }
            let r2 = squared_correlations(c, rows, cols)?;
            Ok(r2.iter().map(|&v| -(1.0 - v).max(ONE_MINUS_R2_FLOOR).ln()).sum())
        }
    }
}

#[derive(Debug, Clone)]
struct Tally {
    counts: Vec<usize>,
    max_counts: Vec<usize>,
}

impl Tally {
    fn new(k: usize) -> Self {
        Self {
            counts: vec![0; k],
            max_counts: vec![0; k],
        }
    }

    fn add(&mut self, stats: &[f64], stat0: &[f64]) {
        let top = stats.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, &s0) in stat0.iter().enumerate() {
            if stats[i] >= s0 {
                self.counts[i] += 1;
            }
            if top >= s0 {
                self.max_counts[i] += 1;
            }
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        for (a, b) in self.max_counts.iter_mut().zip(other.max_counts) {
            *a += b;
        }
        self
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidOptions(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs the full permutation test.
pub fn permcca(data: &Dataset<'_>, opts: &InferenceOptions) -> Result<InferenceResult> {
    let problem = prepare(data, opts)?;
    let scheme = permute::build_scheme(
        problem.sides.yt.nrows(),
        problem.sides.xt.nrows(),
        opts.j,
        problem.blocks.as_ref(),
        problem.sides.both_sides,
        opts.seed,
    )?;
    run_scheme(&problem, &scheme.pairs, opts, scheme.warnings)
}

/// Runs the test over an explicit list of permutations; the first must be the
/// identity.
pub fn run_scheme(
    problem: &PreparedProblem,
    pairs: &[PermutationPair],
    opts: &InferenceOptions,
    warnings: Vec<String>,
) -> Result<InferenceResult> {
    if pairs.len() < 2 || !pairs[0].is_identity() {
        return Err(Error::InvalidOptions(
            "a scheme needs the identity first and at least one other permutation".into(),
        ));
    }
    let engine = FastEngine::new(problem, opts.stat, opts.stepwise)?;
    let k = problem.k();
    let stat0 = engine.statistics(&pairs[0])?;
    let j = pairs.len();

    let (tally, null_statistics) = with_pool(opts.threads, || -> Result<(Tally, Option<Mat>)> {
        if opts.retain_statistics {
            let rows: Vec<Vec<f64>> = pairs[1..]
                .par_iter()
                .map(|p| engine.statistics(p))
                .collect::<Result<_>>()?;
            let mut tally = Tally::new(k);
            tally.add(&stat0, &stat0);
            let mut mat = Mat::zeros(j, k);
            mat.row_mut(0).copy_from_slice(&stat0);
            for (i, row) in rows.iter().enumerate() {
                tally.add(row, &stat0);
                mat.row_mut(i + 1).copy_from_slice(row);
            }
            Ok((tally, Some(mat)))
        } else {
            let mut tally = pairs[1..]
                .par_iter()
                .try_fold(
                    || Tally::new(k),
                    |mut t, p| {
                        t.add(&engine.statistics(p)?, &stat0);
                        Ok::<_, Error>(t)
                    },
                )
                .try_reduce(|| Tally::new(k), |a, b| Ok(a.merge(b)))?;
            tally.add(&stat0, &stat0);
            Ok((tally, None))
        }
    })??;

    let jf = j as f64;
    let p_unc: Vec<f64> = tally.counts.iter().map(|&c| c as f64 / jf).collect();
    let p_fwer = adjust_closure(&p_unc);
    let p_max = opts
        .compute_max_pvalues
        .then(|| tally.max_counts.iter().map(|&c| c as f64 / jf).collect());
    let p_param = if opts.compute_parametric {
        Some(
            (1..=k)
                .map(|i| parametric_wilks_p(&problem.r, i, &problem.dims, problem.c))
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        None
    };
    Ok(InferenceResult {
        r: problem.r.clone(),
        stat0,
        counts: tally.counts,
        p_unc,
        p_fwer,
        p_max,
        p_param,
        j,
        null_statistics,
        warnings,
    })
}
