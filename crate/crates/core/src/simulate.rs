//! Monte-Carlo harness for error rates and power of the permutation test.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution as _, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{self, Dataset, InferenceOptions, NuisanceMethod, StatisticKind};
use crate::linalg::{self, Mat};

/// Critical level used when counting rejections.
pub const ALPHA: f64 = 0.05;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

/// Default population canonical correlation of the single shared factor.
pub const SPARSE_CORRELATION: f64 = 0.65;
/// Default population canonical correlation of each of the dense factors.
pub const DENSE_CORRELATION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Distribution {
    Normal,
    /// Student's t with `nu` degrees of freedom, not variance standardized.
    StudentT { nu: f64 },
    /// Zero/one draws with success probability `q`.
    Bernoulli { q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Signal {
    None,
    /// One latent factor shared by one column of each side.
    Sparse,
    /// `min(P, Q) / 2` weaker factors, each shared by one pair of columns.
    Dense,
}

/// Sub-runs of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "over", content = "values")]
pub enum Sweep {
    SampleSize(Vec<usize>),
    /// Degrees of freedom of a Student's t distribution.
    Nu(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: String,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Nuisance variables on the left, excluding the intercept.
    pub r: usize,
    /// Nuisance variables on the right, excluding the intercept.
    pub s: usize,
    /// Separate nuisance sets for the two sides.
    #[serde(default)]
    pub bipartial: bool,
    #[serde(default)]
    pub pca: Option<usize>,
    pub distribution: Distribution,
    pub signal: Signal,
    /// Population canonical correlation of each planted factor; defaults
    /// depend on the signal kind.
    #[serde(default)]
    pub signal_correlation: Option<f64>,
    pub j: usize,
    pub reps: usize,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 {
            return Err(Error::InvalidDims("P and Q must be positive".into()));
        }
        if self.reps == 0 {
            return Err(Error::InvalidOptions("reps must be positive".into()));
        }
        if self.j < 2 {
            return Err(Error::InvalidOptions("J must be at least 2".into()));
        }
        if !self.bipartial && self.s != self.r {
            return Err(Error::InvalidOptions(
                "partial designs share one nuisance set, so S must equal R".into(),
            ));
        }
        let nuisance = 1 + self.r.max(self.s);
        if self.n < nuisance + self.p + self.q {
            return Err(Error::InvalidDims(format!(
                "N={} too small for P={}, Q={} and {} nuisance columns",
                self.n, self.p, self.q, nuisance
            )));
        }
        match self.distribution {
            Distribution::StudentT { nu } if nu <= 0.0 || !nu.is_finite() => {
                return Err(Error::InvalidOptions(format!("invalid degrees of freedom {nu}")))
            }
            Distribution::Bernoulli { q } if !(0.0..=1.0).contains(&q) => {
                return Err(Error::InvalidOptions(format!("invalid Bernoulli parameter {q}")))
            }
            _ => {}
        }
        if let Some(c) = self.signal_correlation {
            if !(0.0..1.0).contains(&c) {
                return Err(Error::InvalidOptions(format!("signal correlation {c} outside [0, 1)")));
            }
        }
        if let Some(k) = self.pca {
            if k == 0 || k > self.p || k > self.q {
                return Err(Error::TooManyComponents {
                    requested: k,
                    available: self.p.min(self.q),
                });
            }
        }
        Ok(())
    }

    /// Population canonical correlation of each planted factor.
    pub fn factor_correlation(&self) -> f64 {
        self.signal_correlation.unwrap_or(match self.signal {
            Signal::None => 0.0,
            Signal::Sparse => SPARSE_CORRELATION,
            Signal::Dense => DENSE_CORRELATION,
        })
    }

    /// Concrete specs, one per sweep value.
    pub fn expand(&self) -> Vec<ScenarioSpec> {
        let base = ScenarioSpec {
            sweep: None,
            ..self.clone()
        };
        match &self.sweep {
            None => vec![base],
            Some(Sweep::SampleSize(ns)) => ns
                .iter()
                .map(|&n| ScenarioSpec {
                    id: format!("{}-n{n}", self.id),
                    n,
                    ..base.clone()
                })
                .collect(),
            Some(Sweep::Nu(nus)) => nus
                .iter()
                .map(|&nu| ScenarioSpec {
                    id: format!("{}-nu{nu}", self.id),
                    distribution: Distribution::StudentT { nu },
                    ..base.clone()
                })
                .collect(),
        }
    }
}

const ROMAN: [&str; 18] = [
    "i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix", "x", "xi", "xii", "xiii", "xiv", "xv", "xvi",
    "xvii", "xviii",
];

/// Desk-scale defaults for named scenarios.
pub const DESK_REPS: usize = 200;
pub const DESK_PERMS: usize = 500;

/// The predefined scenarios. `full` keeps the original permutation and
/// realization counts; otherwise desk-scale counts are used.
pub fn named_scenario(id: &str, full: bool) -> Result<ScenarioSpec> {
    let lower = id.trim().to_ascii_lowercase();
    let index = ROMAN
        .iter()
        .position(|&r| r == lower)
        .ok_or_else(|| Error::UnknownScenario(id.to_string()))?;
    let number = index + 1;
    let pca = if number <= 14 && number % 2 == 0 || number == 16 {
        Some(10)
    } else {
        None
    };
    let kurtotic = Some(Sweep::Nu(vec![2.0, 4.0, 6.0, 8.0, 10.0]));
    let (distribution, sweep) = match number {
        3 | 4 | 9 | 10 => (Distribution::StudentT { nu: 2.0 }, kurtotic),
        5 | 6 | 11 | 12 => (Distribution::Bernoulli { q: 0.2 }, None),
        15 | 16 => (
            Distribution::Normal,
            Some(Sweep::SampleSize((1..=10).map(|i| i * 100).collect())),
        ),
        _ => (Distribution::Normal, None),
    };
    let (r, s) = match number {
        1..=6 | 17 | 18 => (0, 0),
        7..=14 => (15, 15),
        _ => (20, 20),
    };
    let signal = match number {
        17 => Signal::Sparse,
        18 => Signal::Dense,
        _ => Signal::None,
    };
    let (j, reps) = match (full, number) {
        (true, 15 | 16) => (1000, 1000),
        (true, _) => (2000, 2000),
        (false, _) => (DESK_PERMS, DESK_REPS),
    };
    Ok(ScenarioSpec {
        id: ROMAN[index].to_ascii_uppercase(),
        n: 100,
        p: 16,
        q: 20,
        r,
        s,
        bipartial: matches!(number, 13 | 14),
        pca,
        distribution,
        signal,
        signal_correlation: None,
        j,
        reps,
        sweep,
    })
}

/// One realization of a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub y: Mat,
    pub x: Mat,
    /// Left nuisance, with intercept first.
    pub z: Mat,
    /// Right nuisance for bipartial designs, with intercept first.
    pub w: Option<Mat>,
}

fn draw(rows: usize, cols: usize, dist: Distribution, rng: &mut ChaCha8Rng) -> Result<Mat> {
    Ok(match dist {
        Distribution::Normal => Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal)),
        Distribution::StudentT { nu } => {
            let t = StudentT::new(nu).map_err(|e| Error::InvalidOptions(e.to_string()))?;
            Mat::from_fn(rows, cols, |_, _| t.sample(rng))
        }
        Distribution::Bernoulli { q } => {
            let b = Bernoulli::new(q).map_err(|e| Error::InvalidOptions(e.to_string()))?;
            Mat::from_fn(rows, cols, |_, _| if b.sample(rng) { 1.0 } else { 0.0 })
        }
    })
}

fn nuisance(n: usize, extra: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(n, extra + 1, |_, c| if c == 0 { 1.0 } else { rng.sample(StandardNormal) })
}

/// Loading `a` of a shared factor that gives population correlation
/// `a^2 / (a^2 + 1)` between two unit-variance columns.
pub fn factor_loading(correlation: f64) -> f64 {
    (correlation / (1.0 - correlation)).sqrt()
}

pub fn gen_scenario_data(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<ScenarioData> {
    spec.validate()?;
    let n = spec.n;
    let mut y = draw(n, spec.p, spec.distribution, rng)?;
    let mut x = draw(n, spec.q, spec.distribution, rng)?;
    let pairs = match spec.signal {
        Signal::None => 0,
        Signal::Sparse => 1,
        Signal::Dense => (spec.p.min(spec.q) / 2).max(1),
    };
    let loading = factor_loading(spec.factor_correlation());
    for c in 0..pairs {
        for i in 0..n {
            let f: f64 = rng.sample(StandardNormal);
            y[(i, c)] += loading * f;
            x[(i, c)] += loading * f;
        }
    }
    let z = nuisance(n, spec.r, rng);
    let w = spec.bipartial.then(|| nuisance(n, spec.s, rng));
    Ok(ScenarioData { y, x, z, w })
}

/// Leading principal-component scores of an already centered (or
/// residualized) matrix.
pub fn apply_pca(m: &Mat, components: usize) -> Result<Mat> {
    let available = m.nrows().min(m.ncols());
    if components == 0 || components > available {
        return Err(Error::TooManyComponents {
            requested: components,
            available,
        });
    }
    let dec = linalg::svd(m)?;
    let mut scores = dec.u.columns(0, components).into_owned();
    for (c, mut col) in scores.column_iter_mut().enumerate() {
        col *= dec.d[c];
    }
    Ok(scores)
}

/// Wilson score interval.
pub fn wilson_ci(successes: usize, trials: usize, z: f64) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(Error::InvalidOptions(format!(
            "Wilson interval needs 0 <= successes <= trials, trials >= 1 (got {successes}/{trials})"
        )));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (centre + half).min(1.0) };
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    Uncorrected,
    Closure,
    MaxStatistic,
}

impl Correction {
    pub const ALL: [Correction; 3] = [Correction::Uncorrected, Correction::Closure, Correction::MaxStatistic];

    pub fn name(self) -> &'static str {
        match self {
            Correction::Uncorrected => "uncorrected",
            Correction::Closure => "closure",
            Correction::MaxStatistic => "max-statistic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub stepwise: bool,
    pub null_space: bool,
    pub residualization: NuisanceMethod,
    pub stat: StatisticKind,
    /// Correction shown first in reports; all are computed.
    pub correction: Correction,
}

impl Default for Strategy {
    fn default() -> Self {
        Self {
            stepwise: true,
            null_space: true,
            residualization: NuisanceMethod::HuhJhun,
            stat: StatisticKind::Wilks,
            correction: Correction::Closure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rate {
    pub rejections: usize,
    pub trials: usize,
    pub rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Rate {
    pub fn new(rejections: usize, trials: usize) -> Result<Self> {
        let (ci_lo, ci_hi) = wilson_ci(rejections, trials, Z95)?;
        Ok(Self {
            rejections,
            trials,
            rate: rejections as f64 / trials as f64,
            ci_lo,
            ci_hi,
        })
    }

    pub fn ci_contains(&self, value: f64) -> bool {
        self.ci_lo <= value && value <= self.ci_hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionRates {
    pub correction: Correction,
    /// Per-component rejection rates.
    pub per_k: Vec<Rate>,
    /// Rate of rejecting at least one component.
    pub any: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRateReport {
    pub spec: ScenarioSpec,
    pub strategy: Strategy,
    pub master_seed: u64,
    pub alpha: f64,
    pub k: usize,
    /// One entry per correction, the strategy's own correction first.
    pub rates: Vec<CorrectionRates>,
}

impl ErrorRateReport {
    pub fn rates_for(&self, correction: Correction) -> &CorrectionRates {
        self.rates
            .iter()
            .find(|r| r.correction == correction)
            .expect("all corrections are reported")
    }

    /// Rates under the strategy's correction.
    pub fn primary(&self) -> &CorrectionRates {
        self.rates_for(self.strategy.correction)
    }

    fn config_lines(&self) -> Vec<(String, String)> {
        let s = &self.spec;
        let dist = match s.distribution {
            Distribution::Normal => "normal".to_string(),
            Distribution::StudentT { nu } => format!("student-t(nu={nu})"),
            Distribution::Bernoulli { q } => format!("bernoulli(q={q})"),
        };
        let st = &self.strategy;
        vec![
            ("scenario".into(), s.id.clone()),
            ("n".into(), s.n.to_string()),
            ("p".into(), s.p.to_string()),
            ("q".into(), s.q.to_string()),
            ("r".into(), s.r.to_string()),
            ("s".into(), s.s.to_string()),
            ("bipartial".into(), s.bipartial.to_string()),
            ("pca".into(), s.pca.map_or("none".into(), |k| k.to_string())),
            ("distribution".into(), dist),
            ("signal".into(), format!("{:?}", s.signal).to_lowercase()),
            ("signal_correlation".into(), s.factor_correlation().to_string()),
            ("perms".into(), s.j.to_string()),
            ("reps".into(), s.reps.to_string()),
            ("seed".into(), self.master_seed.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("stepwise".into(), st.stepwise.to_string()),
            ("null_space".into(), st.null_space.to_string()),
            ("residualization".into(), format!("{:?}", st.residualization).to_lowercase()),
            ("stat".into(), format!("{:?}", st.stat).to_lowercase()),
            ("correction".into(), st.correction.name().into()),
        ]
    }

    /// CSV with `# key=value` configuration lines, then one row per
    /// correction and component (`any` for the familywise row).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.config_lines() {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str("correction,component,rejections,reps,rate,ci_lo,ci_hi\n");
        for block in &self.rates {
            let rows = block
                .per_k
                .iter()
                .enumerate()
                .map(|(i, r)| ((i + 1).to_string(), r))
                .chain(std::iter::once(("any".to_string(), &block.any)));
            for (label, r) in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.6},{:.6},{:.6}",
                    block.correction.name(),
                    label,
                    r.rejections,
                    r.trials,
                    r.rate,
                    r.ci_lo,
                    r.ci_hi
                );
            }
        }
        out
    }

    /// Percentages with confidence intervals for the strategy's correction.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario {} ({} reps, {} perms, {} correction)",
            self.spec.id,
            self.spec.reps,
            self.spec.j,
            self.strategy.correction.name()
        );
        let _ = writeln!(out, "{:>9}  {:>7}  {:>17}", "component", "rate %", "95% CI");
        let p = self.primary();
        let rows = p
            .per_k
            .iter()
            .enumerate()
            .map(|(i, r)| ((i + 1).to_string(), r))
            .chain(std::iter::once(("any".to_string(), &p.any)));
        for (label, r) in rows {
            let _ = writeln!(
                out,
                "{:>9}  {:>7.2}  ({:>6.2} - {:>6.2})",
                label,
                100.0 * r.rate,
                100.0 * r.ci_lo,
                100.0 * r.ci_hi
            );
        }
        out
    }
}

/// Generator for realization `rep`: an independent stream of the master seed.
pub fn rep_rng(master_seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep as u64);
    rng
}

struct RepOutcome {
    p_unc: Vec<f64>,
    p_fwer: Vec<f64>,
    p_max: Vec<f64>,
}

fn run_rep(spec: &ScenarioSpec, strategy: &Strategy, master_seed: u64, rep: usize) -> Result<RepOutcome> {
    let mut rng = rep_rng(master_seed, rep);
    let data = gen_scenario_data(spec, &mut rng)?;
    let perm_seed: u64 = rng.random();
    let opts = InferenceOptions {
        stat: strategy.stat,
        j: spec.j,
        seed: perm_seed,
        stepwise: strategy.stepwise,
        augment_null_space: strategy.null_space,
        compute_max_pvalues: true,
        compute_parametric: false,
        nuisance_method: strategy.residualization,
        pca_y: spec.pca,
        pca_x: spec.pca,
        threads: None,
        retain_statistics: false,
    };
    let dataset = Dataset {
        z: Some(&data.z),
        w: data.w.as_ref(),
        partial: !spec.bipartial,
        ..Dataset::new(&data.y, &data.x)
    };
    let res = infer::permcca(&dataset, &opts)?;
    Ok(RepOutcome {
        p_unc: res.p_unc,
        p_fwer: res.p_fwer,
        p_max: res.p_max.expect("requested"),
    })
}

/// Runs every realization of a concrete (unswept) spec.
pub fn run_scenario(
    spec: &ScenarioSpec,
    strategy: &Strategy,
    master_seed: u64,
    threads: Option<usize>,
) -> Result<ErrorRateReport> {
    spec.validate()?;
    if spec.sweep.is_some() {
        return Err(Error::InvalidOptions(
            "spec has a sweep; expand it and run each sub-spec".into(),
        ));
    }
    let work = || -> Result<Vec<RepOutcome>> {
        (0..spec.reps)
            .into_par_iter()
            .map(|rep| run_rep(spec, strategy, master_seed, rep))
            .collect()
    };
    let outcomes = match threads {
        None => work()?,
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidOptions(format!("cannot start worker pool: {e}")))?
            .install(work)?,
    };
    let k = outcomes.first().map_or(0, |o| o.p_unc.len());
    let mut rates = Vec::new();
    let mut order = vec![strategy.correction];
    order.extend(Correction::ALL.iter().copied().filter(|&c| c != strategy.correction));
    for correction in order {
        let pick = |o: &RepOutcome| -> Vec<f64> {
            match correction {
                Correction::Uncorrected => o.p_unc.clone(),
                Correction::Closure => o.p_fwer.clone(),
                Correction::MaxStatistic => o.p_max.clone(),
            }
        };
        let mut per_k_counts = vec![0usize; k];
        let mut any = 0usize;
        for o in &outcomes {
            let p = pick(o);
            let mut hit = false;
            for (c, &pk) in per_k_counts.iter_mut().zip(&p) {
                if pk <= ALPHA {
                    *c += 1;
                    hit = true;
                }
            }
            any += usize::from(hit);
        }
        rates.push(CorrectionRates {
            correction,
            per_k: per_k_counts
                .iter()
                .map(|&c| Rate::new(c, spec.reps))
                .collect::<Result<_>>()?,
            any: Rate::new(any, spec.reps)?,
        });
    }
    Ok(ErrorRateReport {
        spec: spec.clone(),
        strategy: *strategy,
        master_seed,
        alpha: ALPHA,
        k,
        rates,
    })
}

/// Two-sided p-value of the pooled two-proportion z-test.
pub fn two_proportion_p(a: &Rate, b: &Rate) -> f64 {
    let n1 = a.trials as f64;
    let n2 = b.trials as f64;
    let pooled = (a.rejections + b.rejections) as f64 / (n1 + n2);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)).sqrt();
    if se == 0.0 {
        return 1.0;
    }
    let z = (a.rate - b.rate).abs() / se;
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}
