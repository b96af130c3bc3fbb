//! Acceptance criteria. Runs as a plain binary so that each criterion prints
//! exactly one PASS/FAIL line; exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use permcca_core::cca::{cca, cca_eig_oracle, center_columns, CovBlocks};
use permcca_core::infer::{self, Dataset, InferenceOptions, NuisanceMethod, StatisticKind};
use permcca_core::linalg::{self, Mat};
use permcca_core::permute;
use permcca_core::residualize::{default_selection, residual_matrix, semiortho};
use permcca_core::simulate::{
    named_scenario, run_scenario, two_proportion_p, Correction, Distribution, ErrorRateReport, ScenarioSpec,
    Strategy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const NOMINAL: f64 = 0.05;

type Outcome = Result<String, String>;

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn rate_text(r: &permcca_core::simulate::Rate) -> String {
    format!("{} ({} - {})", pct(r.rate), pct(r.ci_lo), pct(r.ci_hi))
}

fn scenario(id: &str, reps: usize, j: usize) -> ScenarioSpec {
    ScenarioSpec {
        reps,
        j,
        ..named_scenario(id, false).unwrap()
    }
}

fn scenario_one_report() -> &'static ErrorRateReport {
    static REPORT: OnceLock<ErrorRateReport> = OnceLock::new();
    REPORT.get_or_init(|| run_scenario(&scenario("i", 500, 500), &Strategy::default(), 3, None).unwrap())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = rng.random_range(1..=6);
        let q = rng.random_range(1..=6);
        let n = rng.random_range(p + q + 2..=60);
        let y = center_columns(&normal(n, p, &mut rng));
        let x = center_columns(&normal(n, q, &mut rng));
        let fit = cca(&y, &x, 1, 1).map_err(|e| e.to_string())?;
        let oracle = cca_eig_oracle(&CovBlocks::from_data(&y, &x).unwrap()).map_err(|e| e.to_string())?;
        for (a, b) in fit.r.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-8 && elapsed < Duration::from_secs(10),
        format!("100 instances, max |r - oracle| = {worst:.2e}, {:.2} s", elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let y = normal(7, 2, &mut rng);
    let x = normal(7, 2, &mut rng);
    let opts = InferenceOptions::default();
    let problem = infer::prepare(&Dataset::new(&y, &x), &opts).map_err(|e| e.to_string())?;
    let scheme = permute::exhaustive_scheme(7, 5040).map_err(|e| e.to_string())?;
    let res = infer::run_scheme(&problem, &scheme.pairs, &opts, vec![]).map_err(|e| e.to_string())?;

    // brute force: eigenvalue route on freshly centered, permuted data
    let yc = center_columns(&y);
    let xc = center_columns(&x);
    let wilks = |perm: &[usize]| -> f64 {
        let yp = linalg::permute_rows(&yc, perm);
        let r = cca_eig_oracle(&CovBlocks::from_data(&yp, &xc).unwrap()).unwrap();
        r.iter().map(|ri| -(1.0 - ri * ri).ln()).sum()
    };
    let observed = wilks(&(0..7).collect::<Vec<_>>());
    let hits = scheme.pairs.iter().filter(|p| wilks(&p.py) >= observed).count();
    let brute = hits as f64 / 5040.0;
    let elapsed = start.elapsed();
    check(
        res.p_unc[0] == brute && elapsed < Duration::from_secs(30),
        format!(
            "engine p = {}/5040, enumeration p = {hits}/5040, {:.2} s",
            res.counts[0],
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let report = scenario_one_report();
    let closure = report.rates_for(Correction::Closure);
    let fwer = &closure.any;
    let k2 = &closure.per_k[1];
    check(
        fwer.ci_contains(NOMINAL) && k2.rate < 0.015,
        format!(
            "scenario I, 500 reps x 500 perms: FWER {}, PCER k=2 {} (first call {:.1} s)",
            rate_text(fwer),
            pct(k2.rate),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_4() -> Outcome {
    let strategy = Strategy {
        stepwise: false,
        null_space: false,
        correction: Correction::Uncorrected,
        ..Strategy::default()
    };
    let report = run_scenario(&scenario("i", 200, 500), &strategy, 4, None).map_err(|e| e.to_string())?;
    let k1 = &report.rates_for(Correction::Uncorrected).per_k[0];
    check(
        k1.rate > 0.80,
        format!("scenario I, single step, no null space, uncorrected: k=1 rate {}", rate_text(k1)),
    )
}

fn criterion_5() -> Outcome {
    let spec = scenario("vii", 200, 500);
    let rate = |method: NuisanceMethod| -> Result<permcca_core::simulate::Rate, String> {
        let strategy = Strategy {
            residualization: method,
            ..Strategy::default()
        };
        let report = run_scenario(&spec, &strategy, 5, None).map_err(|e| e.to_string())?;
        Ok(report.rates_for(Correction::Closure).per_k[0])
    };
    let simple = rate(NuisanceMethod::Simple)?;
    let hj = rate(NuisanceMethod::HuhJhun)?;
    let theil = rate(NuisanceMethod::Theil)?;
    check(
        simple.rate > 0.5 && hj.ci_contains(NOMINAL) && theil.ci_contains(NOMINAL),
        format!(
            "scenario VII k=1: simple {}, Huh-Jhun {}, Theil {}",
            rate_text(&simple),
            rate_text(&hj),
            rate_text(&theil)
        ),
    )
}

fn criterion_6() -> Outcome {
    let report = scenario_one_report();
    let max = report.rates_for(Correction::MaxStatistic);
    let worst_later = max.per_k[1..].iter().map(|r| r.rate).fold(0.0, f64::max);
    let k1 = &max.per_k[0];
    check(
        worst_later < 0.01 && k1.ci_contains(NOMINAL),
        format!(
            "scenario I max-statistic: k=1 {}, highest rate for k>=2 {}",
            rate_text(k1),
            pct(worst_later)
        ),
    )
}

fn criterion_7() -> Outcome {
    let run = |nu: f64| -> Result<permcca_core::simulate::Rate, String> {
        let spec = ScenarioSpec {
            distribution: Distribution::StudentT { nu },
            sweep: None,
            ..scenario("ix", 200, 500)
        };
        let report = run_scenario(&spec, &Strategy::default(), 7, None).map_err(|e| e.to_string())?;
        Ok(report.rates_for(Correction::Closure).per_k[0])
    };
    let t4 = run(4.0)?;
    let t2 = run(2.0)?;
    check(
        t4.ci_contains(NOMINAL) && t2.rate > 0.10,
        format!("partial CCA, Huh-Jhun, k=1: t(4) {}, t(2) {}", rate_text(&t4), rate_text(&t2)),
    )
}

fn criterion_8() -> Outcome {
    let power = |id: &str, stat: StatisticKind| -> Result<ErrorRateReport, String> {
        let strategy = Strategy {
            stat,
            ..Strategy::default()
        };
        run_scenario(&scenario(id, 500, 500), &strategy, 8, None).map_err(|e| e.to_string())
    };
    let sw = power("xvii", StatisticKind::Wilks)?;
    let sr = power("xvii", StatisticKind::Roy)?;
    let dw = power("xviii", StatisticKind::Wilks)?;
    let dr = power("xviii", StatisticKind::Roy)?;
    let at = |r: &ErrorRateReport, k: usize| r.rates_for(Correction::Closure).per_k[k];
    let sparse_ok = at(&sr, 0).rate > at(&sw, 0).rate && two_proportion_p(&at(&sr, 0), &at(&sw, 0)) < 0.05;
    let dense1 = at(&dw, 0).rate > at(&dr, 0).rate && two_proportion_p(&at(&dw, 0), &at(&dr, 0)) < 0.05;
    let dense2 = at(&dw, 1).rate > at(&dr, 1).rate && two_proportion_p(&at(&dw, 1), &at(&dr, 1)) < 0.05;
    check(
        sparse_ok && dense1 && dense2,
        format!(
            "sparse k=1: Roy {} vs Wilks {} (p={:.1e}); dense k=1: Wilks {} vs Roy {} (p={:.1e}); dense k=2: Wilks {} vs Roy {} (p={:.1e})",
            pct(at(&sr, 0).rate),
            pct(at(&sw, 0).rate),
            two_proportion_p(&at(&sr, 0), &at(&sw, 0)),
            pct(at(&dw, 0).rate),
            pct(at(&dr, 0).rate),
            two_proportion_p(&at(&dw, 0), &at(&dr, 0)),
            pct(at(&dw, 1).rate),
            pct(at(&dr, 1).rate),
            two_proportion_p(&at(&dw, 1), &at(&dr, 1)),
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst_orth: f64 = 0.0;
    let mut worst_proj: f64 = 0.0;
    let mut worst_r: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(20..=50);
        let r = rng.random_range(1..=10);
        let (p, q) = (2, 3);
        let mut z = normal(n, r, &mut rng);
        z.column_mut(0).fill(1.0);
        let y = normal(n, p, &mut rng);
        let x = normal(n, q, &mut rng);
        let res = residual_matrix(&z).map_err(|e| e.to_string())?;
        let plan = default_selection(&z, None, None).map_err(|e| e.to_string())?;
        let reference = cca(&(&res.r * &y), &(&res.r * &x), r, r).map_err(|e| e.to_string())?;
        for sel in [None, Some(&plan)] {
            let basis = semiortho(&res, sel).map_err(|e| e.to_string())?;
            let qm = &basis.q;
            let k = qm.ncols();
            worst_orth = worst_orth.max((qm.transpose() * qm - Mat::identity(k, k)).amax());
            worst_proj = worst_proj.max((qm * qm.transpose() - &res.r).amax());
            let fit = cca(&qm.tr_mul(&y), &qm.tr_mul(&x), 0, 0).map_err(|e| e.to_string())?;
            for (a, b) in fit.r.iter().zip(&reference.r) {
                worst_r = worst_r.max((a - b).abs());
            }
        }
    }
    check(
        worst_orth < 1e-10 && worst_proj < 1e-8 && worst_r < 1e-8,
        format!(
            "50 nuisance sets, Huh-Jhun and Theil: max |Q'Q - I| {worst_orth:.1e}, max |QQ' - R| {worst_proj:.1e}, max |r diff| {worst_r:.1e}"
        ),
    )
}

fn criterion_10() -> Outcome {
    let spec = scenario("i", 200, 500);
    let one = run_scenario(&spec, &Strategy::default(), 10, Some(1)).map_err(|e| e.to_string())?;
    let eight = run_scenario(&spec, &Strategy::default(), 10, Some(8)).map_err(|e| e.to_string())?;
    let (a, b) = (one.to_csv(), eight.to_csv());
    check(
        a.as_bytes() == b.as_bytes(),
        format!("scenario I, 200 reps: 1-worker and 8-worker reports ({} bytes) identical", a.len()),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 oracle equivalence", criterion_1),
        ("2 exhaustive exactness", criterion_2),
        ("3 null calibration", criterion_3),
        ("4 invalid method inflation", criterion_4),
        ("5 residualization", criterion_5),
        ("6 max-statistic conservativeness", criterion_6),
        ("7 non-normality", criterion_7),
        ("8 power ordering", criterion_8),
        ("9 semi-orthogonal bases", criterion_9),
        ("10 determinism under parallelism", criterion_10),
    ];
    let mut failures = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|pat| name.contains(pat.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
