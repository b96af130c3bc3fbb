//! The `run` subcommand: permutation inference on user data.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use permcca_core::infer::{self, Dataset, InferenceOptions, InferenceResult, NuisanceMethod, StatisticKind};
use permcca_core::{linalg, BlockMode, BlockStructure, Mat, SelectionPlan};
use serde::Serialize;

use crate::error::CliError;
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatArg {
    Wilks,
    Roy,
}

impl From<StatArg> for StatisticKind {
    fn from(s: StatArg) -> Self {
        match s {
            StatArg::Wilks => StatisticKind::Wilks,
            StatArg::Roy => StatisticKind::Roy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockModeArg {
    Within,
    Whole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunConfig {
    /// Left data matrix (CSV, observations in rows).
    #[arg(long)]
    pub y: PathBuf,
    /// Right data matrix (CSV).
    #[arg(long)]
    pub x: PathBuf,
    /// Nuisance variables for the left side (both sides with --partial).
    #[arg(long)]
    pub z: Option<PathBuf>,
    /// Nuisance variables for the right side.
    #[arg(long)]
    pub w: Option<PathBuf>,
    /// Exchangeability block labels, one integer per line.
    #[arg(long)]
    pub blocks: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "within")]
    pub block_mode: BlockModeArg,
    /// Observations kept by the Theil basis, one 0-based index per line.
    #[arg(long)]
    pub selection: Option<PathBuf>,
    /// Remove Z from both sides.
    #[arg(long)]
    pub partial: bool,
    #[arg(long, value_enum, default_value = "wilks")]
    pub stat: StatArg,
    /// Number of permutations, including the identity.
    #[arg(long = "perms", default_value_t = 1000)]
    pub perms: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Theil residuals (needed with blocks when nuisance is present).
    #[arg(long, conflicts_with_all = ["huh_jhun", "simple_residuals"])]
    pub theil: bool,
    /// Huh-Jhun residuals (default).
    #[arg(long, conflicts_with = "simple_residuals")]
    pub huh_jhun: bool,
    /// Permute plain residuals. Invalid; for demonstration only.
    #[arg(long)]
    pub simple_residuals: bool,
    /// Single-step estimation. Invalid; for demonstration only.
    #[arg(long)]
    pub single_step: bool,
    /// Drop the null-space augmentation. Invalid; for demonstration only.
    #[arg(long)]
    pub no_null_space: bool,
    #[arg(long)]
    pub pca_y: Option<usize>,
    #[arg(long)]
    pub pca_x: Option<usize>,
    /// Also report p-values from the distribution of the maximum statistic.
    #[arg(long)]
    pub max_pvalues: bool,
    /// Also report chi-square approximation p-values (Wilks).
    #[arg(long)]
    pub parametric: bool,
    /// Do not add an intercept to Z and W (and do not center without them).
    #[arg(long)]
    pub no_intercept: bool,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: OutputFormat,
    #[arg(long, env = "PERMCCA_THREADS")]
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Defaults for the given data files.
    pub fn new(y: impl Into<PathBuf>, x: impl Into<PathBuf>) -> Self {
        Self {
            y: y.into(),
            x: x.into(),
            z: None,
            w: None,
            blocks: None,
            block_mode: BlockModeArg::Within,
            selection: None,
            partial: false,
            stat: StatArg::Wilks,
            perms: 1000,
            seed: 0,
            theil: false,
            huh_jhun: false,
            simple_residuals: false,
            single_step: false,
            no_null_space: false,
            pca_y: None,
            pca_x: None,
            max_pvalues: false,
            parametric: false,
            no_intercept: false,
            out: None,
            format: OutputFormat::Csv,
            threads: None,
        }
    }

    pub fn method(&self) -> NuisanceMethod {
        if self.simple_residuals {
            NuisanceMethod::Simple
        } else if self.theil || self.selection.is_some() {
            NuisanceMethod::Theil
        } else {
            NuisanceMethod::HuhJhun
        }
    }

    fn has_nuisance(&self) -> bool {
        self.z.is_some() || self.w.is_some()
    }

    /// Checks that need no file access.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.partial && self.z.is_none() {
            return Err(CliError::Validation("--partial needs --z".into()));
        }
        if self.partial && self.w.is_some() {
            return Err(CliError::Validation("--partial uses Z for both sides; drop --w".into()));
        }
        if self.blocks.is_some() && self.huh_jhun {
            return Err(CliError::Validation(
                "--huh-jhun cannot be combined with --blocks: the Huh-Jhun basis mixes observations \
                 across blocks, so block-restricted permutations would not be valid; use --theil"
                    .into(),
            ));
        }
        if self.blocks.is_some() && self.has_nuisance() && self.method() == NuisanceMethod::HuhJhun {
            return Err(CliError::Validation(
                "--blocks with nuisance variables needs --theil: the default Huh-Jhun basis does not \
                 preserve the block structure"
                    .into(),
            ));
        }
        if self.selection.is_some() && (self.huh_jhun || self.simple_residuals) {
            return Err(CliError::Validation("--selection applies only to --theil".into()));
        }
        if self.parametric && self.stat == StatArg::Roy {
            return Err(CliError::Validation("--parametric is available for --stat wilks only".into()));
        }
        if self.perms < 2 {
            return Err(CliError::Validation("--perms must be at least 2".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Validation("--threads must be positive".into()));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.single_step {
            w.push("--single-step gives invalid error rates beyond the first component".to_string());
        }
        if self.no_null_space {
            w.push("--no-null-space gives inflated error rates".to_string());
        }
        if self.simple_residuals {
            w.push("--simple-residuals permutes non-exchangeable residuals; error rates are inflated".to_string());
        }
        w
    }

    pub fn options(&self) -> InferenceOptions {
        InferenceOptions {
            stat: self.stat.into(),
            j: self.perms,
            seed: self.seed,
            stepwise: !self.single_step,
            augment_null_space: !self.no_null_space,
            compute_max_pvalues: self.max_pvalues,
            compute_parametric: self.parametric,
            nuisance_method: self.method(),
            pca_y: self.pca_y,
            pca_x: self.pca_x,
            threads: self.threads,
            retain_statistics: false,
        }
    }

    /// `key=value` pairs echoed alongside the results.
    pub fn echo(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        vec![
            ("y".into(), self.y.display().to_string()),
            ("x".into(), self.x.display().to_string()),
            ("z".into(), path(&self.z)),
            ("w".into(), path(&self.w)),
            ("blocks".into(), path(&self.blocks)),
            ("selection".into(), path(&self.selection)),
            ("partial".into(), self.partial.to_string()),
            ("stat".into(), format!("{:?}", self.stat).to_lowercase()),
            ("perms".into(), self.perms.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("residuals".into(), format!("{:?}", self.method()).to_lowercase()),
            ("stepwise".into(), (!self.single_step).to_string()),
            ("null_space".into(), (!self.no_null_space).to_string()),
            ("intercept".into(), (!self.no_intercept).to_string()),
        ]
    }
}

fn with_intercept(m: Option<Mat>, rows: usize, add: bool) -> Result<Option<Mat>, CliError> {
    let ones = Mat::from_element(rows, 1, 1.0);
    Ok(match (m, add) {
        (Some(m), true) => Some(linalg::hcat(&ones, &m)?),
        (Some(m), false) => Some(m),
        (None, true) => Some(ones),
        (None, false) => None,
    })
}

fn check_rows(name: &std::path::Path, m: &Mat, y_path: &std::path::Path, n: usize) -> Result<(), CliError> {
    if m.nrows() != n {
        return Err(CliError::Validation(format!(
            "row counts differ: {} has {} rows but {} has {}",
            y_path.display(),
            n,
            name.display(),
            m.nrows()
        )));
    }
    Ok(())
}

/// Loads the inputs and runs the test.
pub fn execute(cfg: &RunConfig) -> Result<InferenceResult, CliError> {
    cfg.validate()?;
    let y = io::read_matrix_csv(&cfg.y)?;
    let n = y.nrows();
    let x = io::read_matrix_csv(&cfg.x)?;
    check_rows(&cfg.x, &x, &cfg.y, n)?;
    let load = |p: &Option<PathBuf>| -> Result<Option<Mat>, CliError> {
        match p {
            Some(p) => {
                let m = io::read_matrix_csv(p)?;
                check_rows(p, &m, &cfg.y, n)?;
                Ok(Some(m))
            }
            None => Ok(None),
        }
    };
    let z_raw = load(&cfg.z)?;
    let w_raw = load(&cfg.w)?;
    let add = !cfg.no_intercept;
    // with an intercept and any nuisance, both sides receive one; otherwise
    // centering plays its role
    let (z, w) = if cfg.has_nuisance() {
        let z = with_intercept(z_raw, n, add)?;
        let w = if cfg.partial { None } else { with_intercept(w_raw, n, add)? };
        (z, w)
    } else {
        (None, None)
    };

    let blocks = match &cfg.blocks {
        Some(p) => {
            let labels = io::read_labels(p)?;
            if labels.len() != n {
                return Err(CliError::Validation(format!(
                    "{} has {} labels for {} observations",
                    p.display(),
                    labels.len(),
                    n
                )));
            }
            let mode = match cfg.block_mode {
                BlockModeArg::Within => BlockMode::Within,
                BlockModeArg::Whole => BlockMode::Whole,
            };
            Some(BlockStructure::new(labels, mode)?)
        }
        None => None,
    };
    let selection = match &cfg.selection {
        Some(p) => Some(SelectionPlan::new(io::read_indices(p)?, n)?),
        None => None,
    };
    if selection.is_some() && z.is_none() && w.is_none() {
        return Err(CliError::Validation("--selection needs nuisance variables".into()));
    }

    let data = Dataset {
        y: &y,
        x: &x,
        z: z.as_ref(),
        w: w.as_ref(),
        partial: cfg.partial,
        selection: selection.as_ref(),
        blocks: blocks.as_ref(),
        center: add,
    };
    Ok(infer::permcca(&data, &cfg.options())?)
}

pub fn format_csv(res: &InferenceResult) -> String {
    let mut out = String::from("k,r,stat,p_unc,p_fwer");
    if res.p_max.is_some() {
        out.push_str(",p_max");
    }
    if res.p_param.is_some() {
        out.push_str(",p_param");
    }
    out.push('\n');
    for k in 0..res.k() {
        let _ = write!(
            out,
            "{},{:e},{:e},{:e},{:e}",
            k + 1,
            res.r[k],
            res.stat0[k],
            res.p_unc[k],
            res.p_fwer[k]
        );
        if let Some(p) = &res.p_max {
            let _ = write!(out, ",{:e}", p[k]);
        }
        if let Some(p) = &res.p_param {
            let _ = write!(out, ",{:e}", p[k]);
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct JsonRow {
    k: usize,
    r: f64,
    stat: f64,
    p_unc: f64,
    p_fwer: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_param: Option<f64>,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    config: std::collections::BTreeMap<String, String>,
    permutations: usize,
    components: Vec<JsonRow>,
    warnings: &'a [String],
}

pub fn format_json(cfg: &RunConfig, res: &InferenceResult) -> Result<String, CliError> {
    let rows = (0..res.k())
        .map(|k| JsonRow {
            k: k + 1,
            r: res.r[k],
            stat: res.stat0[k],
            p_unc: res.p_unc[k],
            p_fwer: res.p_fwer[k],
            p_max: res.p_max.as_ref().map(|p| p[k]),
            p_param: res.p_param.as_ref().map(|p| p[k]),
        })
        .collect();
    let report = JsonReport {
        config: cfg.echo().into_iter().collect(),
        permutations: res.j,
        components: rows,
        warnings: &res.warnings,
    };
    serde_json::to_string_pretty(&report)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Output(e.to_string()))
}

/// Runs the subcommand; returns the rendered output after writing it.
pub fn cmd_run(cfg: &RunConfig, stderr: &mut dyn std::io::Write) -> Result<String, CliError> {
    for w in cfg.warnings() {
        let _ = writeln!(stderr, "warning: {w}");
    }
    for (k, v) in cfg.echo() {
        let _ = writeln!(stderr, "# {k}={v}");
    }
    let res = execute(cfg)?;
    for w in &res.warnings {
        let _ = writeln!(stderr, "warning: {w}");
    }
    let text = match cfg.format {
        OutputFormat::Csv => format_csv(&res),
        OutputFormat::Json => format_json(cfg, &res)?,
    };
    if let Some(path) = &cfg.out {
        io::write_text(path, &text)?;
    }
    Ok(text)
}
