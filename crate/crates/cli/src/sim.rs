//! The `simulate` and `scenario` subcommands.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use permcca_core::infer::NuisanceMethod;
use permcca_core::simulate::{self, Correction, ScenarioSpec, Strategy};

use crate::error::CliError;
use crate::io;
use crate::run::StatArg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResidualArg {
    HuhJhun,
    Theil,
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorrectionArg {
    Uncorrected,
    Closure,
    MaxStatistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Table,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateConfig {
    /// Predefined scenario id (i to xviii).
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    pub scenario: Option<String>,
    /// Scenario spec file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the original permutation and realization counts.
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub perms: Option<usize>,
    /// Sample size (ignored by scenarios that sweep it).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "wilks")]
    pub stat: StatArg,
    #[arg(long, value_enum, default_value = "closure")]
    pub correction: CorrectionArg,
    #[arg(long, value_enum, default_value = "huh-jhun")]
    pub residuals: ResidualArg,
    #[arg(long)]
    pub single_step: bool,
    #[arg(long)]
    pub no_null_space: bool,
    #[arg(long, env = "PERMCCA_THREADS")]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ReportFormat,
}

impl SimulateConfig {
    pub fn for_scenario(id: &str) -> Self {
        Self {
            scenario: Some(id.to_string()),
            config: None,
            full: false,
            reps: None,
            perms: None,
            n: None,
            seed: 0,
            stat: StatArg::Wilks,
            correction: CorrectionArg::Closure,
            residuals: ResidualArg::HuhJhun,
            single_step: false,
            no_null_space: false,
            threads: None,
            out: None,
            format: ReportFormat::Csv,
        }
    }

    pub fn spec(&self) -> Result<ScenarioSpec, CliError> {
        let mut spec = match (&self.scenario, &self.config) {
            (Some(id), _) => simulate::named_scenario(id, self.full)?,
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
            }
            (None, None) => return Err(CliError::Validation("give --scenario or --config".into())),
        };
        if let Some(r) = self.reps {
            spec.reps = r;
        }
        if let Some(j) = self.perms {
            spec.j = j;
        }
        if let Some(n) = self.n {
            spec.n = n;
        }
        Ok(spec)
    }

    pub fn strategy(&self) -> Strategy {
        Strategy {
            stepwise: !self.single_step,
            null_space: !self.no_null_space,
            residualization: match self.residuals {
                ResidualArg::HuhJhun => NuisanceMethod::HuhJhun,
                ResidualArg::Theil => NuisanceMethod::Theil,
                ResidualArg::Simple => NuisanceMethod::Simple,
            },
            stat: self.stat.into(),
            correction: match self.correction {
                CorrectionArg::Uncorrected => Correction::Uncorrected,
                CorrectionArg::Closure => Correction::Closure,
                CorrectionArg::MaxStatistic => Correction::MaxStatistic,
            },
        }
    }
}

/// Runs every sub-run of the scenario and returns the concatenated report.
pub fn cmd_simulate(cfg: &SimulateConfig, stderr: &mut dyn std::io::Write) -> Result<String, CliError> {
    if cfg.threads == Some(0) {
        return Err(CliError::Validation("--threads must be positive".into()));
    }
    let spec = cfg.spec()?;
    let strategy = cfg.strategy();
    let mut out = String::new();
    for sub in spec.expand() {
        let _ = writeln!(stderr, "running scenario {} ({} reps, {} perms)", sub.id, sub.reps, sub.j);
        let report = simulate::run_scenario(&sub, &strategy, cfg.seed, cfg.threads)?;
        match cfg.format {
            ReportFormat::Csv => out.push_str(&report.to_csv()),
            ReportFormat::Table => {
                out.push_str(&report.to_table());
                out.push('\n');
            }
        }
    }
    if let Some(path) = &cfg.out {
        io::write_text(path, &out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioConfig {
    /// Predefined scenario id (i to xviii).
    pub id: String,
    #[arg(long)]
    pub full: bool,
}

/// Prints a predefined scenario as a TOML spec, a starting point for custom
/// scenarios.
pub fn cmd_scenario(cfg: &ScenarioConfig) -> Result<String, CliError> {
    let spec = simulate::named_scenario(&cfg.id, cfg.full)?;
    toml::to_string(&spec).map_err(|e| CliError::Output(e.to_string()))
}
