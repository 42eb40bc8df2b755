//! Run configuration, error classes and cross-run aggregation.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use retrosql::encoder::{EncoderConfig, PretrainConfig};
use retrosql::evaluator::EvalReport;
use retrosql::trainer::TrainConfig;
use retrosql::Error;

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";

/// Everything a command can be configured with. Every field has a default;
/// unknown keys are errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.model.seed = s;
            self.train.seed = s;
            self.pretrain.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Writes the effective configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing config")?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn without_seeds(&self) -> RunConfig {
        self.clone().with_seed(Some(0))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run directories have different configurations: {0} differs from {1}")]
    ConfigMismatch(PathBuf, PathBuf),
    #[error("{0}")]
    Usage(String),
}

/// Exit code and stable name for each error class.
pub fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => (2, "usage"),
                CliError::Config(_) => (3, "config"),
                CliError::ConfigMismatch(..) => (10, "config_mismatch"),
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } => (4, "io"),
                Error::MalformedRecord { .. }
                | Error::SchemaMismatch { .. }
                | Error::UnknownTable(_)
                | Error::Json(_)
                | Error::EmptyInput(_)
                | Error::EmptyDataset => (5, "bad_input"),
                Error::VersionMismatch(_) | Error::DimensionMismatch { .. } => (6, "incompatible_artifact"),
                Error::SampleTooLarge { .. } | Error::InsufficientPattern { .. } => (7, "sampling"),
                Error::EmptyEval | Error::EmptyIndex => (8, "evaluation"),
                Error::DivergedLoss { .. } | Error::NoPositiveAvailable(_) | Error::NoNegativeAvailable(_) => (9, "training"),
                Error::EmptyCandidates { .. } | Error::PatternMismatch | Error::UnalignedValue(_) => (11, "grounding"),
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return (3, "config");
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (4, "io");
        }
    }
    (1, "internal")
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `0.500 ± 0.008`, or just the mean for a single run.
pub fn format_mean_std(values: &[f64]) -> String {
    let (mean, std) = mean_std(values);
    if values.len() < 2 {
        format!("{mean:.3}")
    } else {
        format!("{mean:.3} ± {std:.3}")
    }
}

pub struct Aggregate {
    pub runs: usize,
    pub rows: Vec<(&'static str, Vec<f64>)>,
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>16}  runs", "metric", "value")?;
        for (name, values) in &self.rows {
            writeln!(f, "{:<12} {:>16}  {}", name, format_mean_std(values), values.len())?;
        }
        Ok(())
    }
}

/// Reads `config.toml` and `report.json` from every run directory; all
/// configurations must agree up to their seeds.
pub fn aggregate(run_dirs: &[PathBuf]) -> Result<Aggregate> {
    if run_dirs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()).into());
    }
    let mut reports = Vec::new();
    let mut first: Option<(PathBuf, RunConfig)> = None;
    for dir in run_dirs {
        let config = RunConfig::load(Some(&dir.join(CONFIG_FILE)))?;
        match &first {
            None => first = Some((dir.clone(), config)),
            Some((d0, c0)) => {
                if c0.without_seeds() != config.without_seeds() {
                    return Err(CliError::ConfigMismatch(dir.clone(), d0.clone()).into());
                }
            }
        }
        let path = dir.join(REPORT_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(Error::from)?;
        reports.push(report);
    }
    let col = |f: fn(&EvalReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    Ok(Aggregate {
        runs: reports.len(),
        rows: vec![
            ("P", col(|r| r.p)),
            ("LF", col(|r| r.lf)),
            ("R-capacity", col(|r| r.r_capacity as f64)),
            ("RG-capacity", col(|r| r.rg_capacity as f64)),
        ],
    })
}
