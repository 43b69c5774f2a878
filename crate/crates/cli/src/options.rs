//! Settings shared by every subcommand.
//!
//! Each value comes from the command line first, then from the config file,
//! then from the built-in default. `SEED` and `THREADS` in the environment
//! count as command-line values.

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use lbmnar::io::MatrixFormat;
use lbmnar::{FitConfig, GibbsSettings, MissingnessKind, RiskEstimator};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// Flat key-value settings file (TOML syntax, keys named like the flags
    /// with underscores).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Matrix file.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,

    /// `ternary-csv` or `votes-csv`.
    #[arg(long, global = true)]
    pub format: Option<String>,

    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    pub nq: Option<usize>,

    #[arg(long, global = true)]
    pub nl: Option<usize>,

    /// `mcar`, `mar` or `nmar`.
    #[arg(long, global = true)]
    pub kind: Option<String>,

    /// Row class counts for `select`, e.g. `2-5`.
    #[arg(long, global = true)]
    pub nq_range: Option<String>,

    #[arg(long, global = true)]
    pub nl_range: Option<String>,

    /// Comma-separated missingness kinds compared by `select`.
    #[arg(long, global = true)]
    pub kinds: Option<String>,

    #[arg(long, global = true, env = "SEED")]
    pub seed: Option<u64>,

    /// Random starts per fit.
    #[arg(long, global = true)]
    pub inits: Option<usize>,

    /// Relative tolerance on the variational bound.
    #[arg(long, global = true)]
    pub tol: Option<f64>,

    #[arg(long, global = true)]
    pub max_iters: Option<usize>,

    /// Sequential execution and no wall-clock timings in the output, so
    /// repeated runs produce identical files.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,

    #[arg(long, global = true)]
    pub target_risk: Option<f64>,

    #[arg(long, global = true)]
    pub epsilon: Option<f64>,

    /// Matrix size for `simulate` and calibration.
    #[arg(long, global = true)]
    pub rows: Option<usize>,

    #[arg(long, global = true)]
    pub cols: Option<usize>,

    /// Variance of both value effects in simulated data.
    #[arg(long, global = true)]
    pub value_variance: Option<f64>,

    /// `mean-field` or `gibbs`.
    #[arg(long, global = true)]
    pub risk_estimator: Option<String>,

    /// Ground truth written by `simulate`.
    #[arg(long, global = true)]
    pub truth: Option<PathBuf>,

    /// Result file written by `fit` or `select`.
    #[arg(long, global = true)]
    pub fit: Option<PathBuf>,

    #[arg(long, global = true, env = "THREADS")]
    pub threads: Option<usize>,
}

macro_rules! fill {
    ($dst:ident, $src:ident, $($field:ident),+) => {
        $( if $dst.$field.is_none() { $dst.$field = $src.$field; } )+
    };
}

impl Options {
    /// Fills unset values from the config file, if any.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let file: Options = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        fill!(
            self, file, input, format, output_dir, nq, nl, kind, nq_range, nl_range, kinds, seed, inits, tol, max_iters,
            deterministic, target_risk, epsilon, rows, cols, value_variance, risk_estimator, truth, fit, threads
        );
        Ok(self)
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().unwrap_or(Path::new("."))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn deterministic(&self) -> bool {
        self.deterministic.unwrap_or(false)
    }

    pub fn format(&self) -> Result<MatrixFormat, CliError> {
        Ok(MatrixFormat::from_str(self.format.as_deref().unwrap_or("ternary-csv"))?)
    }

    pub fn kind(&self) -> Result<MissingnessKind, CliError> {
        Ok(MissingnessKind::from_str(self.kind.as_deref().unwrap_or("nmar"))?)
    }

    pub fn kinds(&self) -> Result<Vec<MissingnessKind>, CliError> {
        self.kinds
            .as_deref()
            .unwrap_or("mar,nmar")
            .split(',')
            .map(|k| Ok(MissingnessKind::from_str(k.trim())?))
            .collect()
    }

    pub fn nq_range(&self) -> Result<RangeInclusive<usize>, CliError> {
        parse_range(self.nq_range.as_deref().unwrap_or("2-5"))
    }

    pub fn nl_range(&self) -> Result<RangeInclusive<usize>, CliError> {
        parse_range(self.nl_range.as_deref().unwrap_or("2-5"))
    }

    pub fn risk_estimator(&self) -> Result<RiskEstimator, CliError> {
        match self.risk_estimator.as_deref().unwrap_or("mean-field") {
            "mean-field" | "meanfield" => Ok(RiskEstimator::MeanField),
            "gibbs" => Ok(RiskEstimator::Gibbs(GibbsSettings::default())),
            other => Err(CliError::Usage(format!("unknown risk estimator '{other}'"))),
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        let d = FitConfig::default();
        FitConfig {
            max_vem_iters: self.max_iters.unwrap_or(d.max_vem_iters),
            elbo_rel_tol: self.tol.unwrap_or(d.elbo_rel_tol),
            n_inits: self.inits.unwrap_or(d.n_inits),
            seed: self.seed(),
            deterministic: self.deterministic(),
            ..d
        }
    }

    pub fn require<'a, T>(&self, value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
    }
}

/// `a-b`, `a..b`, `a..=b` or a single count.
pub fn parse_range(s: &str) -> Result<RangeInclusive<usize>, CliError> {
    let bad = || CliError::Usage(format!("invalid class-count range '{s}'"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let (lo, hi) = if let Some((a, b)) = s.split_once("..=") {
        (num(a)?, num(b)?)
    } else if let Some((a, b)) = s.split_once("..") {
        (num(a)?, num(b)?)
    } else if let Some((a, b)) = s.split_once('-') {
        (num(a)?, num(b)?)
    } else {
        let v = num(s)?;
        (v, v)
    };
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok(lo..=hi)
}
