//! Integrated completed likelihood and grid search over class counts and
//! missingness kinds.
//!
//! The maximized complete log-likelihood is replaced by the fitted
//! variational bound `J`, and the `o(log n)` remainders are dropped. The MCAR
//! criterion has no Gaussian correction at all since the model has no latent
//! effects; it extends the NMAR and MAR criteria by the same construction.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LbmError, Result};
use crate::inference::{entropy, multi_start_fit, FitConfig, FitResult};
use crate::model::{MissingnessKind, ObservedMatrix};

/// What stands in for the maximized complete log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum IclBound {
    /// The full variational bound `J`.
    #[default]
    Elbo,
    /// `J` minus the entropy of the variational distribution.
    ElboMinusEntropy,
}

/// Class-proportion and block-probability penalty.
pub fn class_penalty(n1: usize, n2: usize, nq: usize, nl: usize) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    -((nq * nl) as f64) / 2.0 * (n1f * n2f).ln() - (nq as f64 - 1.0) / 2.0 * n1f.ln() - (nl as f64 - 1.0) / 2.0 * n2f.ln()
}

/// Term contributed by integrating out the latent-effect variances.
pub fn gaussian_correction(kind: MissingnessKind, n1: usize, n2: usize) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let full = n1f * (2.0 * PI).ln() - n1f.ln() + n2f * (2.0 * PI).ln() - n2f.ln();
    match kind {
        MissingnessKind::Mnar => full,
        MissingnessKind::Mar => 0.5 * full,
        MissingnessKind::Mcar => 0.0,
    }
}

fn bound_value(fit: &FitResult, bound: IclBound) -> f64 {
    match bound {
        IclBound::Elbo => fit.elbo(),
        IclBound::ElboMinusEntropy => fit.elbo() - entropy(&fit.varstate),
    }
}

fn icl_of_kind(
    expected: MissingnessKind,
    fit: &FitResult,
    n1: usize,
    n2: usize,
    nq: usize,
    nl: usize,
    bound: IclBound,
) -> Result<f64> {
    if fit.kind() != expected {
        return Err(LbmError::Contract(format!(
            "fit has kind {} but the {} criterion was requested",
            fit.kind(),
            expected
        )));
    }
    if fit.nq() != nq || fit.nl() != nl {
        return Err(LbmError::Contract(format!(
            "fit has {}x{} classes, not {nq}x{nl}",
            fit.nq(),
            fit.nl()
        )));
    }
    if fit.varstate.n_rows() != n1 || fit.varstate.n_cols() != n2 {
        return Err(LbmError::Contract("fit dimensions differ from the given sizes".into()));
    }
    Ok(bound_value(fit, bound) + class_penalty(n1, n2, nq, nl) + gaussian_correction(expected, n1, n2))
}

pub fn icl_nmar(fit: &FitResult, n1: usize, n2: usize, nq: usize, nl: usize) -> Result<f64> {
    icl_of_kind(MissingnessKind::Mnar, fit, n1, n2, nq, nl, IclBound::Elbo)
}

pub fn icl_mar(fit: &FitResult, n1: usize, n2: usize, nq: usize, nl: usize) -> Result<f64> {
    icl_of_kind(MissingnessKind::Mar, fit, n1, n2, nq, nl, IclBound::Elbo)
}

pub fn icl_mcar(fit: &FitResult, n1: usize, n2: usize, nq: usize, nl: usize) -> Result<f64> {
    icl_of_kind(MissingnessKind::Mcar, fit, n1, n2, nq, nl, IclBound::Elbo)
}

/// ICL of a fit under its own kind.
pub fn icl(fit: &FitResult, bound: IclBound) -> Result<f64> {
    let (n1, n2) = (fit.varstate.n_rows(), fit.varstate.n_cols());
    icl_of_kind(fit.kind(), fit, n1, n2, fit.nq(), fit.nl(), bound)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub nq: usize,
    pub nl: usize,
    pub kind: MissingnessKind,
    pub icl: f64,
    pub elbo: f64,
    /// Index of the fit in [`Selection::fits`].
    pub fit_ref: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFailure {
    pub nq: usize,
    pub nl: usize,
    pub kind: MissingnessKind,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best: SelectionEntry,
    /// Successful grid cells in grid order.
    pub table: Vec<SelectionEntry>,
    pub fits: Vec<FitResult>,
    pub failures: Vec<SelectionFailure>,
}

impl Selection {
    pub fn best_fit(&self) -> &FitResult {
        &self.fits[self.best.fit_ref]
    }
}

/// `true` when `a` should be preferred over `b`: higher ICL, then fewer
/// classes, then the simpler missingness kind.
pub fn prefer(a: &SelectionEntry, b: &SelectionEntry) -> bool {
    if a.icl != b.icl {
        return a.icl > b.icl;
    }
    let (sa, sb) = (a.nq + a.nl, b.nq + b.nl);
    if sa != sb {
        return sa < sb;
    }
    a.kind < b.kind
}

/// Fits every `(nq, nl, kind)` of the grid with [`multi_start_fit`] and picks
/// the highest ICL. Grid order is `nq`, then `nl`, then kinds as given.
pub fn select_model(
    x: &ObservedMatrix,
    nq_range: RangeInclusive<usize>,
    nl_range: RangeInclusive<usize>,
    kinds: &[MissingnessKind],
    cfg: &FitConfig,
    bound: IclBound,
) -> Result<Selection> {
    if nq_range.is_empty() || nl_range.is_empty() || kinds.is_empty() {
        return Err(LbmError::Domain("selection grid is empty".into()));
    }
    let grid: Vec<(usize, usize, MissingnessKind)> = nq_range
        .flat_map(|q| nl_range.clone().flat_map(move |l| kinds.iter().map(move |&k| (q, l, k))))
        .collect();
    let run = |&(nq, nl, kind): &(usize, usize, MissingnessKind)| {
        multi_start_fit(x, nq, nl, kind, cfg).and_then(|f| {
            let value = icl(&f, bound)?;
            if value.is_finite() {
                Ok((f, value))
            } else {
                Err(LbmError::Selection(format!("non-finite ICL for ({nq}, {nl}, {kind})")))
            }
        })
    };
    let outcomes: Vec<Result<(FitResult, f64)>> = if cfg.deterministic {
        grid.iter().map(run).collect()
    } else {
        grid.par_iter().map(run).collect()
    };

    let mut table = Vec::new();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for (&(nq, nl, kind), outcome) in grid.iter().zip(outcomes) {
        match outcome {
            Ok((f, value)) => {
                table.push(SelectionEntry {
                    nq,
                    nl,
                    kind,
                    icl: value,
                    elbo: f.elbo(),
                    fit_ref: fits.len(),
                });
                fits.push(f);
            }
            Err(e) => failures.push(SelectionFailure {
                nq,
                nl,
                kind,
                error: e.to_string(),
            }),
        }
    }
    let best = table
        .iter()
        .fold(None::<&SelectionEntry>, |acc, e| match acc {
            Some(b) if !prefer(e, b) => Some(b),
            _ => Some(e),
        })
        .cloned()
        .ok_or_else(|| LbmError::Selection(format!("all {} grid fits failed", failures.len())))?;
    Ok(Selection {
        best,
        table,
        fits,
        failures,
    })
}
