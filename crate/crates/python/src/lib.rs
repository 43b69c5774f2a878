//! Python bindings.
//!
//! Matrices cross the boundary as lists of rows whose cells are `1`, `0` or
//! `None` (missing).

use std::str::FromStr;

use lbmnar::{
    calibrate_epsilon, conditional_bayes_risk, icl, l_item as item_loss, make_benchmark_params, map_assignments,
    multi_start_fit, sample_lbm, select_model, CalibrationConfig, Cell, FitConfig, FitResult, GibbsSettings,
    IclBound, LabelAssignment, LbmError, MissingnessKind, MnarParams, ObservedMatrix, RiskConfig, RiskEstimator,
    RiskInit,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: LbmError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<Option<u8>>>) -> PyResult<ObservedMatrix> {
    let rows = rows
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|c| match c {
                    None => Ok(Cell::Missing),
                    Some(0) => Ok(Cell::Zero),
                    Some(1) => Ok(Cell::One),
                    Some(v) => Err(PyValueError::new_err(format!("cell value {v} is not 0, 1 or None"))),
                })
                .collect::<PyResult<Vec<Cell>>>()
        })
        .collect::<PyResult<Vec<_>>>()?;
    ObservedMatrix::from_rows(rows).map_err(py_err)
}

fn from_matrix(x: &ObservedMatrix) -> Vec<Vec<Option<u8>>> {
    x.rows()
        .map(|r| {
            r.iter()
                .map(|c| match c {
                    Cell::Missing => None,
                    Cell::Zero => Some(0),
                    Cell::One => Some(1),
                })
                .collect()
        })
        .collect()
}

fn kind(s: &str) -> PyResult<MissingnessKind> {
    MissingnessKind::from_str(s).map_err(py_err)
}

fn fit_dict<'py>(py: Python<'py>, f: &FitResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let labels = map_assignments(&f.varstate);
    d.set_item("kind", f.kind().as_str())?;
    d.set_item("pi", f.params.pi.clone())?;
    d.set_item("alpha_rows", f.params.alpha_rows.clone())?;
    d.set_item("alpha_cols", f.params.alpha_cols.clone())?;
    d.set_item("mu", f.params.mu)?;
    d.set_item("variances", (f.params.var_a, f.params.var_b, f.params.var_p, f.params.var_q))?;
    d.set_item("row_labels", labels.row_labels)?;
    d.set_item("col_labels", labels.col_labels)?;
    d.set_item("tau_rows", f.varstate.tau_rows.to_rows())?;
    d.set_item("tau_cols", f.varstate.tau_cols.to_rows())?;
    d.set_item("elbo", f.elbo())?;
    d.set_item("elbo_trace", f.elbo_trace.clone())?;
    d.set_item("icl", icl(f, IclBound::Elbo).map_err(py_err)?)?;
    d.set_item("converged", f.converged)?;
    d.set_item("n_iters", f.n_iters)?;
    Ok(d)
}

/// Benchmark matrix with three row and three column classes.
#[pyfunction]
#[pyo3(signature = (epsilon, n_rows, n_cols, seed=0, value_variance=None))]
fn simulate<'py>(
    py: Python<'py>,
    epsilon: f64,
    n_rows: usize,
    n_cols: usize,
    seed: u64,
    value_variance: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mnar = value_variance.map_or_else(MnarParams::benchmark, MnarParams::with_value_effects);
    let params = make_benchmark_params(epsilon, &mnar).map_err(py_err)?;
    let s = sample_lbm(&params, n_rows, n_cols, seed).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("matrix", from_matrix(&s.observed()))?;
    d.set_item("row_labels", s.row_labels.clone())?;
    d.set_item("col_labels", s.col_labels.clone())?;
    d.set_item("pi", params.pi)?;
    d.set_item("missing_fraction", s.observed().missing_fraction())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (matrix, nq, nl, kind="nmar", n_inits=1, seed=0, max_iters=500, tol=1e-6))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    matrix: Vec<Vec<Option<u8>>>,
    nq: usize,
    nl: usize,
    kind: &str,
    n_inits: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let x = to_matrix(matrix)?;
    let k = self::kind(kind)?;
    let cfg = FitConfig {
        n_inits,
        seed,
        max_vem_iters: max_iters,
        elbo_rel_tol: tol,
        ..Default::default()
    };
    let f = py.detach(|| multi_start_fit(&x, nq, nl, k, &cfg)).map_err(py_err)?;
    fit_dict(py, &f)
}

/// Fits every class-count pair and kind; returns the table and the best fit.
#[pyfunction]
#[pyo3(signature = (matrix, nq_range=(2, 5), nl_range=(2, 5), kinds=vec!["mar".to_owned(), "nmar".to_owned()], n_inits=1, seed=0))]
fn select<'py>(
    py: Python<'py>,
    matrix: Vec<Vec<Option<u8>>>,
    nq_range: (usize, usize),
    nl_range: (usize, usize),
    kinds: Vec<String>,
    n_inits: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let x = to_matrix(matrix)?;
    let kinds = kinds.iter().map(|k| kind(k)).collect::<PyResult<Vec<_>>>()?;
    let cfg = FitConfig {
        n_inits,
        seed,
        ..Default::default()
    };
    let sel = py
        .detach(|| select_model(&x, nq_range.0..=nq_range.1, nl_range.0..=nl_range.1, &kinds, &cfg, IclBound::Elbo))
        .map_err(py_err)?;
    let table: Vec<(usize, usize, &str, f64)> = sel.table.iter().map(|e| (e.nq, e.nl, e.kind.as_str(), e.icl)).collect();
    let d = PyDict::new(py);
    d.set_item("table", table)?;
    d.set_item("best", fit_dict(py, sel.best_fit())?)?;
    Ok(d)
}

/// Aligned fraction of misclassified entries.
#[pyfunction]
fn l_item(truth_rows: Vec<usize>, truth_cols: Vec<usize>, pred_rows: Vec<usize>, pred_cols: Vec<usize>, nq: usize, nl: usize) -> PyResult<f64> {
    let truth = LabelAssignment::new(truth_rows, truth_cols);
    let pred = LabelAssignment::new(pred_rows, pred_cols);
    Ok(item_loss(&truth, &pred, nq, nl, true).map_err(py_err)?.loss)
}

fn risk_config(estimator: &str) -> PyResult<RiskEstimator> {
    match estimator {
        "mean-field" => Ok(RiskEstimator::MeanField),
        "gibbs" => Ok(RiskEstimator::Gibbs(GibbsSettings::default())),
        other => Err(PyValueError::new_err(format!("unknown estimator '{other}'"))),
    }
}

/// Conditional Bayes risk of a benchmark matrix drawn at `epsilon`.
#[pyfunction]
#[pyo3(signature = (matrix, epsilon, row_labels, col_labels, value_variance=None, estimator="mean-field", seed=0))]
#[allow(clippy::too_many_arguments)]
fn benchmark_risk(
    py: Python<'_>,
    matrix: Vec<Vec<Option<u8>>>,
    epsilon: f64,
    row_labels: Vec<usize>,
    col_labels: Vec<usize>,
    value_variance: Option<f64>,
    estimator: &str,
    seed: u64,
) -> PyResult<f64> {
    let x = to_matrix(matrix)?;
    let mnar = value_variance.map_or_else(MnarParams::benchmark, MnarParams::with_value_effects);
    let params = make_benchmark_params(epsilon, &mnar).map_err(py_err)?;
    let cfg = RiskConfig {
        init: RiskInit::Labels(LabelAssignment::new(row_labels, col_labels)),
        estimator: risk_config(estimator)?,
        seed,
        ..Default::default()
    };
    Ok(py.detach(|| conditional_bayes_risk(&x, &params, &cfg)).map_err(py_err)?.risk)
}

#[pyfunction]
#[pyo3(signature = (target_risk, n_rows, n_cols, seed=0, value_variance=None, estimator="mean-field"))]
fn calibrate(
    py: Python<'_>,
    target_risk: f64,
    n_rows: usize,
    n_cols: usize,
    seed: u64,
    value_variance: Option<f64>,
    estimator: &str,
) -> PyResult<f64> {
    let mnar = value_variance.map_or_else(MnarParams::benchmark, MnarParams::with_value_effects);
    let cfg = CalibrationConfig {
        risk: RiskConfig {
            estimator: risk_config(estimator)?,
            ..Default::default()
        },
        ..Default::default()
    };
    py.detach(|| calibrate_epsilon(target_risk, n_rows, n_cols, &mnar, seed, &cfg)).map_err(py_err)
}

#[pymodule]
fn pylbmnar(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(l_item, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_risk, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    Ok(())
}
