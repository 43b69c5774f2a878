use std::path::Path;

use lbmnar::io::{fmt17, parse_ternary, parse_votes, write_ternary, LabeledMatrix, MatrixFormat};
use lbmnar::metrics::latent_mse;
use lbmnar::selection::SelectionFailure;
use lbmnar::{
    align_labels, calibrate_epsilon, conditional_bayes_risk, icl, l_item, make_benchmark_params, map_assignments,
    multi_start_fit, param_max_error, sample_lbm, select_model, CalibrationConfig, CompleteSample, IclBound,
    LabelAssignment, LatentBlock, MissingnessKind, MnarParams, ModelParams, RiskConfig, RiskEstimate, RiskInit,
    SelectionEntry, VariationalState,
};
use serde::{Deserialize, Serialize};

use crate::options::Options;
use crate::output::{FitRecord, Metrics, Run, RunManifest, Writer};
use crate::CliError;

/// Ground truth written by `simulate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub manifest: RunManifest,
    pub epsilon: f64,
    pub params: ModelParams,
    pub sample: CompleteSample,
}

fn load_input(run: &mut Run, opts: &Options) -> Result<LabeledMatrix, CliError> {
    let path = opts.require(&opts.input, "input")?;
    let bytes = run.read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?;
    Ok(match opts.format()? {
        MatrixFormat::Ternary => parse_ternary(&text)?,
        MatrixFormat::Votes => parse_votes(&text)?,
    })
}

fn mnar_params(opts: &Options) -> Result<MnarParams, CliError> {
    let mut m = match opts.value_variance {
        Some(v) => MnarParams::with_value_effects(v),
        None => MnarParams::benchmark(),
    };
    match opts.kind()? {
        MissingnessKind::Mnar => {}
        MissingnessKind::Mar => (m.var_b, m.var_q) = (0.0, 0.0),
        MissingnessKind::Mcar => (m.var_a, m.var_b, m.var_p, m.var_q) = (0.0, 0.0, 0.0, 0.0),
    }
    Ok(m)
}

fn calibration(opts: &Options) -> Result<CalibrationConfig, CliError> {
    Ok(CalibrationConfig {
        risk: RiskConfig {
            estimator: opts.risk_estimator()?,
            ..Default::default()
        },
        ..Default::default()
    })
}

fn size(opts: &Options) -> (usize, usize) {
    (opts.rows.unwrap_or(100), opts.cols.unwrap_or(100))
}

pub fn simulate(opts: &Options) -> Result<(), CliError> {
    let mut run = Run::new("simulate", opts);
    let (n1, n2) = size(opts);
    let mnar = mnar_params(opts)?;
    let epsilon = match (opts.epsilon, opts.target_risk) {
        (Some(e), _) => e,
        (None, Some(r)) => {
            let cal = calibration(opts)?;
            run.timed("calibrate", || calibrate_epsilon(r, n1, n2, &mnar, opts.seed(), &cal))?
        }
        (None, None) => return Err(CliError::Usage("--epsilon or --target-risk is required".into())),
    };
    let params = make_benchmark_params(epsilon, &mnar)?;
    let sample = run.timed("sample", || sample_lbm(&params, n1, n2, opts.seed()))?;
    let mut matrix = Vec::new();
    write_ternary(&sample.observed(), &mut matrix)?;
    let mut out = Writer::new(opts.output_dir())?;
    out.text("matrix.csv", &String::from_utf8(matrix).expect("ternary output is ASCII"))?;
    out.json(
        "truth.json",
        &TruthRecord {
            manifest: run.finish(),
            epsilon,
            params,
            sample,
        },
    )?;
    out.commit()?;
    Ok(())
}

fn metrics(truth: &TruthRecord, params: &ModelParams, varstate: &VariationalState) -> Result<Metrics, CliError> {
    let t = LabelAssignment::from_sample(&truth.sample);
    let pred = map_assignments(varstate);
    let nq = params.nq().max(truth.params.nq());
    let nl = params.nl().max(truth.params.nl());
    let param_max_error = if params.nq() == truth.params.nq() && params.nl() == truth.params.nl() {
        let (rp, cp) = align_labels(&t, &pred, nq, nl)?;
        param_max_error(&truth.params, params, &rp, &cp)?
    } else {
        f64::NAN
    };
    Ok(Metrics {
        l_item: l_item(&t, &pred, nq, nl, true)?,
        param_max_error,
        latent_mse: latent_mse(&truth.sample, varstate)?,
    })
}

pub fn fit(opts: &Options) -> Result<(), CliError> {
    let mut run = Run::new("fit", opts);
    let x = load_input(&mut run, opts)?.matrix;
    let nq = *opts.require(&opts.nq, "nq")?;
    let nl = *opts.require(&opts.nl, "nl")?;
    let truth: Option<TruthRecord> = opts.truth.as_deref().map(|p| run.read_json(p)).transpose()?;
    let (kind, cfg) = (opts.kind()?, opts.fit_config());
    let result = run.timed("fit", || multi_start_fit(&x, nq, nl, kind, &cfg))?;
    let value = icl(&result, IclBound::Elbo)?;
    let m = truth.map(|t| metrics(&t, &result.params, &result.varstate)).transpose()?;
    let mut out = Writer::new(opts.output_dir())?;
    out.json("fit.json", &FitRecord::new(run.finish(), &result, value, m))?;
    out.commit()?;
    Ok(())
}

#[derive(Serialize)]
struct SelectionRecord<'a> {
    manifest: RunManifest,
    best: &'a SelectionEntry,
    table: &'a [SelectionEntry],
    failures: &'a [SelectionFailure],
}

pub fn select(opts: &Options) -> Result<(), CliError> {
    let mut run = Run::new("select", opts);
    let x = load_input(&mut run, opts)?.matrix;
    let (nq, nl, kinds) = (opts.nq_range()?, opts.nl_range()?, opts.kinds()?);
    let cfg = opts.fit_config();
    let sel = run.timed("select", || select_model(&x, nq, nl, &kinds, &cfg, IclBound::Elbo))?;
    let manifest = run.finish();
    let mut out = Writer::new(opts.output_dir())?;
    out.csv(
        "selection.csv",
        &["nq", "nl", "kind", "icl", "elbo"],
        sel.table.iter().map(|e| {
            vec![e.nq.to_string(), e.nl.to_string(), e.kind.to_string(), fmt17(e.icl), fmt17(e.elbo)]
        }),
    )?;
    out.json(
        "selection.json",
        &SelectionRecord {
            manifest: manifest.clone(),
            best: &sel.best,
            table: &sel.table,
            failures: &sel.failures,
        },
    )?;
    out.json("best_fit.json", &FitRecord::new(manifest, sel.best_fit(), sel.best.icl, None))?;
    out.commit()?;
    Ok(())
}

#[derive(Serialize)]
struct CalibrationRecord {
    manifest: RunManifest,
    target_risk: f64,
    epsilon: f64,
    rows: usize,
    cols: usize,
}

#[derive(Serialize)]
struct RiskRecord {
    manifest: RunManifest,
    estimate: RiskEstimate,
}

pub fn risk(opts: &Options) -> Result<(), CliError> {
    let mut run = Run::new("risk", opts);
    let mut out = Writer::new(opts.output_dir())?;
    if let Some(target) = opts.target_risk {
        let (n1, n2) = size(opts);
        let mnar = mnar_params(opts)?;
        let cal = calibration(opts)?;
        let epsilon = run.timed("calibrate", || calibrate_epsilon(target, n1, n2, &mnar, opts.seed(), &cal))?;
        out.json(
            "risk.json",
            &CalibrationRecord {
                manifest: run.finish(),
                target_risk: target,
                epsilon,
                rows: n1,
                cols: n2,
            },
        )?;
    } else {
        let x = load_input(&mut run, opts)?.matrix;
        let truth: TruthRecord = run.read_json(opts.require(&opts.truth, "truth")?)?;
        let cfg = RiskConfig {
            init: RiskInit::Labels(LabelAssignment::from_sample(&truth.sample)),
            estimator: opts.risk_estimator()?,
            seed: opts.seed(),
            ..Default::default()
        };
        let estimate = run.timed("risk", || conditional_bayes_risk(&x, &truth.params, &cfg))?;
        out.json(
            "risk.json",
            &RiskRecord {
                manifest: run.finish(),
                estimate,
            },
        )?;
    }
    out.commit()?;
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    manifest: RunManifest,
    metrics: Metrics,
}

pub fn eval(opts: &Options) -> Result<(), CliError> {
    let mut run = Run::new("eval", opts);
    let fit: FitRecord = run.read_json(opts.require(&opts.fit, "fit")?)?;
    let truth: TruthRecord = run.read_json(opts.require(&opts.truth, "truth")?)?;
    let m = metrics(&truth, &fit.params, &fit.varstate)?;
    let mut out = Writer::new(opts.output_dir())?;
    out.json(
        "eval.json",
        &EvalRecord {
            manifest: run.finish(),
            metrics: m,
        },
    )?;
    out.commit()?;
    Ok(())
}

/// Indices sorted by MAP class, ties kept in input order.
fn grouped(labels: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    order
}

fn ids(given: Option<&Vec<String>>, n: usize, prefix: &str) -> Result<Vec<String>, CliError> {
    match given {
        Some(v) if v.len() == n => Ok(v.clone()),
        Some(_) => Err(CliError::Usage("input size does not match the fit".into())),
        None => Ok((0..n).map(|i| format!("{prefix}{i}")).collect()),
    }
}

pub fn report(opts: &Options) -> Result<(), CliError> {
    let mut run = Run::new("report", opts);
    let fit: FitRecord = run.read_json(opts.require(&opts.fit, "fit")?)?;
    let labeled = opts.input.is_some().then(|| load_input(&mut run, opts)).transpose()?;
    let g = &fit.varstate;
    let (n1, n2) = (g.n_rows(), g.n_cols());
    let row_ids = ids(labeled.as_ref().and_then(|m| m.row_ids.as_ref()), n1, "r")?;
    let col_ids = ids(labeled.as_ref().and_then(|m| m.col_ids.as_ref()), n2, "c")?;
    let pred = map_assignments(g);

    let mut out = Writer::new(opts.output_dir())?;
    let order = |name: &str, labels: &[usize], names: &[String], out: &mut Writer| {
        out.csv(
            name,
            &["position", "index", "id", "class"],
            grouped(labels)
                .into_iter()
                .enumerate()
                .map(|(pos, i)| vec![pos.to_string(), i.to_string(), names[i].clone(), labels[i].to_string()]),
        )
    };
    order("row_order.csv", &pred.row_labels, &row_ids, &mut out)?;
    order("col_order.csv", &pred.col_labels, &col_ids, &mut out)?;

    let mut header = vec!["row_class".to_owned()];
    header.extend((0..fit.params.nl()).map(|l| format!("col_class_{l}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "block_probs.csv",
        &header,
        fit.params.pi.iter().enumerate().map(|(q, row)| {
            std::iter::once(q.to_string()).chain(row.iter().map(|&p| fmt17(p))).collect()
        }),
    )?;

    let (nu_a, nu_b) = (g.latent_means(LatentBlock::A), g.latent_means(LatentBlock::B));
    out.csv(
        "row_latents.csv",
        &["index", "id", "class", "nu_a", "nu_b"],
        (0..n1).map(|i| {
            vec![i.to_string(), row_ids[i].clone(), pred.row_labels[i].to_string(), fmt17(nu_a[i]), fmt17(nu_b[i])]
        }),
    )?;
    let (nu_p, nu_q) = (g.latent_means(LatentBlock::P), g.latent_means(LatentBlock::Q));
    out.csv(
        "col_latents.csv",
        &["index", "id", "class", "nu_p", "nu_q"],
        (0..n2).map(|j| {
            vec![j.to_string(), col_ids[j].clone(), pred.col_labels[j].to_string(), fmt17(nu_p[j]), fmt17(nu_q[j])]
        }),
    )?;
    out.json("report.json", &run.finish())?;
    out.commit()?;
    Ok(())
}

pub fn clear_marker(dir: &Path) {
    let _ = std::fs::remove_file(dir.join(crate::output::ERROR_FILE));
}
