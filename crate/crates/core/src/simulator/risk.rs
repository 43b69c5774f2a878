//! Conditional Bayes risk of the MAP co-clustering given the true parameters.

use serde::{Deserialize, Serialize};

use crate::error::{LbmError, Result};
use crate::inference::criterion::evaluate;
use crate::inference::lbfgs::LbfgsSettings;
use crate::inference::spectral::{spectral_labels, LABEL_WEIGHT};
use crate::inference::vem::{update_latents, update_memberships};
use crate::inference::{Membership, OptimizerConfig, VariationalState};
use crate::metrics::LabelAssignment;
use crate::model::{Cell, ModelParams, ObservedMatrix};
use crate::rng;

use super::gibbs::{gibbs_marginals, GibbsSettings};

/// Approximation of the label posterior used when no exact computation is
/// available.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum RiskEstimator {
    /// Mean-field E-step. Its memberships are overconfident, so the risk is
    /// biased low on hard matrices.
    #[default]
    MeanField,
    /// Gibbs sampling of labels and latent effects.
    Gibbs(GibbsSettings),
}

/// Starting memberships of the E-step or sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RiskInit {
    /// Spectral labels, relabeled to best fit the given block probabilities.
    Spectral,
    /// Known labels, typically the simulated truth.
    Labels(LabelAssignment),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub optimizer: OptimizerConfig,
    pub init: RiskInit,
    pub seed: u64,
    pub estimator: RiskEstimator,
    /// Largest number of joint labelings of the smaller side that is
    /// enumerated exactly when the model has no latent effects.
    pub exact_limit: usize,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            rel_tol: 1e-6,
            optimizer: OptimizerConfig::default(),
            init: RiskInit::Spectral,
            seed: 0,
            estimator: RiskEstimator::MeanField,
            exact_limit: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskMethod {
    /// Posterior marginals by enumeration of labelings.
    Exact,
    /// Mean-field E-step with the parameters held fixed.
    MeanField,
    Gibbs,
    /// No observed cell: the posterior is the prior.
    Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    /// `r_r + r_c - r_r r_c`.
    pub risk: f64,
    /// `1 - mean_i max_q tau_iq`.
    pub row_risk: f64,
    pub col_risk: f64,
    pub converged: bool,
    /// E-step iterations or kept Gibbs sweeps.
    pub iterations: usize,
    /// Final `J` of the E-step, or the exact log-likelihood for
    /// [`RiskMethod::Exact`].
    pub elbo: Option<f64>,
    pub method: RiskMethod,
}

/// Up to this many joint row/column relabelings are tried when aligning
/// spectral labels to the true parameters.
const MAX_ALIGN_PERMUTATIONS: usize = 1440;

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for m in 0..k {
        let mut next = Vec::new();
        for p in &out {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, m);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// Relabels hard labels so that their observed block counts best fit `pi`.
fn align_to_params(x: &ObservedMatrix, params: &ModelParams, rows: &mut [usize], cols: &mut [usize]) {
    let (nq, nl) = (params.nq(), params.nl());
    let n_perm: usize = (1..=nq).product::<usize>() * (1..=nl).product::<usize>();
    if n_perm > MAX_ALIGN_PERMUTATIONS {
        return;
    }
    let mut ones = vec![0.0; nq * nl];
    let mut zeros = vec![0.0; nq * nl];
    for i in 0..x.n_rows() {
        for j in 0..x.n_cols() {
            let k = rows[i] * nl + cols[j];
            match x.get(i, j) {
                Cell::One => ones[k] += 1.0,
                Cell::Zero => zeros[k] += 1.0,
                Cell::Missing => {}
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, (0..nq).collect::<Vec<_>>(), (0..nl).collect::<Vec<_>>());
    for rp in permutations(nq) {
        for cp in permutations(nl) {
            let mut ll = 0.0;
            for q in 0..nq {
                for l in 0..nl {
                    let p = params.pi[rp[q]][cp[l]];
                    ll += ones[q * nl + l] * p.ln() + zeros[q * nl + l] * (1.0 - p).ln();
                }
            }
            if ll > best.0 {
                best = (ll, rp.clone(), cp.clone());
            }
        }
    }
    rows.iter_mut().for_each(|q| *q = best.1[*q]);
    cols.iter_mut().for_each(|l| *l = best.2[*l]);
}

fn map_risk(m: &Membership) -> f64 {
    let total: f64 = (0..m.n())
        .map(|i| m.row(i).iter().copied().fold(0.0, f64::max))
        .sum();
    1.0 - total / m.n() as f64
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact label marginals of a latent-free model: every labeling of the
/// columns is enumerated and the rows, independent given the column labels,
/// are summed out. Returns `(row marginals, column marginals, log p(X))`.
fn enumerate_marginals(x: &ObservedMatrix, params: &ModelParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
    let (n1, n2) = (x.n_rows(), x.n_cols());
    let (nq, nl) = (params.nq(), params.nl());
    let log_pi: Vec<Vec<[f64; 2]>> = params
        .pi
        .iter()
        .map(|r| r.iter().map(|p| [(1.0 - p).ln(), p.ln()]).collect())
        .collect();
    let log_ar: Vec<f64> = params.alpha_rows.iter().map(|a| a.ln()).collect();
    let log_ac: Vec<f64> = params.alpha_cols.iter().map(|a| a.ln()).collect();

    let mut labels = vec![0usize; n2];
    let mut logs = Vec::new();
    let mut row_post = Vec::new();
    let mut scores = vec![0.0; nq];
    loop {
        let mut lp: f64 = labels.iter().map(|&l| log_ac[l]).sum();
        let mut post = vec![0.0; n1 * nq];
        for i in 0..n1 {
            for (q, sc) in scores.iter_mut().enumerate() {
                *sc = log_ar[q];
                for (j, &l) in labels.iter().enumerate() {
                    match x.get(i, j) {
                        Cell::One => *sc += log_pi[q][l][1],
                        Cell::Zero => *sc += log_pi[q][l][0],
                        Cell::Missing => {}
                    }
                }
            }
            let z = log_sum_exp(&scores);
            lp += z;
            for q in 0..nq {
                post[i * nq + q] = (scores[q] - z).exp();
            }
        }
        logs.push(lp);
        row_post.push((labels.clone(), post));
        // next labeling, odometer order
        let mut j = 0;
        while j < n2 {
            labels[j] += 1;
            if labels[j] < nl {
                break;
            }
            labels[j] = 0;
            j += 1;
        }
        if j == n2 {
            break;
        }
    }
    let log_px = log_sum_exp(&logs);
    let mut rows = vec![vec![0.0; nq]; n1];
    let mut cols = vec![vec![0.0; nl]; n2];
    for (lp, (labels, post)) in logs.iter().zip(&row_post) {
        let w = (lp - log_px).exp();
        for (j, &l) in labels.iter().enumerate() {
            cols[j][l] += w;
        }
        for (i, r) in rows.iter_mut().enumerate() {
            for (q, v) in r.iter_mut().enumerate() {
                *v += w * post[i * nq + q];
            }
        }
    }
    (rows, cols, log_px)
}

fn labelings(n: usize, k: usize, limit: usize) -> Option<usize> {
    let mut total: usize = 1;
    for _ in 0..n {
        total = total.checked_mul(k)?;
        if total > limit {
            return None;
        }
    }
    Some(total)
}

/// Exact conditional Bayes risk when the model has no latent effects and the
/// smaller side has at most `limit` labelings.
fn exact_risk(x: &ObservedMatrix, params: &ModelParams, limit: usize) -> Option<RiskEstimate> {
    if params.propensity_active() || params.value_effects_active() {
        return None;
    }
    let by_cols = labelings(x.n_cols(), params.nl(), limit);
    let by_rows = labelings(x.n_rows(), params.nq(), limit);
    let (rows, cols, log_px) = match (by_rows, by_cols) {
        (_, Some(c)) if by_rows.is_none_or(|r| c <= r) => enumerate_marginals(x, params),
        (Some(_), _) => {
            let (c, r, l) = enumerate_marginals(&transpose(x), &transpose_params(params));
            (r, c, l)
        }
        _ => return None,
    };
    let to_membership = |m: Vec<Vec<f64>>| Membership::from_rows(&m).expect("marginals form a simplex");
    Some(estimate(
        &to_membership(rows),
        &to_membership(cols),
        true,
        0,
        Some(log_px),
        RiskMethod::Exact,
    ))
}

fn transpose(x: &ObservedMatrix) -> ObservedMatrix {
    let cells = (0..x.n_cols())
        .flat_map(|j| (0..x.n_rows()).map(move |i| x.get(i, j)))
        .collect();
    ObservedMatrix::new(x.n_cols(), x.n_rows(), cells).expect("same cell count")
}

fn transpose_params(p: &ModelParams) -> ModelParams {
    let mut t = p.clone();
    t.alpha_rows = p.alpha_cols.clone();
    t.alpha_cols = p.alpha_rows.clone();
    t.pi = (0..p.nl()).map(|l| (0..p.nq()).map(|q| p.pi[q][l]).collect()).collect();
    t
}

/// Estimated conditional Bayes risk of the MAP classifier.
///
/// Small latent-free problems are solved exactly by enumeration. Otherwise
/// the posterior over labels is approximated by the mean-field E-step run
/// with `true_params` held fixed. With no observed cell the memberships are
/// the class proportions.
pub fn conditional_bayes_risk(x: &ObservedMatrix, true_params: &ModelParams, config: &RiskConfig) -> Result<RiskEstimate> {
    true_params.validate()?;
    if config.max_iters == 0 || !(config.rel_tol > 0.0) {
        return Err(LbmError::Domain("invalid risk settings".into()));
    }
    if matches!(config.estimator, RiskEstimator::Gibbs(g) if g.sweeps == 0) {
        return Err(LbmError::Domain("the sampler needs at least one kept sweep".into()));
    }
    let (n1, n2) = (x.n_rows(), x.n_cols());
    let (nq, nl) = (true_params.nq(), true_params.nl());
    if x.is_all_missing() {
        let prior = |n: usize, alpha: &[f64]| {
            Membership::from_rows(&vec![alpha.to_vec(); n]).expect("proportions form a simplex")
        };
        return Ok(estimate(
            &prior(n1, &true_params.alpha_rows),
            &prior(n2, &true_params.alpha_cols),
            true,
            0,
            None,
            RiskMethod::Prior,
        ));
    }
    if let Some(est) = exact_risk(x, true_params, config.exact_limit) {
        return Ok(est);
    }

    let (rows, cols) = match &config.init {
        RiskInit::Labels(labels) => {
            if labels.row_labels.len() != n1 || labels.col_labels.len() != n2 {
                return Err(LbmError::Contract("initial labels do not match the matrix".into()));
            }
            if labels.row_labels.iter().any(|&q| q >= nq) || labels.col_labels.iter().any(|&l| l >= nl) {
                return Err(LbmError::Contract("initial labels exceed the class counts".into()));
            }
            (labels.row_labels.clone(), labels.col_labels.clone())
        }
        RiskInit::Spectral => {
            let (mut rows, mut cols) = spectral_labels(x, nq, nl, &mut rng::seeded(config.seed));
            align_to_params(x, true_params, &mut rows, &mut cols);
            (rows, cols)
        }
    };

    if let RiskEstimator::Gibbs(settings) = config.estimator {
        let mut r = rng::stream(config.seed, 3);
        let (tau_rows, tau_cols) = gibbs_marginals(x, true_params, rows, cols, &settings, &mut r);
        return Ok(estimate(&tau_rows, &tau_cols, true, settings.sweeps, None, RiskMethod::Gibbs));
    }

    let mut gamma = VariationalState::with_prior_latents(
        Membership::from_labels(&rows, nq, LABEL_WEIGHT),
        Membership::from_labels(&cols, nl, LABEL_WEIGHT),
        true_params,
    );
    let settings = LbfgsSettings {
        max_iters: config.optimizer.max_inner_iters,
        gradient_tol: config.optimizer.gradient_tol,
        history: config.optimizer.history_size,
    };
    let mut elbo = evaluate(x, &gamma, true_params, false).elbo;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        update_memberships(x, true_params, &mut gamma);
        let next = match update_latents(x, true_params, &mut gamma, &settings) {
            Some((j, _, _)) => j,
            None => evaluate(x, &gamma, true_params, false).elbo,
        };
        iterations += 1;
        let change = ((next - elbo) / elbo.abs().max(f64::MIN_POSITIVE)).abs();
        elbo = next;
        if change < config.rel_tol {
            converged = true;
            break;
        }
    }
    Ok(estimate(
        &gamma.tau_rows,
        &gamma.tau_cols,
        converged,
        iterations,
        Some(elbo),
        RiskMethod::MeanField,
    ))
}

fn estimate(
    rows: &Membership,
    cols: &Membership,
    converged: bool,
    iterations: usize,
    elbo: Option<f64>,
    method: RiskMethod,
) -> RiskEstimate {
    let (row_risk, col_risk) = (map_risk(rows), map_risk(cols));
    RiskEstimate {
        risk: row_risk + col_risk - row_risk * col_risk,
        row_risk,
        col_risk,
        converged,
        iterations,
        elbo,
        method,
    }
}
