use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LbmError, Result};
use crate::model::{LatentBlock, MissingnessKind, ModelParams, ObservedMatrix};
use crate::rng::derive_seed;

use super::criterion::{chain, evaluate, membership_scores, pack, unpack, CoordGroups};
use super::lbfgs::{maximize, LbfgsSettings};
use super::spectral::{init_with, InitKind};
use super::state::VariationalState;

const ALPHA_FLOOR: f64 = 1e-10;
const VARIANCE_FLOOR: f64 = 1e-8;
/// Fraction of labels reassigned in perturbed spectral starts.
const PERTURB_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Iteration cap of each quasi-Newton solve inside a VE or M step.
    pub max_inner_iters: usize,
    pub gradient_tol: f64,
    pub history_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_inner_iters: 25,
            gradient_tol: 1e-5,
            history_size: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_vem_iters: usize,
    /// Stop when `|J_t - J_{t-1}| / |J_{t-1}|` over a full iteration drops below this.
    pub elbo_rel_tol: f64,
    pub optimizer: OptimizerConfig,
    pub n_inits: usize,
    pub warmup_iters: usize,
    pub seed: u64,
    /// Run restarts sequentially. Results do not depend on this flag.
    pub deterministic: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_vem_iters: 500,
            elbo_rel_tol: 1e-6,
            optimizer: OptimizerConfig::default(),
            n_inits: 1,
            warmup_iters: 15,
            seed: 0,
            deterministic: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("max_vem_iters", self.max_vem_iters),
            ("max_inner_iters", self.optimizer.max_inner_iters),
            ("history_size", self.optimizer.history_size),
            ("n_inits", self.n_inits),
            ("warmup_iters", self.warmup_iters),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(LbmError::Domain(format!("{name} must be at least 1")));
        }
        if !(self.elbo_rel_tol > 0.0 && self.optimizer.gradient_tol > 0.0) {
            return Err(LbmError::Domain("tolerances must be positive".into()));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsSettings {
        LbfgsSettings {
            max_iters: self.optimizer.max_inner_iters,
            gradient_tol: self.optimizer.gradient_tol,
            history: self.optimizer.history_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub varstate: VariationalState,
    /// `J` at the start and after every VE and M half-step.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub n_iters: usize,
    pub seed: u64,
    /// The input had no observed cell.
    pub degenerate: bool,
    /// Missing-cell log guard activations over the run.
    pub guard_hits: u64,
    /// Inner quasi-Newton solves that ended on a failed line search.
    pub inner_failures: usize,
}

impl FitResult {
    pub fn elbo(&self) -> f64 {
        *self.elbo_trace.last().expect("trace holds the initial value")
    }

    pub fn kind(&self) -> MissingnessKind {
        self.params.kind
    }

    pub fn nq(&self) -> usize {
        self.params.nq()
    }

    pub fn nl(&self) -> usize {
        self.params.nl()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub value: T,
    pub elbo: f64,
    /// Every inner solve reached its gradient tolerance or the iteration cap
    /// without a line-search failure.
    pub converged: bool,
    pub guard_hits: u64,
}

/// Maximizes `J` over the variational parameters with `theta` fixed.
///
/// Row memberships, then column memberships, are set to their exact
/// coordinate-wise maximizers; the latent moments are then improved jointly
/// by L-BFGS.
pub fn ve_step(
    x: &ObservedMatrix,
    params: &ModelParams,
    gamma: &VariationalState,
    cfg: &FitConfig,
) -> Result<StepOutcome<VariationalState>> {
    gamma.validate_against(params, x.n_rows(), x.n_cols())?;
    Ok(ve_step_unchecked(x, params, gamma.clone(), cfg, true))
}

pub(crate) fn update_memberships(x: &ObservedMatrix, params: &ModelParams, gamma: &mut VariationalState) -> u64 {
    let (s1, h1) = membership_scores(x, gamma, params, true);
    let nq = params.nq();
    for i in 0..x.n_rows() {
        gamma.tau_rows.set_softmax(i, &s1[i * nq..(i + 1) * nq]);
    }
    let (s2, h2) = membership_scores(x, gamma, params, false);
    let nl = params.nl();
    for j in 0..x.n_cols() {
        gamma.tau_cols.set_softmax(j, &s2[j * nl..(j + 1) * nl]);
    }
    h1 + h2
}

pub(crate) fn update_latents(
    x: &ObservedMatrix,
    params: &ModelParams,
    gamma: &mut VariationalState,
    settings: &LbfgsSettings,
) -> Option<(f64, bool, u64)> {
    if LatentBlock::ALL.iter().all(|&b| gamma.latent(b).is_none()) {
        return None;
    }
    let groups = CoordGroups::LATENTS;
    let z0 = pack(gamma, params, groups);
    let mut work = gamma.clone();
    let mut scratch_params = params.clone();
    let mut hits = 0;
    let out = maximize(
        |z, g| {
            unpack(z, &mut work, &mut scratch_params, groups);
            let ev = evaluate(x, &work, params, true);
            hits += ev.guard_hits;
            let grad = chain(ev.gradient.as_ref().expect("requested"), &work, params, groups);
            g.copy_from_slice(&grad);
            ev.elbo
        },
        z0,
        settings,
    );
    let mut p = params.clone();
    unpack(&out.x, gamma, &mut p, groups);
    Some((out.value, !out.line_search_failed, hits))
}

fn ve_step_unchecked(
    x: &ObservedMatrix,
    params: &ModelParams,
    mut gamma: VariationalState,
    cfg: &FitConfig,
    update_tau: bool,
) -> StepOutcome<VariationalState> {
    let mut hits = 0;
    if update_tau {
        hits += update_memberships(x, params, &mut gamma);
    }
    let mut converged = true;
    let elbo = match update_latents(x, params, &mut gamma, &cfg.lbfgs()) {
        Some((j, ok, h)) => {
            hits += h;
            converged = ok;
            j
        }
        None => {
            let ev = evaluate(x, &gamma, params, false);
            hits += ev.guard_hits;
            ev.elbo
        }
    };
    StepOutcome {
        value: gamma,
        elbo,
        converged,
        guard_hits: hits,
    }
}

/// Maximizes `J` over `theta` with `gamma` fixed.
///
/// Class proportions and prior variances have closed-form maximizers; the
/// block probabilities and `mu` are solved jointly by L-BFGS.
pub fn m_step(
    x: &ObservedMatrix,
    gamma: &VariationalState,
    params: &ModelParams,
    cfg: &FitConfig,
) -> Result<StepOutcome<ModelParams>> {
    gamma.validate_against(params, x.n_rows(), x.n_cols())?;
    Ok(m_step_unchecked(x, gamma, params.clone(), cfg))
}

pub(crate) fn closed_form_proportions(totals: &[f64]) -> Vec<f64> {
    let n: f64 = totals.iter().sum();
    let mut a: Vec<f64> = totals.iter().map(|t| (t / n).max(ALPHA_FLOOR)).collect();
    let s: f64 = a.iter().sum();
    a.iter_mut().for_each(|v| *v /= s);
    a
}

fn m_step_unchecked(
    x: &ObservedMatrix,
    gamma: &VariationalState,
    mut params: ModelParams,
    cfg: &FitConfig,
) -> StepOutcome<ModelParams> {
    params.alpha_rows = closed_form_proportions(&gamma.tau_rows.class_totals());
    params.alpha_cols = closed_form_proportions(&gamma.tau_cols.class_totals());
    for block in LatentBlock::ALL {
        if let Some(f) = gamma.latent(block) {
            // optimum over the variances that keep every rho below the cap
            let sq: f64 = f.nu.iter().zip(&f.rho).map(|(v, r)| v * v + r).sum();
            let widest = f.rho.iter().copied().fold(0.0, f64::max);
            *params.var_mut(block) = (sq / f.len() as f64).max(widest).max(VARIANCE_FLOOR);
        }
    }

    let groups = CoordGroups::PI_MU;
    let z0 = pack(gamma, &params, groups);
    let mut work = params.clone();
    let mut scratch_gamma = gamma.clone();
    let mut hits = 0;
    let out = maximize(
        |z, g| {
            unpack(z, &mut scratch_gamma, &mut work, groups);
            let ev = evaluate(x, gamma, &work, true);
            hits += ev.guard_hits;
            let grad = chain(ev.gradient.as_ref().expect("requested"), gamma, &work, groups);
            g.copy_from_slice(&grad);
            ev.elbo
        },
        z0,
        &cfg.lbfgs(),
    );
    let mut g = gamma.clone();
    unpack(&out.x, &mut g, &mut params, groups);
    StepOutcome {
        value: params,
        elbo: out.value,
        converged: !out.line_search_failed,
        guard_hits: hits,
    }
}

/// Resumable VEM run.
#[derive(Debug, Clone)]
pub(crate) struct VemRun {
    pub(crate) params: ModelParams,
    pub(crate) gamma: VariationalState,
    pub(crate) trace: Vec<f64>,
    pub(crate) iters: usize,
    pub(crate) converged: bool,
    pub(crate) guard_hits: u64,
    pub(crate) inner_failures: usize,
}

impl VemRun {
    pub(crate) fn new(x: &ObservedMatrix, params: ModelParams, gamma: VariationalState) -> Self {
        let ev = evaluate(x, &gamma, &params, false);
        Self {
            params,
            gamma,
            trace: vec![ev.elbo],
            iters: 0,
            converged: false,
            guard_hits: ev.guard_hits,
            inner_failures: 0,
        }
    }

    pub(crate) fn elbo(&self) -> f64 {
        *self.trace.last().expect("non-empty trace")
    }

    /// Runs full iterations until convergence or until `iters` reaches `until`.
    pub(crate) fn run(&mut self, x: &ObservedMatrix, cfg: &FitConfig, until: usize) {
        while !self.converged && self.iters < until {
            let before = self.elbo();
            let ve = ve_step_unchecked(x, &self.params, self.gamma.clone(), cfg, true);
            self.gamma = ve.value;
            self.trace.push(ve.elbo);
            self.guard_hits += ve.guard_hits;
            self.inner_failures += (!ve.converged) as usize;

            let m = m_step_unchecked(x, &self.gamma, self.params.clone(), cfg);
            self.params = m.value;
            self.trace.push(m.elbo);
            self.guard_hits += m.guard_hits;
            self.inner_failures += (!m.converged) as usize;

            self.iters += 1;
            let after = self.elbo();
            if ((after - before) / before.abs().max(f64::MIN_POSITIVE)).abs() < cfg.elbo_rel_tol {
                self.converged = true;
            }
        }
    }

    pub(crate) fn finish(self, seed: u64, degenerate: bool) -> FitResult {
        FitResult {
            params: self.params,
            varstate: self.gamma,
            elbo_trace: self.trace,
            converged: self.converged,
            n_iters: self.iters,
            seed,
            degenerate,
            guard_hits: self.guard_hits,
            inner_failures: self.inner_failures,
        }
    }
}

/// Runs VEM from a given starting point.
pub fn fit_from(
    x: &ObservedMatrix,
    params0: ModelParams,
    gamma0: VariationalState,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    params0.validate()?;
    gamma0.validate_against(&params0, x.n_rows(), x.n_cols())?;
    let mut run = VemRun::new(x, params0, gamma0);
    run.run(x, cfg, cfg.max_vem_iters);
    Ok(run.finish(cfg.seed, x.is_all_missing()))
}

fn start_kind(k: usize) -> InitKind {
    match k {
        0 => InitKind::Spectral,
        k if k % 2 == 1 => InitKind::Perturbed(PERTURB_FRACTION),
        _ => InitKind::Random,
    }
}

fn start(
    x: &ObservedMatrix,
    nq: usize,
    nl: usize,
    kind: MissingnessKind,
    seed: u64,
    k: usize,
) -> Result<(ModelParams, VariationalState)> {
    let init = if x.is_all_missing() { InitKind::Random } else { start_kind(k) };
    init_with(x, nq, nl, kind, init, derive_seed(seed, k as u64))
}

/// VEM from the spectral starting point.
pub fn fit(x: &ObservedMatrix, nq: usize, nl: usize, kind: MissingnessKind, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let (p0, g0) = start(x, nq, nl, kind, cfg.seed, 0)?;
    let mut run = VemRun::new(x, p0, g0);
    run.run(x, cfg, cfg.max_vem_iters);
    Ok(run.finish(cfg.seed, x.is_all_missing()))
}

/// Short runs from several starting points, then the best one is continued.
///
/// Start 0 is spectral, odd starts are perturbed spectral partitions and even
/// starts are random partitions. Each runs `warmup_iters` iterations; the
/// candidate with the highest `J` (lowest index on ties) continues.
pub fn multi_start_fit(
    x: &ObservedMatrix,
    nq: usize,
    nl: usize,
    kind: MissingnessKind,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let warm = cfg.warmup_iters.min(cfg.max_vem_iters);
    let candidate = |k: usize| -> Result<VemRun> {
        let (p0, g0) = start(x, nq, nl, kind, cfg.seed, k)?;
        let mut run = VemRun::new(x, p0, g0);
        run.run(x, cfg, warm);
        Ok(run)
    };
    let runs: Vec<Result<VemRun>> = if cfg.deterministic || cfg.n_inits == 1 {
        (0..cfg.n_inits).map(candidate).collect()
    } else {
        (0..cfg.n_inits).into_par_iter().map(candidate).collect()
    };
    let mut runs = runs.into_iter().collect::<Result<Vec<VemRun>>>()?.into_iter();
    // The first start is always carried to convergence alongside the best
    // warm-up candidate, so adding starts never lowers the final bound.
    let mut first = runs.next().expect("n_inits >= 1");
    let mut best: Option<VemRun> = None;
    for run in runs {
        if run.elbo() > first.elbo() && best.as_ref().is_none_or(|b| run.elbo() > b.elbo()) {
            best = Some(run);
        }
    }
    let finish = |run: &mut VemRun| run.run(x, cfg, cfg.max_vem_iters);
    let run = match best {
        None => {
            finish(&mut first);
            first
        }
        Some(mut other) => {
            if cfg.deterministic {
                finish(&mut first);
                finish(&mut other);
            } else {
                rayon::join(|| finish(&mut first), || finish(&mut other));
            }
            if other.elbo() > first.elbo() { other } else { first }
        }
    };
    Ok(run.finish(cfg.seed, x.is_all_missing()))
}
