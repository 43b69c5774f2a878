//! Sampling from the generative model and the benchmark configurations.

mod gibbs;
mod risk;

pub use gibbs::GibbsSettings;
pub use risk::{conditional_bayes_risk, RiskConfig, RiskEstimate, RiskEstimator, RiskInit, RiskMethod};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LbmError, Result};
use crate::metrics::LabelAssignment;
use crate::model::{sigmoid, CompleteSample, LatentBlock, MissingnessKind, ModelParams};
use crate::rng::{self, derive_seed};

/// Parameters of the mask model used by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MnarParams {
    pub mu: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub var_p: f64,
    pub var_q: f64,
}

impl MnarParams {
    /// `mu = 1` and unit variances: about 35% missing cells.
    pub fn benchmark() -> Self {
        Self {
            mu: 1.0,
            var_a: 1.0,
            var_b: 1.0,
            var_p: 1.0,
            var_q: 1.0,
        }
    }

    /// Benchmark mask with the value effects set to `var_bq`.
    pub fn with_value_effects(var_bq: f64) -> Self {
        Self {
            var_b: var_bq,
            var_q: var_bq,
            ..Self::benchmark()
        }
    }

    /// Smallest kind able to represent these variances.
    pub fn kind(&self) -> MissingnessKind {
        if self.var_b > 0.0 || self.var_q > 0.0 {
            MissingnessKind::Mnar
        } else if self.var_a > 0.0 || self.var_p > 0.0 {
            MissingnessKind::Mar
        } else {
            MissingnessKind::Mcar
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub epsilon: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub mnar_params: MnarParams,
}

impl BenchmarkConfig {
    pub fn params(&self) -> Result<ModelParams> {
        make_benchmark_params(self.epsilon, &self.mnar_params)
    }

    pub fn sample(&self, seed: u64) -> Result<CompleteSample> {
        sample_lbm(&self.params()?, self.n_rows, self.n_cols, seed)
    }
}

/// Three row and three column classes of equal size with block
/// probabilities
///
/// ```text
/// eps    eps    1-eps
/// eps    1-eps  1-eps
/// 1-eps  1-eps  eps
/// ```
///
/// The kind is the smallest one allowing the given variances.
pub fn make_benchmark_params(epsilon: f64, mnar: &MnarParams) -> Result<ModelParams> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(LbmError::Domain(format!("epsilon = {epsilon} outside (0, 0.5)")));
    }
    let (e, f) = (epsilon, 1.0 - epsilon);
    ModelParams::new(
        mnar.kind(),
        vec![1.0 / 3.0; 3],
        vec![1.0 / 3.0; 3],
        vec![vec![e, e, f], vec![e, f, f], vec![f, f, e]],
        mnar.mu,
        mnar.var_a,
        mnar.var_b,
        mnar.var_p,
        mnar.var_q,
    )
}

fn draw_category(u: f64, probs: &[f64]) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Draws a complete sample.
///
/// The draw order is fixed: row labels, column labels, the four latent
/// vectors (always drawn, scaled by the standard deviation), then two uniforms
/// per cell in row-major order, one for the value and one for the mask. Two
/// parameter sets sharing a seed therefore share all random numbers.
pub fn sample_lbm(params: &ModelParams, n_rows: usize, n_cols: usize, seed: u64) -> Result<CompleteSample> {
    params.validate()?;
    if n_rows == 0 || n_cols == 0 {
        return Err(LbmError::Domain("sample dimensions must be positive".into()));
    }
    let mut r = rng::seeded(seed);
    let row_labels: Vec<usize> = (0..n_rows).map(|_| draw_category(r.random(), &params.alpha_rows)).collect();
    let col_labels: Vec<usize> = (0..n_cols).map(|_| draw_category(r.random(), &params.alpha_cols)).collect();
    let mut latent = |block: LatentBlock, n: usize| -> Vec<f64> {
        let sd = if block.allowed_by(params.kind) { params.var(block).sqrt() } else { 0.0 };
        (0..n).map(|_| sd * r.sample::<f64, _>(StandardNormal)).collect()
    };
    let a = latent(LatentBlock::A, n_rows);
    let b = latent(LatentBlock::B, n_rows);
    let p = latent(LatentBlock::P, n_cols);
    let q = latent(LatentBlock::Q, n_cols);

    let mut x_complete = Vec::with_capacity(n_rows * n_cols);
    let mut mask = Vec::with_capacity(n_rows * n_cols);
    for i in 0..n_rows {
        for j in 0..n_cols {
            let pi = params.pi[row_labels[i]][col_labels[j]];
            let value = (r.random::<f64>() < pi) as u8;
            let shift = if value == 1 { b[i] + q[j] } else { -b[i] - q[j] };
            let observed = r.random::<f64>() < sigmoid(params.mu + a[i] + p[j] + shift);
            x_complete.push(value);
            mask.push(observed as u8);
        }
    }
    let mut sample = CompleteSample {
        row_labels,
        col_labels,
        a,
        b,
        p,
        q,
        x_complete,
        mask,
        x_observed: None,
    };
    sample.x_observed = Some(sample.observed());
    Ok(sample)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Number of simulated matrices per probe; the median risk is used.
    pub n_seeds: usize,
    pub tol: f64,
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub max_bisections: usize,
    pub risk: RiskConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_seeds: 5,
            tol: 0.005,
            eps_lo: 0.01,
            eps_hi: 0.49,
            max_bisections: 30,
            risk: RiskConfig::default(),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median conditional Bayes risk over `cfg.n_seeds` matrices simulated at
/// `epsilon`. The E-step starts from the true labels.
pub fn median_risk(epsilon: f64, n_rows: usize, n_cols: usize, mnar: &MnarParams, seed: u64, cfg: &CalibrationConfig) -> Result<f64> {
    let params = make_benchmark_params(epsilon, mnar)?;
    let risks = (0..cfg.n_seeds)
        .map(|k| {
            let sample = sample_lbm(&params, n_rows, n_cols, derive_seed(seed, k as u64))?;
            let risk_cfg = RiskConfig {
                init: RiskInit::Labels(LabelAssignment::from_sample(&sample)),
                ..cfg.risk.clone()
            };
            Ok(conditional_bayes_risk(&sample.observed(), &params, &risk_cfg)?.risk)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(median(risks))
}

/// Bisection on `epsilon` until the median estimated risk is within `tol` of
/// `target_risk`. The risk grows with `epsilon`; common random numbers keep
/// the probes comparable.
pub fn calibrate_epsilon(
    target_risk: f64,
    n_rows: usize,
    n_cols: usize,
    mnar: &MnarParams,
    seed: u64,
    cfg: &CalibrationConfig,
) -> Result<f64> {
    if cfg.n_seeds == 0 || !(cfg.tol > 0.0) || !(0.0 < cfg.eps_lo && cfg.eps_lo < cfg.eps_hi && cfg.eps_hi < 0.5) {
        return Err(LbmError::Domain("invalid calibration settings".into()));
    }
    let risk_at = |eps: f64| median_risk(eps, n_rows, n_cols, mnar, seed, cfg);
    let (mut lo, mut hi) = (cfg.eps_lo, cfg.eps_hi);
    let (r_lo, r_hi) = (risk_at(lo)?, risk_at(hi)?);
    let unreachable = || LbmError::Calibration {
        target: target_risk,
        lo: cfg.eps_lo,
        hi: cfg.eps_hi,
        risk_lo: r_lo,
        risk_hi: r_hi,
    };
    if !(target_risk > 0.0 && target_risk < 8.0 / 9.0) {
        return Err(unreachable());
    }
    if (r_lo - target_risk).abs() <= cfg.tol {
        return Ok(lo);
    }
    if (r_hi - target_risk).abs() <= cfg.tol {
        return Ok(hi);
    }
    if r_lo > target_risk || r_hi < target_risk {
        return Err(unreachable());
    }
    for _ in 0..cfg.max_bisections {
        let mid = 0.5 * (lo + hi);
        let r = risk_at(mid)?;
        if (r - target_risk).abs() <= cfg.tol {
            return Ok(mid);
        }
        if r < target_risk {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(unreachable())
}
