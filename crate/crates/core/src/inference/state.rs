use serde::{Deserialize, Serialize};

use crate::error::{LbmError, Result};
use crate::model::{LatentBlock, ModelParams};

/// Row-stochastic matrix of class memberships, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl Membership {
    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            data: vec![1.0 / k as f64; n * k],
        }
    }

    /// Memberships concentrated on `labels`: `weight` on the label and the
    /// remainder spread evenly over the other classes.
    pub fn from_labels(labels: &[usize], k: usize, weight: f64) -> Self {
        let mut m = Self::uniform(labels.len(), k);
        if k == 1 {
            return m;
        }
        let rest = (1.0 - weight) / (k - 1) as f64;
        for (i, &c) in labels.iter().enumerate() {
            let row = m.row_mut(i);
            row.fill(rest);
            row[c] = weight;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if n == 0 || k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(LbmError::Contract("membership rows must be non-empty and equal length".into()));
        }
        let m = Self {
            n,
            k,
            data: rows.concat(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, q: usize) -> f64 {
        self.data[i * self.k + q]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.k).map(<[f64]>::to_vec).collect()
    }

    /// Expected class sizes `sum_i tau_iq`.
    pub fn class_totals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for row in self.data.chunks(self.k) {
            for (o, t) in out.iter_mut().zip(row) {
                *o += t;
            }
        }
        out
    }

    /// Argmax per row; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.data
            .chunks(self.k)
            .map(|row| {
                let mut best = 0;
                for (q, &t) in row.iter().enumerate() {
                    if t > row[best] {
                        best = q;
                    }
                }
                best
            })
            .collect()
    }

    /// Sets row `i` to `softmax(scores)`.
    pub(crate) fn set_softmax(&mut self, i: usize, scores: &[f64]) {
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = self.row_mut(i);
        let mut s = 0.0;
        for (t, &z) in row.iter_mut().zip(scores) {
            *t = (z - m).exp();
            s += *t;
        }
        for t in row.iter_mut() {
            *t /= s;
        }
    }

    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for (new, &old) in perm.iter().enumerate() {
                out.data[i * self.k + new] = self.get(i, old);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.data.chunks(self.k).enumerate() {
            if row.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(LbmError::Domain(format!("membership row {i} has invalid entries")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(LbmError::Domain(format!("membership row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// Gaussian posterior factors `N(nu_k, rho_k)` for one latent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFactor {
    pub nu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl GaussianFactor {
    pub fn new(nu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if nu.len() != rho.len() {
            return Err(LbmError::Contract("nu and rho lengths differ".into()));
        }
        if rho.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(LbmError::Domain("posterior variances must be positive".into()));
        }
        Ok(Self { nu, rho })
    }

    pub fn centered(n: usize, rho: f64) -> Self {
        Self {
            nu: vec![0.0; n],
            rho: vec![rho; n],
        }
    }

    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }
}

/// Mean-field posterior over labels and latent effects.
///
/// Latent blocks absent from the model (disallowed by the kind, or pinned at
/// zero by a zero prior variance) are `None` and contribute nothing to the
/// criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub tau_rows: Membership,
    pub tau_cols: Membership,
    pub a: Option<GaussianFactor>,
    pub b: Option<GaussianFactor>,
    pub p: Option<GaussianFactor>,
    pub q: Option<GaussianFactor>,
}

impl VariationalState {
    /// Memberships as given and every active latent block centered at zero
    /// with posterior variance equal to its prior variance.
    pub fn with_prior_latents(tau_rows: Membership, tau_cols: Membership, params: &ModelParams) -> Self {
        let (n1, n2) = (tau_rows.n(), tau_cols.n());
        let mut state = Self {
            tau_rows,
            tau_cols,
            a: None,
            b: None,
            p: None,
            q: None,
        };
        for block in LatentBlock::ALL {
            if params.block_active(block) {
                let n = if block.is_row() { n1 } else { n2 };
                *state.latent_mut(block) = Some(GaussianFactor::centered(n, params.var(block)));
            }
        }
        state
    }

    pub fn n_rows(&self) -> usize {
        self.tau_rows.n()
    }

    pub fn n_cols(&self) -> usize {
        self.tau_cols.n()
    }

    pub fn latent(&self, block: LatentBlock) -> Option<&GaussianFactor> {
        match block {
            LatentBlock::A => self.a.as_ref(),
            LatentBlock::B => self.b.as_ref(),
            LatentBlock::P => self.p.as_ref(),
            LatentBlock::Q => self.q.as_ref(),
        }
    }

    pub fn latent_mut(&mut self, block: LatentBlock) -> &mut Option<GaussianFactor> {
        match block {
            LatentBlock::A => &mut self.a,
            LatentBlock::B => &mut self.b,
            LatentBlock::P => &mut self.p,
            LatentBlock::Q => &mut self.q,
        }
    }

    /// Posterior means of a latent block, zeros when the block is absent.
    pub fn latent_means(&self, block: LatentBlock) -> Vec<f64> {
        let n = if block.is_row() { self.n_rows() } else { self.n_cols() };
        self.latent(block).map_or_else(|| vec![0.0; n], |f| f.nu.clone())
    }

    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.tau_rows = self.tau_rows.permute_classes(row_perm);
        out.tau_cols = self.tau_cols.permute_classes(col_perm);
        out
    }

    /// Checks shapes against `params` and the presence of latent blocks.
    pub fn validate_against(&self, params: &ModelParams, n1: usize, n2: usize) -> Result<()> {
        if self.n_rows() != n1 || self.n_cols() != n2 {
            return Err(LbmError::Contract(format!(
                "variational state is {}x{} but the matrix is {n1}x{n2}",
                self.n_rows(),
                self.n_cols()
            )));
        }
        if self.tau_rows.k() != params.nq() || self.tau_cols.k() != params.nl() {
            return Err(LbmError::Contract(format!(
                "memberships have {}x{} classes but params have {}x{}",
                self.tau_rows.k(),
                self.tau_cols.k(),
                params.nq(),
                params.nl()
            )));
        }
        self.tau_rows.validate()?;
        self.tau_cols.validate()?;
        for block in LatentBlock::ALL {
            let expected = if block.is_row() { n1 } else { n2 };
            match (self.latent(block), params.block_active(block)) {
                (Some(f), true) => {
                    if f.len() != expected {
                        return Err(LbmError::Contract(format!(
                            "latent block {} has length {}, expected {expected}",
                            block.name(),
                            f.len()
                        )));
                    }
                    if f.rho.iter().any(|r| !(r.is_finite() && *r > 0.0))
                        || f.nu.iter().any(|v| !v.is_finite())
                    {
                        return Err(LbmError::Domain(format!(
                            "latent block {} has invalid moments",
                            block.name()
                        )));
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(LbmError::Contract(format!(
                        "latent block {} is present but absent from the model",
                        block.name()
                    )))
                }
                (None, true) => {
                    return Err(LbmError::Contract(format!(
                        "latent block {} is missing from the variational state",
                        block.name()
                    )))
                }
            }
        }
        Ok(())
    }
}
