//! Gibbs sampler over labels and latent effects with the parameters fixed.
//!
//! Labels are drawn from their exact full conditionals; each latent effect is
//! updated by a Gaussian random-walk Metropolis step whose scale is tuned
//! during burn-in. Label marginals are Rao-Blackwellized: the conditional
//! class probabilities are averaged rather than the draws.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::inference::Membership;
use crate::model::{log_sigmoid, sigmoid, Cell, ModelParams, ObservedMatrix};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsSettings {
    /// Sweeps kept after burn-in.
    pub sweeps: usize,
    pub burn_in: usize,
}

impl Default for GibbsSettings {
    fn default() -> Self {
        Self {
            sweeps: 1000,
            burn_in: 200,
        }
    }
}

const TARGET_ACCEPTANCE: f64 = 0.44;
const ADAPT_EVERY: usize = 25;

/// Latent parts of one cell that do not depend on the labels.
#[derive(Clone, Copy)]
struct CellTerms {
    log_up: f64,
    log_down: f64,
    miss_up: f64,
    miss_down: f64,
}

impl CellTerms {
    fn new(mu: f64, a: f64, b: f64, p: f64, q: f64) -> Self {
        let up = mu + a + b + p + q;
        let down = mu + a - b + p - q;
        Self {
            log_up: log_sigmoid(up),
            log_down: log_sigmoid(down),
            miss_up: sigmoid(-up),
            miss_down: sigmoid(-down),
        }
    }

    fn log_prob(&self, cell: Cell, pi: f64, log_pi: f64, log_1m_pi: f64) -> f64 {
        match cell {
            Cell::One => log_pi + self.log_up,
            Cell::Zero => log_1m_pi + self.log_down,
            Cell::Missing => (pi * self.miss_up + (1.0 - pi) * self.miss_down).max(f64::MIN_POSITIVE).ln(),
        }
    }
}

struct Chain<'a> {
    x: &'a ObservedMatrix,
    params: &'a ModelParams,
    log_pi: Vec<Vec<f64>>,
    log_1m_pi: Vec<Vec<f64>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// a, b, p, q; `None` for pinned blocks.
    latents: [Option<Vec<f64>>; 4],
    steps: [f64; 4],
    accepted: [usize; 4],
    proposed: [usize; 4],
}

impl<'a> Chain<'a> {
    fn value(&self, block: usize, k: usize) -> f64 {
        self.latents[block].as_ref().map_or(0.0, |v| v[k])
    }

    fn terms(&self, i: usize, j: usize, overrides: Option<(usize, f64)>) -> CellTerms {
        let mut v = [self.value(0, i), self.value(1, i), self.value(2, j), self.value(3, j)];
        if let Some((b, z)) = overrides {
            v[b] = z;
        }
        CellTerms::new(self.params.mu, v[0], v[1], v[2], v[3])
    }

    fn cell(&self, i: usize, j: usize, q: usize, l: usize, t: &CellTerms) -> f64 {
        t.log_prob(self.x.get(i, j), self.params.pi[q][l], self.log_pi[q][l], self.log_1m_pi[q][l])
    }

    /// Log-likelihood of row `i` (or column `i`) with one latent value replaced.
    fn line_loglik(&self, is_row: bool, i: usize, overrides: Option<(usize, f64)>) -> f64 {
        if is_row {
            (0..self.x.n_cols())
                .map(|j| {
                    let t = self.terms(i, j, overrides);
                    self.cell(i, j, self.rows[i], self.cols[j], &t)
                })
                .sum()
        } else {
            (0..self.x.n_rows())
                .map(|r| {
                    let t = self.terms(r, i, overrides);
                    self.cell(r, i, self.rows[r], self.cols[i], &t)
                })
                .sum()
        }
    }

    fn update_labels(&mut self, is_row: bool, rng: &mut Rng, acc: Option<&mut [f64]>) {
        let (n, m, k) = if is_row {
            (self.x.n_rows(), self.x.n_cols(), self.params.nq())
        } else {
            (self.x.n_cols(), self.x.n_rows(), self.params.nl())
        };
        let alpha = if is_row { &self.params.alpha_rows } else { &self.params.alpha_cols };
        let mut scores = vec![0.0; k];
        let mut probs = vec![0.0; k];
        let mut acc = acc;
        for i in 0..n {
            for (c, s) in scores.iter_mut().enumerate() {
                *s = alpha[c].ln();
            }
            for j in 0..m {
                let (r, col) = if is_row { (i, j) } else { (j, i) };
                let t = self.terms(r, col, None);
                for (c, s) in scores.iter_mut().enumerate() {
                    let (q, l) = if is_row { (c, self.cols[col]) } else { (self.rows[r], c) };
                    *s += self.cell(r, col, q, l, &t);
                }
            }
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, s) in probs.iter_mut().zip(&scores) {
                *p = (s - mx).exp();
                z += *p;
            }
            probs.iter_mut().for_each(|p| *p /= z);
            if let Some(acc) = acc.as_deref_mut() {
                for (a, p) in acc[i * k..(i + 1) * k].iter_mut().zip(&probs) {
                    *a += p;
                }
            }
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut pick = k - 1;
            for (c, p) in probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    pick = c;
                    break;
                }
            }
            if is_row {
                self.rows[i] = pick;
            } else {
                self.cols[i] = pick;
            }
        }
    }

    fn update_latents(&mut self, rng: &mut Rng) {
        let vars = [self.params.var_a, self.params.var_b, self.params.var_p, self.params.var_q];
        for (is_row, blocks) in [(true, [0, 1]), (false, [2, 3])] {
            if blocks.iter().all(|&b| self.latents[b].is_none()) {
                continue;
            }
            let n = if is_row { self.x.n_rows() } else { self.x.n_cols() };
            for i in 0..n {
                let mut l_cur = self.line_loglik(is_row, i, None);
                for block in blocks {
                    if self.latents[block].is_none() {
                        continue;
                    }
                    let cur = self.value(block, i);
                    let z: f64 = rng.sample(StandardNormal);
                    let prop = cur + self.steps[block] * z;
                    let l_prop = self.line_loglik(is_row, i, Some((block, prop)));
                    let log_ratio = l_prop - l_cur - (prop * prop - cur * cur) / (2.0 * vars[block]);
                    self.proposed[block] += 1;
                    let u: f64 = rng.random();
                    if u.ln() < log_ratio {
                        self.latents[block].as_mut().expect("active block")[i] = prop;
                        self.accepted[block] += 1;
                        l_cur = l_prop;
                    }
                }
            }
        }
    }

    fn adapt(&mut self) {
        for b in 0..4 {
            if self.proposed[b] > 0 {
                let rate = self.accepted[b] as f64 / self.proposed[b] as f64;
                self.steps[b] *= if rate > TARGET_ACCEPTANCE { 1.25 } else { 0.8 };
            }
            self.accepted[b] = 0;
            self.proposed[b] = 0;
        }
    }
}

/// Posterior label marginals estimated by Gibbs sampling from the given
/// starting labels, with latent effects started at zero.
pub(crate) fn gibbs_marginals(
    x: &ObservedMatrix,
    params: &ModelParams,
    rows: Vec<usize>,
    cols: Vec<usize>,
    settings: &GibbsSettings,
    rng: &mut Rng,
) -> (Membership, Membership) {
    let (n1, n2) = (x.n_rows(), x.n_cols());
    let vars = [params.var_a, params.var_b, params.var_p, params.var_q];
    let latents: [Option<Vec<f64>>; 4] = std::array::from_fn(|b| {
        let block = crate::model::LatentBlock::ALL[b];
        params.block_active(block).then(|| vec![0.0; if b < 2 { n1 } else { n2 }])
    });
    let mut chain = Chain {
        x,
        params,
        log_pi: params.pi.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect(),
        log_1m_pi: params.pi.iter().map(|r| r.iter().map(|p| (1.0 - p).ln()).collect()).collect(),
        rows,
        cols,
        latents,
        steps: vars.map(|v| 0.5 * v.sqrt()),
        accepted: [0; 4],
        proposed: [0; 4],
    };
    let (nq, nl) = (params.nq(), params.nl());
    let mut row_acc = vec![0.0; n1 * nq];
    let mut col_acc = vec![0.0; n2 * nl];
    for sweep in 0..settings.burn_in + settings.sweeps {
        let keep = sweep >= settings.burn_in;
        chain.update_labels(true, rng, keep.then_some(row_acc.as_mut_slice()));
        chain.update_labels(false, rng, keep.then_some(col_acc.as_mut_slice()));
        chain.update_latents(rng);
        if !keep && (sweep + 1) % ADAPT_EVERY == 0 {
            chain.adapt();
        }
    }
    let to_membership = |acc: Vec<f64>, k: usize| {
        let kept = settings.sweeps.max(1) as f64;
        let rows: Vec<Vec<f64>> = acc.chunks(k).map(|c| c.iter().map(|v| v / kept).collect()).collect();
        Membership::from_rows(&rows).expect("averaged probabilities form a simplex")
    };
    (to_membership(row_acc, nq), to_membership(col_acc, nl))
}
