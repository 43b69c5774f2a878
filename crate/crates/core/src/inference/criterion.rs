//! The variational lower bound `J(gamma, theta)` and its gradient.
//!
//! Observed cells split into a label part, `log pi` or `log(1 - pi)`, and a
//! propensity part that does not depend on the block. The label part reduces
//! to `S1 = tau1' X1 tau2` style contractions. Missing cells need the full
//! per-block expectation.

use std::f64::consts::{E, PI};

use crate::error::Result;
use crate::model::{Cell, LatentBlock, ModelParams, ObservedMatrix};

use super::delta::{missing_term, missing_value, observed_one, observed_zero, CellLogistics};
use super::state::{Membership, VariationalState};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Entropy of the variational distribution.
pub fn entropy(gamma: &VariationalState) -> f64 {
    let mut h = membership_entropy(&gamma.tau_rows) + membership_entropy(&gamma.tau_cols);
    for block in LatentBlock::ALL {
        if let Some(f) = gamma.latent(block) {
            h += f.rho.iter().map(|r| 0.5 * (2.0 * PI * E * r).ln()).sum::<f64>();
        }
    }
    h
}

fn membership_entropy(m: &Membership) -> f64 {
    -m.as_slice()
        .iter()
        .filter(|t| **t > 0.0)
        .map(|t| t * t.ln())
        .sum::<f64>()
}

/// Per-block latent moments at one cell.
#[derive(Clone, Copy)]
struct CellMoments {
    mx: f64,
    vx: f64,
    my: f64,
    vy: f64,
}

/// Read-only view of the latent moments, with zeros for absent blocks.
struct LatentView<'a> {
    blocks: [Option<(&'a [f64], &'a [f64])>; 4],
}

impl<'a> LatentView<'a> {
    fn new(gamma: &'a VariationalState) -> Self {
        let get = |b| gamma.latent(b).map(|f| (f.nu.as_slice(), f.rho.as_slice()));
        Self {
            blocks: [
                get(LatentBlock::A),
                get(LatentBlock::B),
                get(LatentBlock::P),
                get(LatentBlock::Q),
            ],
        }
    }

    #[inline]
    fn moment(&self, block: LatentBlock, k: usize) -> (f64, f64) {
        self.blocks[block.index()].map_or((0.0, 0.0), |(nu, rho)| (nu[k], rho[k]))
    }

    #[inline]
    fn row(&self, i: usize) -> (f64, f64, f64, f64) {
        let (ma, va) = self.moment(LatentBlock::A, i);
        let (mb, vb) = self.moment(LatentBlock::B, i);
        (ma, va, mb, vb)
    }

    #[inline]
    fn col(&self, j: usize) -> (f64, f64, f64, f64) {
        let (mp, vp) = self.moment(LatentBlock::P, j);
        let (mq, vq) = self.moment(LatentBlock::Q, j);
        (mp, vp, mq, vq)
    }
}

/// Partial derivatives of `J` in natural coordinates. Membership gradients
/// include the entropy and prior terms; latent entries are `None` for absent
/// blocks.
#[derive(Debug, Clone)]
pub struct RawGradient {
    pub tau_rows: Vec<f64>,
    pub tau_cols: Vec<f64>,
    pub nu: [Option<Vec<f64>>; 4],
    pub rho: [Option<Vec<f64>>; 4],
    pub alpha_rows: Vec<f64>,
    pub alpha_cols: Vec<f64>,
    /// Row-major `nq x nl`.
    pub pi: Vec<f64>,
    pub mu: f64,
    /// Derivative with respect to each prior variance, zero when absent.
    pub var: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub elbo: f64,
    /// Number of missing-cell terms whose probability hit the log guard.
    pub guard_hits: u64,
    pub gradient: Option<RawGradient>,
}

/// `J(gamma, theta)`.
pub fn elbo(x: &ObservedMatrix, gamma: &VariationalState, params: &ModelParams) -> Result<f64> {
    gamma.validate_against(params, x.n_rows(), x.n_cols())?;
    Ok(evaluate(x, gamma, params, false).elbo)
}

/// Evaluates `J` and optionally its full gradient. Inputs are assumed valid.
pub fn evaluate(x: &ObservedMatrix, gamma: &VariationalState, params: &ModelParams, with_gradient: bool) -> Evaluation {
    let (n1, n2) = (x.n_rows(), x.n_cols());
    let (nq, nl) = (params.nq(), params.nl());
    let t1 = &gamma.tau_rows;
    let t2 = &gamma.tau_cols;
    let view = LatentView::new(gamma);
    let log_pi: Vec<f64> = params.pi.iter().flatten().map(|p| p.ln()).collect();
    let log_1m_pi: Vec<f64> = params.pi.iter().flatten().map(|p| (1.0 - p).ln()).collect();
    let pi_flat: Vec<f64> = params.pi.iter().flatten().copied().collect();

    let mut j_total = 0.0;
    let mut guard_hits = 0u64;

    // X1 tau2, X0 tau2 (n1 x nl) and X1' tau1, X0' tau1 (n2 x nq).
    let mut c1 = vec![0.0; n1 * nl];
    let mut c0 = vec![0.0; n1 * nl];
    let mut r1 = vec![0.0; n2 * nq];
    let mut r0 = vec![0.0; n2 * nq];

    // missing-cell contributions to the membership gradients
    let mut g1_na = vec![0.0; n1 * nq];
    let mut g2_na = vec![0.0; n2 * nl];
    let mut gpi_na = vec![0.0; nq * nl];
    // per-row / per-column derivative sums with respect to (mx, my, vx, vy)
    let mut row_d = vec![[0.0f64; 4]; if with_gradient { n1 } else { 0 }];
    let mut col_d = vec![[0.0f64; 4]; if with_gradient { n2 } else { 0 }];
    let mut mu_grad = 0.0;

    let mut tmp_col = vec![0.0; nl];
    for i in 0..n1 {
        let (ma, va, mb, vb) = view.row(i);
        let tr = t1.row(i);
        let row = x.row(i);
        for j in 0..n2 {
            let cell = row[j];
            let (mp, vp, mq, vq) = view.col(j);
            let m = CellMoments {
                mx: ma + mp,
                vx: va + vp,
                my: mb + mq,
                vy: vb + vq,
            };
            let lg = CellLogistics::new(params.mu, m.mx, m.my);
            let tc = t2.row(j);
            let d = match cell {
                Cell::One | Cell::Zero => {
                    let (term, c_acc, r_acc) = if cell == Cell::One {
                        (observed_one(&lg, m.vx + m.vy), &mut c1, &mut r1)
                    } else {
                        (observed_zero(&lg, m.vx + m.vy), &mut c0, &mut r0)
                    };
                    j_total += term.value;
                    for (acc, t) in c_acc[i * nl..(i + 1) * nl].iter_mut().zip(tc) {
                        *acc += t;
                    }
                    for (acc, t) in r_acc[j * nq..(j + 1) * nq].iter_mut().zip(tr) {
                        *acc += t;
                    }
                    [term.dx, term.dy, term.dv, term.dv]
                }
                Cell::Missing => {
                    if with_gradient {
                        let mut d = [0.0; 4];
                        tmp_col.fill(0.0);
                        for q in 0..nq {
                            let tq = tr[q];
                            let mut gq = 0.0;
                            for l in 0..nl {
                                let w = tq * tc[l];
                                let t = missing_term(&lg, pi_flat[q * nl + l], m.vx, m.vy);
                                guard_hits += t.guarded as u64;
                                j_total += w * t.value;
                                gq += tc[l] * t.value;
                                tmp_col[l] += tq * t.value;
                                gpi_na[q * nl + l] += w * t.dpi;
                                d[0] += w * t.dx;
                                d[1] += w * t.dy;
                                d[2] += w * t.dvx;
                                d[3] += w * t.dvy;
                            }
                            g1_na[i * nq + q] += gq;
                        }
                        for (acc, t) in g2_na[j * nl..(j + 1) * nl].iter_mut().zip(&tmp_col) {
                            *acc += t;
                        }
                        d
                    } else {
                        for q in 0..nq {
                            let tq = tr[q];
                            for l in 0..nl {
                                let (v, hit) = missing_value(&lg, pi_flat[q * nl + l], m.vx, m.vy);
                                guard_hits += hit as u64;
                                j_total += tq * tc[l] * v;
                            }
                        }
                        [0.0; 4]
                    }
                }
            };
            if with_gradient {
                for k in 0..4 {
                    row_d[i][k] += d[k];
                    col_d[j][k] += d[k];
                }
                mu_grad += d[0];
            }
        }
    }

    // label part of observed cells: sum_ql S1 log pi + S0 log(1 - pi)
    let mut s1 = vec![0.0; nq * nl];
    let mut s0 = vec![0.0; nq * nl];
    for i in 0..n1 {
        let tr = t1.row(i);
        for q in 0..nq {
            for l in 0..nl {
                s1[q * nl + l] += tr[q] * c1[i * nl + l];
                s0[q * nl + l] += tr[q] * c0[i * nl + l];
            }
        }
    }
    for k in 0..nq * nl {
        j_total += s1[k] * log_pi[k] + s0[k] * log_1m_pi[k];
    }

    // memberships: prior and entropy
    let log_a1: Vec<f64> = params.alpha_rows.iter().map(|a| a.ln()).collect();
    let log_a2: Vec<f64> = params.alpha_cols.iter().map(|a| a.ln()).collect();
    j_total += membership_prior(t1, &log_a1) + membership_entropy(t1);
    j_total += membership_prior(t2, &log_a2) + membership_entropy(t2);

    // Gaussian priors and entropies
    for block in LatentBlock::ALL {
        if let Some(f) = gamma.latent(block) {
            let s2 = params.var(block);
            let n = f.len() as f64;
            let sq: f64 = f.nu.iter().zip(&f.rho).map(|(v, r)| v * v + r).sum();
            j_total += -0.5 * n * (LN_2PI + s2.ln()) - sq / (2.0 * s2);
            j_total += f.rho.iter().map(|r| 0.5 * (2.0 * PI * E * r).ln()).sum::<f64>();
        }
    }

    let gradient = with_gradient.then(|| {
        let mut tau_rows = g1_na;
        for i in 0..n1 {
            for q in 0..nq {
                let mut g = log_a1[q] - t1.get(i, q).max(f64::MIN_POSITIVE).ln() - 1.0;
                for l in 0..nl {
                    g += c1[i * nl + l] * log_pi[q * nl + l] + c0[i * nl + l] * log_1m_pi[q * nl + l];
                }
                tau_rows[i * nq + q] += g;
            }
        }
        let mut tau_cols = g2_na;
        for j in 0..n2 {
            for l in 0..nl {
                let mut g = log_a2[l] - t2.get(j, l).max(f64::MIN_POSITIVE).ln() - 1.0;
                for q in 0..nq {
                    g += r1[j * nq + q] * log_pi[q * nl + l] + r0[j * nq + q] * log_1m_pi[q * nl + l];
                }
                tau_cols[j * nl + l] += g;
            }
        }
        let totals1 = t1.class_totals();
        let totals2 = t2.class_totals();
        let alpha_rows = totals1.iter().zip(&params.alpha_rows).map(|(n, a)| n / a).collect();
        let alpha_cols = totals2.iter().zip(&params.alpha_cols).map(|(n, a)| n / a).collect();
        let pi = (0..nq * nl)
            .map(|k| s1[k] / pi_flat[k] - s0[k] / (1.0 - pi_flat[k]) + gpi_na[k])
            .collect();

        let mut nu: [Option<Vec<f64>>; 4] = Default::default();
        let mut rho: [Option<Vec<f64>>; 4] = Default::default();
        let mut var = [0.0; 4];
        for block in LatentBlock::ALL {
            let Some(f) = gamma.latent(block) else { continue };
            let s2 = params.var(block);
            let src = if block.is_row() { &row_d } else { &col_d };
            let (mean_k, var_k) = if block.is_value_effect() { (1, 3) } else { (0, 2) };
            let g_nu = f.nu.iter().enumerate().map(|(k, v)| src[k][mean_k] - v / s2).collect();
            let g_rho = f
                .rho
                .iter()
                .enumerate()
                .map(|(k, r)| src[k][var_k] - 0.5 / s2 + 0.5 / r)
                .collect();
            nu[block.index()] = Some(g_nu);
            rho[block.index()] = Some(g_rho);
            let n = f.len() as f64;
            let sq: f64 = f.nu.iter().zip(&f.rho).map(|(v, r)| v * v + r).sum();
            var[block.index()] = -0.5 * n / s2 + sq / (2.0 * s2 * s2);
        }
        RawGradient {
            tau_rows,
            tau_cols,
            nu,
            rho,
            alpha_rows,
            alpha_cols,
            pi,
            mu: mu_grad,
            var,
        }
    });

    Evaluation {
        elbo: j_total,
        guard_hits,
        gradient,
    }
}

fn membership_prior(m: &Membership, log_alpha: &[f64]) -> f64 {
    (0..m.n())
        .map(|i| m.row(i).iter().zip(log_alpha).map(|(t, a)| t * a).sum::<f64>())
        .sum()
}

/// Scores whose softmax maximizes `J` over one side's memberships with
/// everything else fixed: `log alpha_q + sum_j sum_l tau_jl E[log p(x_ij)]`.
/// Returns a row-major `n x k` table.
pub(crate) fn membership_scores(
    x: &ObservedMatrix,
    gamma: &VariationalState,
    params: &ModelParams,
    rows: bool,
) -> (Vec<f64>, u64) {
    let (n1, n2) = (x.n_rows(), x.n_cols());
    let (nq, nl) = (params.nq(), params.nl());
    let view = LatentView::new(gamma);
    let pi_flat: Vec<f64> = params.pi.iter().flatten().copied().collect();
    let log_pi: Vec<f64> = pi_flat.iter().map(|p| p.ln()).collect();
    let log_1m_pi: Vec<f64> = pi_flat.iter().map(|p| (1.0 - p).ln()).collect();
    let (n, k) = if rows { (n1, nq) } else { (n2, nl) };
    let log_alpha: Vec<f64> = if rows { &params.alpha_rows } else { &params.alpha_cols }
        .iter()
        .map(|a| a.ln())
        .collect();
    let mut scores = vec![0.0; n * k];
    let mut guard_hits = 0;
    // other side's memberships summed over observed ones / zeros
    let k_other = if rows { nl } else { nq };
    let mut ones = vec![0.0; n * k_other];
    let mut zeros = vec![0.0; n * k_other];
    let mut buf = vec![0.0; nq * nl];

    for i in 0..n1 {
        let (ma, va, mb, vb) = view.row(i);
        let tr = gamma.tau_rows.row(i);
        for j in 0..n2 {
            let (own, other_t) = if rows { (i, gamma.tau_cols.row(j)) } else { (j, tr) };
            match x.get(i, j) {
                Cell::One => {
                    for (a, t) in ones[own * k_other..(own + 1) * k_other].iter_mut().zip(other_t) {
                        *a += t;
                    }
                }
                Cell::Zero => {
                    for (a, t) in zeros[own * k_other..(own + 1) * k_other].iter_mut().zip(other_t) {
                        *a += t;
                    }
                }
                Cell::Missing => {
                    let (mp, vp, mq, vq) = view.col(j);
                    let lg = CellLogistics::new(params.mu, ma + mp, mb + mq);
                    for (b, &p) in buf.iter_mut().zip(&pi_flat) {
                        let (v, hit) = missing_value(&lg, p, va + vp, vb + vq);
                        guard_hits += hit as u64;
                        *b = v;
                    }
                    let srow = &mut scores[own * k..(own + 1) * k];
                    if rows {
                        let tc = gamma.tau_cols.row(j);
                        for q in 0..nq {
                            srow[q] += (0..nl).map(|l| tc[l] * buf[q * nl + l]).sum::<f64>();
                        }
                    } else {
                        for l in 0..nl {
                            srow[l] += (0..nq).map(|q| tr[q] * buf[q * nl + l]).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    for r in 0..n {
        for c in 0..k {
            let mut s = log_alpha[c];
            for o in 0..k_other {
                let idx = if rows { c * nl + o } else { o * nl + c };
                s += ones[r * k_other + o] * log_pi[idx] + zeros[r * k_other + o] * log_1m_pi[idx];
            }
            scores[r * k + c] += s;
        }
    }
    (scores, guard_hits)
}

/// Groups of coordinates exposed to an optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordGroups {
    pub memberships: bool,
    pub latents: bool,
    pub alpha: bool,
    pub pi_mu: bool,
    pub variances: bool,
}

impl CoordGroups {
    pub const ALL: Self = Self {
        memberships: true,
        latents: true,
        alpha: true,
        pi_mu: true,
        variances: true,
    };
    pub const LATENTS: Self = Self {
        memberships: false,
        latents: true,
        alpha: false,
        pi_mu: false,
        variances: false,
    };
    pub const PI_MU: Self = Self {
        memberships: false,
        latents: false,
        alpha: false,
        pi_mu: true,
        variances: false,
    };
}

/// Largest logit magnitude reachable for a block probability.
fn pi_logit_bound() -> f64 {
    crate::model::logit(1.0 - crate::model::PI_EPS)
}

/// Unconstrained coordinates: memberships and proportions as softmax logits
/// with the first logit fixed at zero, `pi` as logits, posterior and prior
/// variances as logs.
///
/// A posterior variance `rho` is capped at the prior variance of its block
/// when unpacked. The second-order expansion of a missing cell can be convex
/// in the latent variances, and without the cap `J` then grows without bound
/// as `rho` does.
pub fn pack(gamma: &VariationalState, params: &ModelParams, groups: CoordGroups) -> Vec<f64> {
    let mut out = Vec::new();
    if groups.memberships {
        for m in [&gamma.tau_rows, &gamma.tau_cols] {
            for i in 0..m.n() {
                let r = m.row(i);
                let base = r[0].max(f64::MIN_POSITIVE).ln();
                out.extend(r[1..].iter().map(|t| t.max(f64::MIN_POSITIVE).ln() - base));
            }
        }
    }
    if groups.latents {
        for block in LatentBlock::ALL {
            if let Some(f) = gamma.latent(block) {
                out.extend_from_slice(&f.nu);
                out.extend(f.rho.iter().map(|r| r.ln()));
            }
        }
    }
    if groups.alpha {
        for a in [&params.alpha_rows, &params.alpha_cols] {
            out.extend(a[1..].iter().map(|v| v.ln() - a[0].ln()));
        }
    }
    if groups.pi_mu {
        out.extend(params.pi.iter().flatten().map(|p| crate::model::logit(*p)));
        out.push(params.mu);
    }
    if groups.variances {
        for block in LatentBlock::ALL {
            if gamma.latent(block).is_some() {
                out.push(params.var(block).ln());
            }
        }
    }
    out
}

fn softmax_into(z: &[f64], out: &mut [f64]) {
    // z excludes the fixed zero logit of class 0
    let m = z.iter().copied().fold(0.0, f64::max);
    out[0] = (-m).exp();
    for (o, v) in out[1..].iter_mut().zip(z) {
        *o = (v - m).exp();
    }
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= s);
}

/// Inverse of [`pack`]: writes the coordinates back into `gamma` and `params`.
pub fn unpack(coords: &[f64], gamma: &mut VariationalState, params: &mut ModelParams, groups: CoordGroups) {
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = &coords[pos..pos + n];
        pos += n;
        s
    };
    if groups.memberships {
        for m in [&mut gamma.tau_rows, &mut gamma.tau_cols] {
            let k = m.k();
            for i in 0..m.n() {
                let z = take(k - 1);
                softmax_into(z, m.row_mut(i));
            }
        }
    }
    let mut log_rho: [Option<&[f64]>; 4] = [None; 4];
    if groups.latents {
        for block in LatentBlock::ALL {
            if let Some(f) = gamma.latent_mut(block).as_mut() {
                let n = f.len();
                f.nu.copy_from_slice(take(n));
                log_rho[block.index()] = Some(take(n));
            }
        }
    }
    if groups.alpha {
        let k = params.alpha_rows.len();
        softmax_into(take(k - 1), &mut params.alpha_rows);
        let k = params.alpha_cols.len();
        softmax_into(take(k - 1), &mut params.alpha_cols);
    }
    if groups.pi_mu {
        let bound = pi_logit_bound();
        let nl = params.nl();
        let z = take(params.nq() * nl);
        for (k, v) in z.iter().enumerate() {
            params.pi[k / nl][k % nl] = crate::model::sigmoid(v.clamp(-bound, bound));
        }
        params.mu = take(1)[0];
    }
    if groups.variances {
        for block in LatentBlock::ALL {
            if gamma.latent(block).is_some() {
                *params.var_mut(block) = take(1)[0].exp();
            }
        }
    }
    // posterior variances are capped by the prior variance
    for block in LatentBlock::ALL {
        if let (Some(z), Some(f)) = (log_rho[block.index()], gamma.latent_mut(block).as_mut()) {
            let cap = params.var(block).ln();
            for (r, z) in f.rho.iter_mut().zip(z) {
                *r = z.min(cap).exp();
            }
        }
    }
}

/// Gradient of `J` in the coordinates of [`pack`].
pub fn chain(raw: &RawGradient, gamma: &VariationalState, params: &ModelParams, groups: CoordGroups) -> Vec<f64> {
    let mut out = Vec::new();
    if groups.memberships {
        for (m, g) in [(&gamma.tau_rows, &raw.tau_rows), (&gamma.tau_cols, &raw.tau_cols)] {
            let k = m.k();
            for i in 0..m.n() {
                let t = m.row(i);
                let gi = &g[i * k..(i + 1) * k];
                let mean: f64 = t.iter().zip(gi).map(|(a, b)| a * b).sum();
                out.extend((1..k).map(|q| t[q] * (gi[q] - mean)));
            }
        }
    }
    if groups.latents {
        for block in LatentBlock::ALL {
            if let Some(f) = gamma.latent(block) {
                let b = block.index();
                out.extend_from_slice(raw.nu[b].as_ref().expect("gradient present for active block"));
                let gr = raw.rho[b].as_ref().expect("gradient present for active block");
                let cap = params.var(block);
                // at the cap only inward moves change J
                out.extend(
                    gr.iter()
                        .zip(&f.rho)
                        .map(|(g, r)| if *r >= cap && *g > 0.0 { 0.0 } else { g * r }),
                );
            }
        }
    }
    if groups.alpha {
        for (a, g) in [(&params.alpha_rows, &raw.alpha_rows), (&params.alpha_cols, &raw.alpha_cols)] {
            let mean: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
            out.extend((1..a.len()).map(|q| a[q] * (g[q] - mean)));
        }
    }
    if groups.pi_mu {
        out.extend(
            params
                .pi
                .iter()
                .flatten()
                .zip(&raw.pi)
                .map(|(p, g)| g * p * (1.0 - p)),
        );
        out.push(raw.mu);
    }
    if groups.variances {
        for block in LatentBlock::ALL {
            if gamma.latent(block).is_some() {
                out.push(raw.var[block.index()] * params.var(block));
            }
        }
    }
    out
}
