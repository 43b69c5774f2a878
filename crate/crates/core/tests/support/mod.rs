//! Reference computations used as oracles by the integration tests. Nothing
//! here calls into the inference code paths being checked.

#![allow(dead_code)]

use lbmnar::model::{Cell, ModelParams, ObservedMatrix};
use lbmnar::VariationalState;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`: physicists' Hermite roots
/// by Newton iteration, rescaled.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-0.16667),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - ((j as f64) / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    x.iter()
        .zip(&w)
        .map(|(xi, wi)| (xi * std::f64::consts::SQRT_2, wi / sqrt_pi))
        .collect()
}

/// Probability of the observed state of a cell given its label block and
/// latent effects.
pub fn cell_prob(cell: Cell, pi: f64, mu: f64, a: f64, b: f64, p: f64, q: f64) -> f64 {
    let p1 = pi * sig(mu + a + b + p + q);
    let p0 = (1.0 - pi) * sig(mu + a - b + p - q);
    match cell {
        Cell::One => p1,
        Cell::Zero => p0,
        Cell::Missing => pi * (1.0 - sig(mu + a + b + p + q)) + (1.0 - pi) * (1.0 - sig(mu + a - b + p - q)),
    }
}

/// Log of [`cell_prob`], computed without underflow.
pub fn cell_log_prob(cell: Cell, pi: f64, mu: f64, a: f64, b: f64, p: f64, q: f64) -> f64 {
    let log_sig = |z: f64| if z >= 0.0 { -(-z).exp().ln_1p() } else { z - z.exp().ln_1p() };
    let (u, v) = (mu + a + b + p + q, mu + a - b + p - q);
    match cell {
        Cell::One => pi.ln() + log_sig(u),
        Cell::Zero => (1.0 - pi).ln() + log_sig(v),
        Cell::Missing => {
            let (x, y) = (pi.ln() + log_sig(-u), (1.0 - pi).ln() + log_sig(-v));
            let m = x.max(y);
            m + ((x - m).exp() + (y - m).exp()).ln()
        }
    }
}

/// Quadrature states `(class, a, b, weight)` for one row (or `(class, p, q,
/// weight)` for one column). Pinned latents use a single node at zero.
fn states(alpha: &[f64], var1: f64, var2: f64, nodes: &[(f64, f64)]) -> Vec<(usize, f64, f64, f64)> {
    let zero = [(0.0, 1.0)];
    let n1: &[(f64, f64)] = if var1 > 0.0 { nodes } else { &zero };
    let n2: &[(f64, f64)] = if var2 > 0.0 { nodes } else { &zero };
    let mut out = Vec::new();
    for (k, a) in alpha.iter().enumerate() {
        for (z1, w1) in n1 {
            for (z2, w2) in n2 {
                out.push((k, z1 * var1.sqrt(), z2 * var2.sqrt(), a * w1 * w2));
            }
        }
    }
    out
}

/// `log p(X^o; theta)` with labels summed exactly and the latent effects
/// integrated by tensor Gauss-Hermite quadrature with `n_nodes` per latent.
///
/// Row states are enumerated jointly; columns are integrated independently
/// given the row states.
pub fn exact_loglik(x: &ObservedMatrix, params: &ModelParams, n_nodes: usize) -> f64 {
    let nodes = gauss_hermite(n_nodes);
    let (n1, n2) = (x.n_rows(), x.n_cols());
    let rs = states(&params.alpha_rows, params.var_a, params.var_b, &nodes);
    let cs = states(&params.alpha_cols, params.var_p, params.var_q, &nodes);
    // lik[i][j][s][t]
    let mut lik = vec![vec![vec![vec![0.0; cs.len()]; rs.len()]; n2]; n1];
    for i in 0..n1 {
        for j in 0..n2 {
            for (s, &(q, a, b, _)) in rs.iter().enumerate() {
                for (t, &(l, p, qq, _)) in cs.iter().enumerate() {
                    lik[i][j][s][t] = cell_prob(x.get(i, j), params.pi[q][l], params.mu, a, b, p, qq);
                }
            }
        }
    }
    // recursive enumeration over row states with running per-column products
    let mut total = 0.0;
    let init = vec![vec![1.0; cs.len()]; n2];
    enumerate_rows(0, 1.0, &init, &rs, &cs, &lik, &mut total);
    total.ln()
}

fn enumerate_rows(
    i: usize,
    weight: f64,
    prod: &[Vec<f64>],
    rs: &[(usize, f64, f64, f64)],
    cs: &[(usize, f64, f64, f64)],
    lik: &[Vec<Vec<Vec<f64>>>],
    total: &mut f64,
) {
    let n1 = lik.len();
    if i == n1 {
        let mut v = weight;
        for col in prod {
            v *= col.iter().zip(cs).map(|(p, c)| p * c.3).sum::<f64>();
        }
        *total += v;
        return;
    }
    let mut next = prod.to_vec();
    for (s, r) in rs.iter().enumerate() {
        for (j, col) in next.iter_mut().enumerate() {
            for (t, v) in col.iter_mut().enumerate() {
                *v = prod[j][t] * lik[i][j][s][t];
            }
        }
        enumerate_rows(i + 1, weight * r.3, &next, rs, cs, lik, total);
    }
}

/// Monte Carlo estimate of `E_q[log p(X^o, Y, A, B, P, Q) - log q(Y, A, B, P, Q)]`
/// under the mean-field distribution `gamma`. Returns `(mean, standard error)`.
pub fn mc_elbo(x: &ObservedMatrix, gamma: &VariationalState, params: &ModelParams, n_samples: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (n1, n2) = (x.n_rows(), x.n_cols());
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let log_normal = |z: f64, m: f64, v: f64| -0.5 * (ln2pi + v.ln()) - (z - m) * (z - m) / (2.0 * v);
    let draw_cat = |r: &mut ChaCha12Rng, probs: &[f64]| {
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        probs.len() - 1
    };
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n_samples {
        let mut lp = 0.0;
        let mut lq = 0.0;
        let y1: Vec<usize> = (0..n1)
            .map(|i| {
                let k = draw_cat(&mut r, gamma.tau_rows.row(i));
                lq += gamma.tau_rows.get(i, k).ln();
                lp += params.alpha_rows[k].ln();
                k
            })
            .collect();
        let y2: Vec<usize> = (0..n2)
            .map(|j| {
                let k = draw_cat(&mut r, gamma.tau_cols.row(j));
                lq += gamma.tau_cols.get(j, k).ln();
                lp += params.alpha_cols[k].ln();
                k
            })
            .collect();
        let mut draw_block = |f: Option<&lbmnar::GaussianFactor>, var: f64, n: usize, lp: &mut f64, lq: &mut f64| -> Vec<f64> {
            match f {
                None => vec![0.0; n],
                Some(f) => (0..n)
                    .map(|k| {
                        let z: f64 = r.sample(StandardNormal);
                        let v = f.nu[k] + f.rho[k].sqrt() * z;
                        *lq += log_normal(v, f.nu[k], f.rho[k]);
                        *lp += log_normal(v, 0.0, var);
                        v
                    })
                    .collect(),
            }
        };
        let a = draw_block(gamma.a.as_ref(), params.var_a, n1, &mut lp, &mut lq);
        let b = draw_block(gamma.b.as_ref(), params.var_b, n1, &mut lp, &mut lq);
        let p = draw_block(gamma.p.as_ref(), params.var_p, n2, &mut lp, &mut lq);
        let q = draw_block(gamma.q.as_ref(), params.var_q, n2, &mut lp, &mut lq);
        for i in 0..n1 {
            for j in 0..n2 {
                lp += cell_log_prob(x.get(i, j), params.pi[y1[i]][y2[j]], params.mu, a[i], b[i], p[j], q[j]);
            }
        }
        let v = lp - lq;
        sum += v;
        sum2 += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Exact posterior label marginals of a fully observed MCAR matrix by
/// enumerating every joint labeling.
pub fn exact_label_marginals(x: &ObservedMatrix, params: &ModelParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (n1, n2) = (x.n_rows(), x.n_cols());
    let (nq, nl) = (params.nq(), params.nl());
    let mut rm = vec![vec![0.0; nq]; n1];
    let mut cm = vec![vec![0.0; nl]; n2];
    let n_rows_cfg = nq.pow(n1 as u32);
    let n_cols_cfg = nl.pow(n2 as u32);
    let decode = |mut c: usize, base: usize, n: usize| {
        let mut v = vec![0; n];
        for slot in v.iter_mut() {
            *slot = c % base;
            c /= base;
        }
        v
    };
    let mut logs = Vec::with_capacity(n_rows_cfg * n_cols_cfg);
    for rc in 0..n_rows_cfg {
        let y1 = decode(rc, nq, n1);
        for cc in 0..n_cols_cfg {
            let y2 = decode(cc, nl, n2);
            let mut lp: f64 = y1.iter().map(|&q| params.alpha_rows[q].ln()).sum::<f64>()
                + y2.iter().map(|&l| params.alpha_cols[l].ln()).sum::<f64>();
            for i in 0..n1 {
                for j in 0..n2 {
                    let p = params.pi[y1[i]][y2[j]];
                    lp += match x.get(i, j) {
                        Cell::One => p.ln(),
                        Cell::Zero => (1.0 - p).ln(),
                        Cell::Missing => 0.0,
                    };
                }
            }
            logs.push((y1.clone(), y2, lp));
        }
    }
    let m = logs.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().map(|t| (t.2 - m).exp()).sum();
    for (y1, y2, lp) in &logs {
        let w = (lp - m).exp() / z;
        for (i, &q) in y1.iter().enumerate() {
            rm[i][q] += w;
        }
        for (j, &l) in y2.iter().enumerate() {
            cm[j][l] += w;
        }
    }
    (rm, cm)
}

/// `r_r + r_c - r_r r_c` from label marginals.
pub fn risk_from_marginals(rows: &[Vec<f64>], cols: &[Vec<f64>]) -> f64 {
    let side = |m: &[Vec<f64>]| 1.0 - m.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).sum::<f64>() / m.len() as f64;
    let (r, c) = (side(rows), side(cols));
    r + c - r * c
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Central finite difference of `f` along coordinate `k`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, z: &[f64], k: usize, h: f64) -> f64 {
    let mut zp = z.to_vec();
    zp[k] += h;
    let mut zm = z.to_vec();
    zm[k] -= h;
    (f(&zp) - f(&zm)) / (2.0 * h)
}

/// Random matrix with the given probabilities of one and missing.
pub fn random_matrix(n1: usize, n2: usize, p_one: f64, p_missing: f64, seed: u64) -> ObservedMatrix {
    let mut r = rng(seed);
    let cells = (0..n1 * n2)
        .map(|_| {
            if r.random::<f64>() < p_missing {
                Cell::Missing
            } else if r.random::<f64>() < p_one {
                Cell::One
            } else {
                Cell::Zero
            }
        })
        .collect();
    ObservedMatrix::new(n1, n2, cells).unwrap()
}

pub fn report(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}
