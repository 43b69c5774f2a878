//! Double spectral clustering initialization and the label-based starting
//! points shared with random restarts.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{LbmError, Result};
use crate::model::{logit, Cell, LatentBlock, MissingnessKind, ModelParams, ObservedMatrix};
use crate::rng::{self, Rng};

use super::state::{Membership, VariationalState};

/// Weight put on the hard label when turning labels into memberships.
pub const LABEL_WEIGHT: f64 = 0.9;
const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 100;

/// How a starting partition is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitKind {
    Spectral,
    /// Spectral labels with this fraction of rows and columns reassigned at random.
    Perturbed(f64),
    /// Uniformly random labels.
    Random,
}

/// Spectral partition of the rows of `w` into `k` clusters.
///
/// Uses the eigenvectors of `D^-1/2 W D^-1/2` for the `k` eigenvalues largest
/// in absolute value, then k-means on their rows. Nodes of zero degree are left
/// out of k-means and put in the largest cluster.
pub fn spectral_clustering(w: &DMatrix<f64>, k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = w.nrows();
    if k <= 1 || n == 0 {
        return vec![0; n];
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = w.row(i).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * w[(i, j)] * inv_sqrt[j]);
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .partial_cmp(&eig.eigenvalues[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let dims = k.min(n);
    let active: Vec<usize> = (0..n).filter(|&i| inv_sqrt[i] > 0.0).collect();
    let points: Vec<Vec<f64>> = active
        .iter()
        .map(|&i| order[..dims].iter().map(|&c| eig.eigenvectors[(i, c)]).collect())
        .collect();

    let mut labels = vec![0; n];
    if points.is_empty() {
        return labels;
    }
    let assign = kmeans(&points, k, rng);
    let mut sizes = vec![0usize; k];
    for (&i, &c) in active.iter().zip(&assign) {
        labels[i] = c;
        sizes[c] += 1;
    }
    let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap_or(0);
    for i in 0..n {
        if inv_sqrt[i] == 0.0 {
            labels[i] = largest;
        }
    }
    labels
}

/// Lloyd's algorithm with k-means++ seeding, best of several restarts.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = points.len();
    if n <= k {
        return (0..n).collect();
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (inertia, labels) = kmeans_once(points, k, rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.map(|(_, l)| l).unwrap_or_default()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![0; n];
    for iter in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = nearest(p, &centers);
            if c != labels[i] || iter == 0 {
                changed |= c != labels[i];
                labels[i] = c;
            }
        }
        if iter > 0 && !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the worst-fitted point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centers[labels[a]]);
                        let db = sq_dist(&points[b], &centers[labels[b]]);
                        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .unwrap_or(0);
                centers[c] = points[far].clone();
                labels[far] = c;
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &c)| sq_dist(p, &centers[c]))
        .sum();
    (inertia, labels)
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < bd {
            bd = d;
            best = c;
        }
    }
    best
}

/// Row and column spectral labels of `x`, with missing cells read as zeros.
pub fn spectral_labels(x: &ObservedMatrix, nq: usize, nl: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let (n1, n2) = (x.n_rows(), x.n_cols());
    let dense = DMatrix::from_fn(n1, n2, |i, j| if x.get(i, j) == Cell::One { 1.0 } else { 0.0 });
    let rows = spectral_clustering(&(&dense * dense.transpose()), nq, rng);
    let cols = spectral_clustering(&(dense.transpose() * &dense), nl, rng);
    (rows, cols)
}

/// Starting point built from hard labels: smoothed memberships, smoothed
/// block frequencies and class proportions, `mu` from the observed rate and
/// prior variances drawn from `U(0, 1]`. Latent means start at zero with
/// posterior variance equal to the prior draw.
#[allow(clippy::too_many_arguments)]
pub fn init_from_labels(
    x: &ObservedMatrix,
    row_labels: &[usize],
    col_labels: &[usize],
    nq: usize,
    nl: usize,
    kind: MissingnessKind,
    rng: &mut Rng,
) -> Result<(ModelParams, VariationalState)> {
    let (n1, n2) = (x.n_rows(), x.n_cols());
    if row_labels.len() != n1 || col_labels.len() != n2 {
        return Err(LbmError::Contract("label vectors do not match the matrix".into()));
    }
    let mut ones = vec![0.0; nq * nl];
    let mut obs = vec![0.0; nq * nl];
    for i in 0..n1 {
        for j in 0..n2 {
            let k = row_labels[i] * nl + col_labels[j];
            match x.get(i, j) {
                Cell::One => {
                    ones[k] += 1.0;
                    obs[k] += 1.0;
                }
                Cell::Zero => obs[k] += 1.0,
                Cell::Missing => {}
            }
        }
    }
    let pi = (0..nq)
        .map(|q| (0..nl).map(|l| (ones[q * nl + l] + 0.5) / (obs[q * nl + l] + 1.0)).collect())
        .collect();
    let proportions = |labels: &[usize], k: usize| -> Vec<f64> {
        let mut c = vec![0.5; k];
        labels.iter().for_each(|&q| c[q] += 1.0);
        let s: f64 = c.iter().sum();
        c.into_iter().map(|v| v / s).collect()
    };
    let observed_rate = (x.observed_count() as f64 / (n1 * n2) as f64).clamp(1e-6, 1.0 - 1e-6);

    let mut draw = || 1.0 - rng.random::<f64>();
    let mut vars = [0.0; 4];
    for block in LatentBlock::ALL {
        // draw for every block so streams stay aligned across kinds
        let v = draw();
        if block.allowed_by(kind) {
            vars[block.index()] = v;
        }
    }
    let params = ModelParams::new(
        kind,
        proportions(row_labels, nq),
        proportions(col_labels, nl),
        pi,
        logit(observed_rate),
        vars[0],
        vars[1],
        vars[2],
        vars[3],
    )?;
    let gamma = VariationalState::with_prior_latents(
        Membership::from_labels(row_labels, nq, LABEL_WEIGHT),
        Membership::from_labels(col_labels, nl, LABEL_WEIGHT),
        &params,
    );
    Ok((params, gamma))
}

fn check_counts(x: &ObservedMatrix, nq: usize, nl: usize) -> Result<()> {
    if nq == 0 || nl == 0 {
        return Err(LbmError::Domain("class counts must be at least 1".into()));
    }
    if nq > x.n_rows() || nl > x.n_cols() {
        return Err(LbmError::Contract(format!(
            "{nq}x{nl} classes requested for a {}x{} matrix",
            x.n_rows(),
            x.n_cols()
        )));
    }
    Ok(())
}

/// Starting point for a VEM run.
///
/// `Spectral` clusters rows on `X X'` and columns on `X' X`. Fails on an
/// all-missing matrix, where the similarity matrices carry no information.
pub fn init_spectral(
    x: &ObservedMatrix,
    nq: usize,
    nl: usize,
    kind: MissingnessKind,
    seed: u64,
) -> Result<(ModelParams, VariationalState)> {
    init_with(x, nq, nl, kind, InitKind::Spectral, seed)
}

pub fn init_with(
    x: &ObservedMatrix,
    nq: usize,
    nl: usize,
    kind: MissingnessKind,
    init: InitKind,
    seed: u64,
) -> Result<(ModelParams, VariationalState)> {
    check_counts(x, nq, nl)?;
    let mut label_rng = rng::stream(seed, 1);
    let mut param_rng = rng::stream(seed, 2);
    let (rows, cols) = match init {
        InitKind::Random => random_labels(x.n_rows(), x.n_cols(), nq, nl, &mut label_rng),
        InitKind::Spectral | InitKind::Perturbed(_) => {
            if x.is_all_missing() {
                return Err(LbmError::Domain("spectral initialization of an all-missing matrix".into()));
            }
            let (mut rows, mut cols) = spectral_labels(x, nq, nl, &mut label_rng);
            if let InitKind::Perturbed(frac) = init {
                perturb(&mut rows, nq, frac, &mut label_rng);
                perturb(&mut cols, nl, frac, &mut label_rng);
            }
            (rows, cols)
        }
    };
    init_from_labels(x, &rows, &cols, nq, nl, kind, &mut param_rng)
}

fn random_labels(n1: usize, n2: usize, nq: usize, nl: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let rows = (0..n1).map(|_| rng.random_range(0..nq)).collect();
    let cols = (0..n2).map(|_| rng.random_range(0..nl)).collect();
    (rows, cols)
}

fn perturb(labels: &mut [usize], k: usize, frac: f64, rng: &mut Rng) {
    for l in labels.iter_mut() {
        if rng.random::<f64>() < frac {
            *l = rng.random_range(0..k);
        }
    }
}
