//! Co-clustering losses, label alignment and recovery diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{LbmError, Result};
use crate::inference::VariationalState;
use crate::model::{CompleteSample, LatentBlock, ModelParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
}

impl LabelAssignment {
    pub fn new(row_labels: Vec<usize>, col_labels: Vec<usize>) -> Self {
        Self { row_labels, col_labels }
    }

    pub fn from_sample(sample: &CompleteSample) -> Self {
        Self::new(sample.row_labels.clone(), sample.col_labels.clone())
    }
}

/// Maximum a posteriori labels; ties go to the lowest class index.
pub fn map_assignments(gamma: &VariationalState) -> LabelAssignment {
    LabelAssignment::new(gamma.tau_rows.argmax(), gamma.tau_cols.argmax())
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns `assign[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Permutation `perm[pred_class] = truth_class` maximizing agreement.
fn best_permutation(truth: &[usize], pred: &[usize], k: usize) -> Vec<usize> {
    let mut agree = vec![vec![0.0; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        agree[p][t] += 1.0;
    }
    let cost: Vec<Vec<f64>> = agree.iter().map(|r| r.iter().map(|c| -c).collect()).collect();
    hungarian(&cost)
}

fn check_labels(truth: &LabelAssignment, pred: &LabelAssignment, nq: usize, nl: usize) -> Result<()> {
    if truth.row_labels.len() != pred.row_labels.len() || truth.col_labels.len() != pred.col_labels.len() {
        return Err(LbmError::Contract("label vectors have different lengths".into()));
    }
    let rows_ok = truth.row_labels.iter().chain(&pred.row_labels).all(|&q| q < nq);
    let cols_ok = truth.col_labels.iter().chain(&pred.col_labels).all(|&l| l < nl);
    if !(rows_ok && cols_ok) {
        return Err(LbmError::Contract("labels exceed the class counts".into()));
    }
    Ok(())
}

/// Row and column relabelings of `pred` that best match `truth`, solved
/// independently. `row_perm[c]` is the truth class assigned to predicted
/// class `c`.
pub fn align_labels(
    truth: &LabelAssignment,
    pred: &LabelAssignment,
    nq: usize,
    nl: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    check_labels(truth, pred, nq, nl)?;
    Ok((
        best_permutation(&truth.row_labels, &pred.row_labels, nq),
        best_permutation(&truth.col_labels, &pred.col_labels, nl),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemLoss {
    /// Fraction of matrix entries whose row or column is misclassified.
    pub loss: f64,
    pub row_error: f64,
    pub col_error: f64,
}

/// `l_r + l_c - l_r l_c` where `l_r`, `l_c` are the row and column
/// misclassification rates, after optimal relabeling when `align` is set.
pub fn l_item(truth: &LabelAssignment, pred: &LabelAssignment, nq: usize, nl: usize, align: bool) -> Result<ItemLoss> {
    check_labels(truth, pred, nq, nl)?;
    let (rp, cp) = if align {
        align_labels(truth, pred, nq, nl)?
    } else {
        ((0..nq).collect(), (0..nl).collect())
    };
    let rate = |t: &[usize], p: &[usize], perm: &[usize]| {
        let wrong = t.iter().zip(p).filter(|(a, b)| **a != perm[**b]).count();
        wrong as f64 / t.len() as f64
    };
    let row_error = rate(&truth.row_labels, &pred.row_labels, &rp);
    let col_error = rate(&truth.col_labels, &pred.col_labels, &cp);
    Ok(ItemLoss {
        loss: row_error + col_error - row_error * col_error,
        row_error,
        col_error,
    })
}

/// Largest absolute block-probability error once fitted classes are mapped
/// to truth classes by `row_perm` / `col_perm` (as returned by
/// [`align_labels`]).
pub fn param_max_error(truth: &ModelParams, fitted: &ModelParams, row_perm: &[usize], col_perm: &[usize]) -> Result<f64> {
    if truth.nq() != fitted.nq() || truth.nl() != fitted.nl() {
        return Err(LbmError::Contract("class counts differ".into()));
    }
    if row_perm.len() != fitted.nq() || col_perm.len() != fitted.nl() {
        return Err(LbmError::Contract("permutation lengths differ from class counts".into()));
    }
    let mut worst: f64 = 0.0;
    for (q, row) in fitted.pi.iter().enumerate() {
        for (l, p) in row.iter().enumerate() {
            worst = worst.max((truth.pi[row_perm[q]][col_perm[l]] - p).abs());
        }
    }
    Ok(worst)
}

/// Mean squared error of the posterior means of each latent block; `None`
/// when the block is absent from the fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentMse {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub p: Option<f64>,
    pub q: Option<f64>,
}

impl LatentMse {
    pub fn get(&self, block: LatentBlock) -> Option<f64> {
        match block {
            LatentBlock::A => self.a,
            LatentBlock::B => self.b,
            LatentBlock::P => self.p,
            LatentBlock::Q => self.q,
        }
    }
}

pub fn latent_mse(truth: &CompleteSample, gamma: &VariationalState) -> Result<LatentMse> {
    if truth.n_rows() != gamma.n_rows() || truth.n_cols() != gamma.n_cols() {
        return Err(LbmError::Contract("sample and variational state sizes differ".into()));
    }
    let mse = |block: LatentBlock, values: &[f64]| {
        gamma.latent(block).map(|f| {
            f.nu.iter().zip(values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / values.len() as f64
        })
    };
    Ok(LatentMse {
        a: mse(LatentBlock::A, &truth.a),
        b: mse(LatentBlock::B, &truth.b),
        p: mse(LatentBlock::P, &truth.p),
        q: mse(LatentBlock::Q, &truth.q),
    })
}
