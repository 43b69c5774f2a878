//! Generative model types and cell-level probabilities.
//!
//! The observed matrix holds ternary cells. Each cell is generated by a
//! Bernoulli draw from its block probability `pi[q][l]` followed by a mask draw
//! whose log-odds of observation combine a global effect `mu` with row effects
//! `A`, `B` and column effects `P`, `Q`:
//!
//! ```text
//! x = 1: mu + A_i + B_i + P_j + Q_j
//! x = 0: mu + A_i - B_i + P_j - Q_j
//! ```
//!
//! The latent effects are centered Gaussians. Their spread is stored as a
//! *variance* (`var_a`, ...), not a standard deviation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LbmError, Result};

/// Lower clamp for block probabilities; the upper clamp is `1 - PI_EPS`.
pub const PI_EPS: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MissingnessKind {
    #[serde(rename = "mcar")]
    Mcar,
    #[serde(rename = "mar")]
    Mar,
    #[serde(rename = "nmar", alias = "mnar")]
    Mnar,
}

impl MissingnessKind {
    /// Whether row/column propensity effects `A` and `P` exist.
    pub fn has_propensity_effects(self) -> bool {
        !matches!(self, MissingnessKind::Mcar)
    }

    /// Whether value-dependent effects `B` and `Q` exist.
    pub fn has_value_effects(self) -> bool {
        matches!(self, MissingnessKind::Mnar)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MissingnessKind::Mcar => "mcar",
            MissingnessKind::Mar => "mar",
            MissingnessKind::Mnar => "nmar",
        }
    }
}

impl fmt::Display for MissingnessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MissingnessKind {
    type Err = LbmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mcar" => Ok(MissingnessKind::Mcar),
            "mar" => Ok(MissingnessKind::Mar),
            "nmar" | "mnar" => Ok(MissingnessKind::Mnar),
            other => Err(LbmError::Domain(format!("unknown missingness kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Zero,
    One,
    Missing,
}

impl Cell {
    pub fn is_observed(self) -> bool {
        !matches!(self, Cell::Missing)
    }
}

/// One of the four latent effect vectors of the mask model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentBlock {
    /// Row propensity `A`.
    A,
    /// Row value effect `B`.
    B,
    /// Column propensity `P`.
    P,
    /// Column value effect `Q`.
    Q,
}

impl LatentBlock {
    pub const ALL: [LatentBlock; 4] = [LatentBlock::A, LatentBlock::B, LatentBlock::P, LatentBlock::Q];

    pub fn is_row(self) -> bool {
        matches!(self, LatentBlock::A | LatentBlock::B)
    }

    /// `A` and `P` shift the propensity; `B` and `Q` shift it with the sign of the value.
    pub fn is_value_effect(self) -> bool {
        matches!(self, LatentBlock::B | LatentBlock::Q)
    }

    pub fn allowed_by(self, kind: MissingnessKind) -> bool {
        if self.is_value_effect() {
            kind.has_value_effects()
        } else {
            kind.has_propensity_effects()
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LatentBlock::A => "a",
            LatentBlock::B => "b",
            LatentBlock::P => "p",
            LatentBlock::Q => "q",
        }
    }
}

/// Partially observed binary matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedMatrix {
    n_rows: usize,
    n_cols: usize,
    cells: Vec<Cell>,
}

impl ObservedMatrix {
    pub fn new(n_rows: usize, n_cols: usize, cells: Vec<Cell>) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(LbmError::Domain(format!(
                "matrix must have at least one row and one column, got {n_rows}x{n_cols}"
            )));
        }
        if cells.len() != n_rows * n_cols {
            return Err(LbmError::Contract(format!(
                "{} cells supplied for a {n_rows}x{n_cols} matrix",
                cells.len()
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            cells,
        })
    }

    pub fn from_rows(rows: Vec<Vec<Cell>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n_cols) {
            return Err(LbmError::Contract(format!(
                "row {i} has {} cells, expected {n_cols}",
                r.len()
            )));
        }
        Self::new(n_rows, n_cols, rows.into_iter().flatten().collect())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Cell {
        self.cells[i * self.n_cols + j]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn row(&self, i: usize) -> &[Cell] {
        &self.cells[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Cell]> {
        self.cells.chunks(self.n_cols)
    }

    pub fn observed_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_observed()).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        1.0 - self.observed_count() as f64 / self.cells.len() as f64
    }

    pub fn is_all_missing(&self) -> bool {
        self.observed_count() == 0
    }

    /// Sub-matrix made of the first `n_rows` rows and `n_cols` columns.
    pub fn top_left(&self, n_rows: usize, n_cols: usize) -> Result<Self> {
        if n_rows > self.n_rows || n_cols > self.n_cols {
            return Err(LbmError::Contract(format!(
                "cannot take {n_rows}x{n_cols} from a {}x{} matrix",
                self.n_rows, self.n_cols
            )));
        }
        let cells = (0..n_rows)
            .flat_map(|i| self.row(i)[..n_cols].iter().copied())
            .collect();
        Self::new(n_rows, n_cols, cells)
    }
}

/// Parameters `theta` of the extended latent block model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: MissingnessKind,
    pub alpha_rows: Vec<f64>,
    pub alpha_cols: Vec<f64>,
    /// Block probabilities, `pi[q][l]`.
    pub pi: Vec<Vec<f64>>,
    pub mu: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub var_p: f64,
    pub var_q: f64,
}

impl ModelParams {
    /// Builds a validated parameter set. Block probabilities are clamped to
    /// `[PI_EPS, 1 - PI_EPS]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: MissingnessKind,
        alpha_rows: Vec<f64>,
        alpha_cols: Vec<f64>,
        pi: Vec<Vec<f64>>,
        mu: f64,
        var_a: f64,
        var_b: f64,
        var_p: f64,
        var_q: f64,
    ) -> Result<Self> {
        let mut params = Self {
            kind,
            alpha_rows,
            alpha_cols,
            pi,
            mu,
            var_a,
            var_b,
            var_p,
            var_q,
        };
        for row in &mut params.pi {
            for p in row.iter_mut() {
                if p.is_finite() {
                    *p = clamp_pi(*p);
                }
            }
        }
        params.validate()?;
        Ok(params)
    }

    pub fn nq(&self) -> usize {
        self.alpha_rows.len()
    }

    pub fn nl(&self) -> usize {
        self.alpha_cols.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex("alpha_rows", &self.alpha_rows)?;
        check_simplex("alpha_cols", &self.alpha_cols)?;
        if self.pi.len() != self.nq() {
            return Err(LbmError::Contract(format!(
                "pi has {} rows but alpha_rows has {} classes",
                self.pi.len(),
                self.nq()
            )));
        }
        for (q, row) in self.pi.iter().enumerate() {
            if row.len() != self.nl() {
                return Err(LbmError::Contract(format!(
                    "pi row {q} has {} entries but alpha_cols has {} classes",
                    row.len(),
                    self.nl()
                )));
            }
            if let Some(p) = row.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
                return Err(LbmError::Domain(format!("pi entry {p} outside (0, 1)")));
            }
        }
        if !self.mu.is_finite() {
            return Err(LbmError::Domain("mu must be finite".into()));
        }
        for (name, v) in self.variances() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LbmError::Domain(format!("{name} = {v} is not a nonnegative real")));
            }
        }
        if !self.kind.has_propensity_effects() && (self.var_a != 0.0 || self.var_p != 0.0) {
            return Err(LbmError::Contract("MCAR requires var_a = var_p = 0".into()));
        }
        if !self.kind.has_value_effects() && (self.var_b != 0.0 || self.var_q != 0.0) {
            return Err(LbmError::Contract(format!(
                "{} requires var_b = var_q = 0",
                self.kind
            )));
        }
        Ok(())
    }

    fn variances(&self) -> [(&'static str, f64); 4] {
        [
            ("var_a", self.var_a),
            ("var_b", self.var_b),
            ("var_p", self.var_p),
            ("var_q", self.var_q),
        ]
    }

    pub fn var(&self, block: LatentBlock) -> f64 {
        match block {
            LatentBlock::A => self.var_a,
            LatentBlock::B => self.var_b,
            LatentBlock::P => self.var_p,
            LatentBlock::Q => self.var_q,
        }
    }

    pub fn var_mut(&mut self, block: LatentBlock) -> &mut f64 {
        match block {
            LatentBlock::A => &mut self.var_a,
            LatentBlock::B => &mut self.var_b,
            LatentBlock::P => &mut self.var_p,
            LatentBlock::Q => &mut self.var_q,
        }
    }

    /// A latent block is active when the kind allows it and its variance is
    /// positive. A zero variance pins the block at zero.
    pub fn block_active(&self, block: LatentBlock) -> bool {
        block.allowed_by(self.kind) && self.var(block) > 0.0
    }

    /// `A`/`P` effects are present: allowed by the kind and not pinned to zero.
    pub fn propensity_active(&self) -> bool {
        self.kind.has_propensity_effects() && (self.var_a > 0.0 || self.var_p > 0.0)
    }

    /// `B`/`Q` effects are present: allowed by the kind and not pinned to zero.
    pub fn value_effects_active(&self) -> bool {
        self.kind.has_value_effects() && (self.var_b > 0.0 || self.var_q > 0.0)
    }

    /// Same parameters with classes relabeled: new class `k` is old class
    /// `row_perm[k]` (resp. `col_perm[k]`).
    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.alpha_rows = row_perm.iter().map(|&q| self.alpha_rows[q]).collect();
        out.alpha_cols = col_perm.iter().map(|&l| self.alpha_cols[l]).collect();
        out.pi = row_perm
            .iter()
            .map(|&q| col_perm.iter().map(|&l| self.pi[q][l]).collect())
            .collect();
        out
    }
}

fn check_simplex(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(LbmError::Domain(format!("{name} is empty")));
    }
    if v.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(LbmError::Domain(format!("{name} has non-positive entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-8 {
        return Err(LbmError::Domain(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

#[inline]
pub fn clamp_pi(p: f64) -> f64 {
    p.clamp(PI_EPS, 1.0 - PI_EPS)
}

/// Ground truth drawn by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteSample {
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Complete binary matrix, row-major.
    pub x_complete: Vec<u8>,
    /// 1 where the cell is observed, row-major.
    pub mask: Vec<u8>,
    #[serde(skip)]
    pub x_observed: Option<ObservedMatrix>,
}

impl CompleteSample {
    pub fn n_rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_labels.len()
    }

    /// Rebuilds the observed matrix from `x_complete` and `mask`.
    pub fn observed(&self) -> ObservedMatrix {
        if let Some(x) = &self.x_observed {
            return x.clone();
        }
        let cells = self
            .x_complete
            .iter()
            .zip(&self.mask)
            .map(|(&x, &m)| match (m, x) {
                (0, _) => Cell::Missing,
                (_, 0) => Cell::Zero,
                _ => Cell::One,
            })
            .collect();
        ObservedMatrix::new(self.n_rows(), self.n_cols(), cells)
            .expect("sample dimensions are consistent")
    }

    /// Restriction to the first `n_rows` rows and `n_cols` columns.
    pub fn top_left(&self, n_rows: usize, n_cols: usize) -> Result<Self> {
        if n_rows > self.n_rows() || n_cols > self.n_cols() || n_rows == 0 || n_cols == 0 {
            return Err(LbmError::Contract(format!(
                "cannot take {n_rows}x{n_cols} from a {}x{} sample",
                self.n_rows(),
                self.n_cols()
            )));
        }
        let w = self.n_cols();
        let pick = |v: &[u8]| -> Vec<u8> {
            (0..n_rows)
                .flat_map(|i| v[i * w..i * w + n_cols].iter().copied())
                .collect()
        };
        let mut out = Self {
            row_labels: self.row_labels[..n_rows].to_vec(),
            col_labels: self.col_labels[..n_cols].to_vec(),
            a: self.a[..n_rows].to_vec(),
            b: self.b[..n_rows].to_vec(),
            p: self.p[..n_cols].to_vec(),
            q: self.q[..n_cols].to_vec(),
            x_complete: pick(&self.x_complete),
            mask: pick(&self.mask),
            x_observed: None,
        };
        out.x_observed = Some(out.observed());
        Ok(out)
    }
}

/// Numerically stable logistic function, rejecting non-finite input.
pub fn logistic(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(LbmError::Domain(format!("logistic of non-finite value {x}")));
    }
    Ok(sigmoid(x))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(logistic(x))` without overflow or cancellation.
#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Probabilities of observing 0, 1 and NA in a cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellProbs {
    pub p0: f64,
    pub p1: f64,
    pub p_na: f64,
}

/// Categorical distribution of an observed cell given its block probability
/// and the latent effects of its row (`a`, `b`) and column (`p`, `q`).
pub fn cell_probs(pi_ql: f64, mu: f64, a: f64, b: f64, p: f64, q: f64) -> Result<CellProbs> {
    if !(pi_ql > 0.0 && pi_ql < 1.0) {
        return Err(LbmError::Domain(format!("pi = {pi_ql} outside (0, 1)")));
    }
    if ![mu, a, b, p, q].iter().all(|v| v.is_finite()) {
        return Err(LbmError::Domain("latent effects must be finite".into()));
    }
    let up = mu + a + b + p + q;
    let down = mu + a - b + p - q;
    let p1 = pi_ql * sigmoid(up);
    let p0 = (1.0 - pi_ql) * sigmoid(down);
    // Written as a sum of positive terms so it never goes negative.
    let p_na = pi_ql * sigmoid(-up) + (1.0 - pi_ql) * sigmoid(-down);
    Ok(CellProbs { p0, p1, p_na })
}

/// Log density of `N(0, var)` at `z`.
#[inline]
pub(crate) fn gaussian_log_density(z: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - z * z / (2.0 * var)
}

/// Complete-data log-likelihood `log p(X^o, Y1, Y2, A, B, P, Q; theta)`.
///
/// Latent blocks whose variance is zero are treated as pinned at zero: their
/// density term is dropped and their values must be zero.
pub fn complete_loglik(sample: &CompleteSample, params: &ModelParams) -> Result<f64> {
    params.validate()?;
    let (n1, n2) = (sample.n_rows(), sample.n_cols());
    let lens_ok = sample.a.len() == n1
        && sample.b.len() == n1
        && sample.p.len() == n2
        && sample.q.len() == n2
        && sample.x_complete.len() == n1 * n2
        && sample.mask.len() == n1 * n2;
    if !lens_ok {
        return Err(LbmError::Contract("sample vectors have inconsistent lengths".into()));
    }
    if sample.row_labels.iter().any(|&q| q >= params.nq())
        || sample.col_labels.iter().any(|&l| l >= params.nl())
    {
        return Err(LbmError::Contract("sample labels exceed the class counts".into()));
    }

    let mut ll: f64 = sample
        .row_labels
        .iter()
        .map(|&q| params.alpha_rows[q].ln())
        .sum();
    ll += sample
        .col_labels
        .iter()
        .map(|&l| params.alpha_cols[l].ln())
        .sum::<f64>();

    let blocks: [(&[f64], f64, bool); 4] = [
        (&sample.a, params.var_a, params.kind.has_propensity_effects()),
        (&sample.b, params.var_b, params.kind.has_value_effects()),
        (&sample.p, params.var_p, params.kind.has_propensity_effects()),
        (&sample.q, params.var_q, params.kind.has_value_effects()),
    ];
    for (values, var, allowed) in blocks {
        if allowed && var > 0.0 {
            ll += values.iter().map(|&z| gaussian_log_density(z, var)).sum::<f64>();
        } else if values.iter().any(|&z| z != 0.0) {
            return Err(LbmError::Contract(
                "latent effects must be zero for blocks absent from the model".into(),
            ));
        }
    }

    let x = sample.observed();
    for i in 0..n1 {
        let q_i = sample.row_labels[i];
        for j in 0..n2 {
            let pi = params.pi[q_i][sample.col_labels[j]];
            let up = params.mu + sample.a[i] + sample.b[i] + sample.p[j] + sample.q[j];
            let down = params.mu + sample.a[i] - sample.b[i] + sample.p[j] - sample.q[j];
            ll += match x.get(i, j) {
                Cell::One => pi.ln() + log_sigmoid(up),
                Cell::Zero => (1.0 - pi).ln() + log_sigmoid(down),
                Cell::Missing => (pi * sigmoid(-up) + (1.0 - pi) * sigmoid(-down)).ln(),
            };
        }
    }
    Ok(ll)
}
