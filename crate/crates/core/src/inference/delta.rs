//! Second-order delta-method expectations of the per-cell log-probabilities.
//!
//! With `x = A_i + P_j` and `y = B_i + Q_j` independent Gaussians, each cell
//! contributes `E[f(x, y)] ~ f(m) + var_x/2 f_xx(m) + var_y/2 f_yy(m)` where
//! `f` is the log-probability of the observed state. The helpers here also
//! return the partial derivatives of that approximation with respect to the
//! means, the variances and the block probability.

use serde::{Deserialize, Serialize};

use crate::error::{LbmError, Result};
use crate::model::{log_sigmoid, sigmoid};

/// Floor applied to the missing-cell probability before taking its log.
pub const NA_GUARD: f64 = 1e-300;

/// Which cell log-probability to expand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaKind {
    /// Observed zero.
    Zero,
    /// Observed one.
    One,
    /// Missing cell.
    Missing,
}

/// Logistic values and their derivatives at the two propensities of a cell.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CellLogistics {
    /// `sigma(-u)`, `sigma(-v)`: probability of a missing one / zero.
    pub(crate) su: f64,
    pub(crate) sv: f64,
    pub(crate) log_u: f64,
    pub(crate) log_v: f64,
    pub(crate) a1: f64,
    pub(crate) a2: f64,
    pub(crate) a3: f64,
    pub(crate) b1: f64,
    pub(crate) b2: f64,
    pub(crate) b3: f64,
}

impl CellLogistics {
    /// `u = mu + mx + my` drives ones, `v = mu + mx - my` drives zeros.
    #[inline]
    pub(crate) fn new(mu: f64, mx: f64, my: f64) -> Self {
        let u = mu + mx + my;
        let v = mu + mx - my;
        let (a, su) = (sigmoid(u), sigmoid(-u));
        let (b, sv) = (sigmoid(v), sigmoid(-v));
        let a1 = a * su;
        let b1 = b * sv;
        let a2 = a1 * (su - a);
        let b2 = b1 * (sv - b);
        let a3 = a1 * (1.0 - 6.0 * a * su);
        let b3 = b1 * (1.0 - 6.0 * b * sv);
        Self {
            su,
            sv,
            log_u: log_sigmoid(u),
            log_v: log_sigmoid(v),
            a1,
            a2,
            a3,
            b1,
            b2,
            b3,
        }
    }
}

/// Expectation of the propensity part of an observed cell, without the
/// `log pi` / `log(1 - pi)` term. `dv` is the derivative with respect to
/// either variance.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ObservedTerm {
    pub(crate) value: f64,
    pub(crate) dx: f64,
    pub(crate) dy: f64,
    pub(crate) dv: f64,
}

#[inline]
pub(crate) fn observed_one(c: &CellLogistics, var_sum: f64) -> ObservedTerm {
    let dx = c.su - 0.5 * var_sum * c.a2;
    ObservedTerm {
        value: c.log_u - 0.5 * var_sum * c.a1,
        dx,
        dy: dx,
        dv: -0.5 * c.a1,
    }
}

#[inline]
pub(crate) fn observed_zero(c: &CellLogistics, var_sum: f64) -> ObservedTerm {
    let dx = c.sv - 0.5 * var_sum * c.b2;
    ObservedTerm {
        value: c.log_v - 0.5 * var_sum * c.b1,
        dx,
        dy: -dx,
        dv: -0.5 * c.b1,
    }
}

/// Delta-method expectation of `log P(missing)` and its partial derivatives.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct MissingTerm {
    pub(crate) value: f64,
    pub(crate) dx: f64,
    pub(crate) dy: f64,
    pub(crate) dvx: f64,
    pub(crate) dvy: f64,
    pub(crate) dpi: f64,
    pub(crate) guarded: bool,
}

/// Value only; the boolean reports a guard hit.
///
/// The log-probability is convex in places, so with large variances the
/// expansion can turn positive. It is capped at zero, with zero derivatives.
#[inline]
pub(crate) fn missing_value(c: &CellLogistics, pi: f64, vx: f64, vy: f64) -> (f64, bool) {
    let qi = 1.0 - pi;
    let mut g = pi * c.su + qi * c.sv;
    let guarded = g < NA_GUARD;
    if guarded {
        g = NA_GUARD;
    }
    let ig = 1.0 / g;
    let rx = (-pi * c.a1 - qi * c.b1) * ig;
    let ry = (-pi * c.a1 + qi * c.b1) * ig;
    let rg = (-pi * c.a2 - qi * c.b2) * ig;
    let value = g.ln() + 0.5 * vx * (rg - rx * rx) + 0.5 * vy * (rg - ry * ry);
    if value > 0.0 {
        return (0.0, true);
    }
    (value, guarded)
}

#[inline]
pub(crate) fn missing_term(c: &CellLogistics, pi: f64, vx: f64, vy: f64) -> MissingTerm {
    let qi = 1.0 - pi;
    let mut g = pi * c.su + qi * c.sv;
    let guarded = g < NA_GUARD;
    if guarded {
        g = NA_GUARD;
    }
    let ig = 1.0 / g;
    let gx = -pi * c.a1 - qi * c.b1;
    let gy = -pi * c.a1 + qi * c.b1;
    let gxx = -pi * c.a2 - qi * c.b2;
    let gxy = -pi * c.a2 + qi * c.b2;
    let gxxx = -pi * c.a3 - qi * c.b3;
    let gxxy = -pi * c.a3 + qi * c.b3;

    let rx = gx * ig;
    let ry = gy * ig;
    let rg = gxx * ig;
    let rxy = gxy * ig;
    let cx = rg - rx * rx;
    let cy = rg - ry * ry;
    let value = g.ln() + 0.5 * vx * cx + 0.5 * vy * cy;
    if value > 0.0 {
        return MissingTerm {
            guarded: true,
            ..Default::default()
        };
    }

    let h3 = gxxx * ig;
    let k3 = gxxy * ig;
    let dx = rx
        + 0.5 * vx * (h3 - 3.0 * rg * rx + 2.0 * rx * rx * rx)
        + 0.5 * vy * (h3 - rg * rx - 2.0 * ry * rxy + 2.0 * ry * ry * rx);
    let dy = ry
        + 0.5 * vx * (k3 - rg * ry - 2.0 * rx * rxy + 2.0 * rx * rx * ry)
        + 0.5 * vy * (k3 - 3.0 * rg * ry + 2.0 * ry * ry * ry);

    // derivatives of g and its partials with respect to pi
    let rp = (c.su - c.sv) * ig;
    let rxp = (c.b1 - c.a1) * ig;
    let ryp = -(c.a1 + c.b1) * ig;
    let rgp = (c.b2 - c.a2) * ig;
    let dpi = rp
        + 0.5 * vx * (rgp - rg * rp - 2.0 * rx * (rxp - rx * rp))
        + 0.5 * vy * (rgp - rg * rp - 2.0 * ry * (ryp - ry * rp));

    MissingTerm {
        value,
        dx,
        dy,
        dvx: 0.5 * cx,
        dvy: 0.5 * cy,
        dpi,
        guarded,
    }
}

/// Delta-method approximation of `E[f(x, y)]` for `x ~ N(mean_x, var_x)` and
/// `y ~ N(mean_y, var_y)` independent, where `f` is the log-probability of the
/// cell state `kind` under block probability `pi_ql` and global effect `mu`.
///
/// The probability of a missing cell is floored at `1e-300` before the log
/// and its expansion is capped at zero.
pub fn delta_expectation(
    kind: DeltaKind,
    pi_ql: f64,
    mu: f64,
    mean_x: f64,
    var_x: f64,
    mean_y: f64,
    var_y: f64,
) -> Result<f64> {
    if !(pi_ql > 0.0 && pi_ql < 1.0) {
        return Err(LbmError::Domain(format!("pi = {pi_ql} outside (0, 1)")));
    }
    if !(var_x >= 0.0 && var_y >= 0.0) {
        return Err(LbmError::Domain("variances must be nonnegative".into()));
    }
    if ![mu, mean_x, mean_y, var_x, var_y].iter().all(|v| v.is_finite()) {
        return Err(LbmError::Domain("arguments must be finite".into()));
    }
    let c = CellLogistics::new(mu, mean_x, mean_y);
    Ok(match kind {
        DeltaKind::One => pi_ql.ln() + observed_one(&c, var_x + var_y).value,
        DeltaKind::Zero => (1.0 - pi_ql).ln() + observed_zero(&c, var_x + var_y).value,
        DeltaKind::Missing => missing_value(&c, pi_ql, var_x, var_y).0,
    })
}
