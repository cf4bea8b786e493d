//! One implicit step u − h·Δφ(u) = w of the filtration equation on B_R with
//! homogeneous Dirichlet data, discretised by lumped P1 elements in u.

use super::{EllipticError, Nonlinearity};
use crate::radial::{
    concentration_compare, concentration_compare_with, CompareOptions, ConcentrationReport, RadialFunction,
};
use serde::Serialize;

const MAX_NEWTON: usize = 200;

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub u: RadialFunction,
    pub newton_iterations: usize,
}

/// Solves W(u − w) + h·K·φ(u) = 0 for the nodal vector u with u(R) = 0.
///
/// W are the lumped node volumes and K the P1 stiffness matrix of the radial
/// Laplacian. φ is extended oddly, so the discrete solution is unique and the
/// system is an M-matrix problem: it preserves sign, order and, on monotone
/// data, radial monotonicity.
pub fn implicit_step(
    phi: &Nonlinearity,
    h: f64,
    w_prev: &RadialFunction,
    guess: Option<&[f64]>,
) -> Result<StepOutcome, EllipticError> {
    if !phi.is_strictly_increasing() {
        return Err(EllipticError::NotBijective);
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(EllipticError::InvalidDatum(format!("step size must be positive, got {h}")));
    }
    let grid = w_prev.grid();
    let (r, wv) = (grid.nodes(), w_prev.values());
    if wv.iter().any(|v| !v.is_finite()) {
        return Err(EllipticError::InvalidDatum("datum must be finite".into()));
    }
    let m = r.len() - 1;
    let weight = &grid.weights()[..m];
    let stiff: Vec<f64> = grid.cells().iter().enumerate().map(|(j, c)| h * c.m0 / (r[j + 1] - r[j]).powi(2)).collect();
    let mut u: Vec<f64> = match guess {
        Some(g) if g.len() == m + 1 => g[..m].to_vec(),
        _ => wv[..m].to_vec(),
    };
    let mut p = vec![0.0; m];
    let residual = |u: &[f64], p: &mut [f64], out: &mut [f64]| -> (f64, f64) {
        for i in 0..m {
            p[i] = phi.phi_odd(u[i]);
        }
        let (mut norm, mut scale) = (0.0, 0.0);
        for i in 0..m {
            let mut flux = 0.0;
            if i > 0 {
                flux += stiff[i - 1] * (p[i] - p[i - 1]);
            }
            let right = if i + 1 < m { p[i + 1] } else { 0.0 };
            flux += stiff[i] * (p[i] - right);
            out[i] = weight[i] * (u[i] - wv[i]) + flux;
            norm += out[i].abs();
            scale += weight[i] * (u[i].abs() + wv[i].abs()) + stiff[i] * (p[i].abs() + right.abs());
            if i > 0 {
                scale += stiff[i - 1] * (p[i].abs() + p[i - 1].abs());
            }
        }
        (norm, scale)
    };
    let mut f = vec![0.0; m];
    let (mut norm, mut scale) = residual(&u, &mut p, &mut f);
    let (mut sub, mut diag, mut sup, mut delta) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut trial = vec![0.0; m];
    let mut ftrial = vec![0.0; m];
    let mut iterations = 0;
    while norm > 64.0 * f64::EPSILON * scale {
        if iterations >= MAX_NEWTON || !norm.is_finite() {
            return Err(EllipticError::NonConvergence { iterations });
        }
        iterations += 1;
        for i in 0..m {
            let d = phi.dphi_odd(u[i]);
            let left = if i > 0 { stiff[i - 1] } else { 0.0 };
            diag[i] = weight[i] + (left + stiff[i]) * d;
            if i > 0 {
                sup[i - 1] = -stiff[i - 1] * d;
            }
            if i + 1 < m {
                sub[i + 1] = -stiff[i] * d;
            }
        }
        thomas(&sub, &diag, &sup, &f, &mut delta);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..m {
                trial[i] = u[i] - step * delta[i];
            }
            let (tn, ts) = residual(&trial, &mut p, &mut ftrial);
            if tn.is_finite() && (tn <= (1.0 - 1e-4 * step) * norm || tn <= 64.0 * f64::EPSILON * ts) {
                std::mem::swap(&mut u, &mut trial);
                std::mem::swap(&mut f, &mut ftrial);
                norm = tn;
                scale = ts;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // the residual sits at its roundoff floor
            let bound = delta.iter().map(|d| d.abs()).fold(0.0, f64::max);
            let size = u.iter().map(|x| x.abs()).fold(0.0, f64::max);
            if bound <= 1e-12 * size.max(f64::MIN_POSITIVE) {
                break;
            }
            return Err(EllipticError::NonConvergence { iterations });
        }
    }
    u.push(0.0);
    Ok(StepOutcome { u: w_prev.with_values(u)?, newton_iterations: iterations })
}

/// Tridiagonal solve with sub-diagonal `a`, diagonal `b`, super-diagonal `c`.
fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64], x: &mut [f64]) {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let den = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / den;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / den;
    }
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
}

/// The solution u of u − h·Δφ(u) = w on the grid of `w_prev`.
pub fn discrete_step(phi: &Nonlinearity, h: f64, w_prev: &RadialFunction) -> Result<RadialFunction, EllipticError> {
    Ok(implicit_step(phi, h, w_prev, None)?.u)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationStepReport {
    /// margins of u ≺ ū for the two step solutions
    pub report: ConcentrationReport,
    /// (∫_{B_r} u⋆ − ∫_{B_r} ū)/h per node
    pub a: Vec<f64>,
    pub a_max: f64,
}

pub fn elliptic_concentration_check(
    phi: &Nonlinearity,
    h: f64,
    f: &RadialFunction,
    f_bar: &RadialFunction,
) -> Result<ConcentrationStepReport, EllipticError> {
    elliptic_concentration_check_with(phi, h, f, f_bar, CompareOptions::default())
}

/// Solves one step from `f` and from the nonincreasing `f_bar` with f⋆ ≺ f̄ and
/// reports the concentration margins of the two solutions.
pub fn elliptic_concentration_check_with(
    phi: &Nonlinearity,
    h: f64,
    f: &RadialFunction,
    f_bar: &RadialFunction,
    opts: CompareOptions,
) -> Result<ConcentrationStepReport, EllipticError> {
    if !f.is_nonnegative() || !f_bar.is_nonnegative() {
        return Err(EllipticError::InvalidDatum("data must be nonnegative".into()));
    }
    if !f_bar.is_nonincreasing(0.0) {
        return Err(EllipticError::InvalidDatum("f̄ must be radially nonincreasing".into()));
    }
    let pre = concentration_compare(f, f_bar)?;
    if pre.min_margin < -pre.tol_report {
        return Err(EllipticError::PreconditionOrderFails { min_margin: pre.min_margin });
    }
    let u = discrete_step(phi, h, f)?;
    let u_bar = discrete_step(phi, h, &f_bar.resample(f.grid().clone())?)?;
    let report = concentration_compare_with(&u, &u_bar, opts)?;
    let a: Vec<f64> = report.margins.iter().map(|m| -m / h).collect();
    let a_max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ConcentrationStepReport { report, a, a_max })
}
