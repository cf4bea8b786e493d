//! Implicit Euler evolution of the filtration equation ∂ₜu = Δφ(u) on B_R
//! with homogeneous Dirichlet data.

use crate::elliptic::{implicit_step, solve_semilinear, Beta, EllipticError, Nonlinearity};
use crate::manifold::ModelManifold;
use crate::polya::{dirichlet_energy, parallel_map};
use crate::radial::{fmt17, lp_norm, RadialError, RadialFunction, RadialGrid};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

/// k used when φ has flat parts and no regularization is requested.
pub const DEFAULT_K_REG: f64 = 64.0;

#[derive(Debug, Error)]
pub enum ParabolicError {
    #[error("step {step}: L{p} norm grew from {before} to {after}")]
    StepRejected { step: usize, p: f64, before: f64, after: f64 },
    #[error("horizon {t} is not a positive multiple of the step {h}")]
    InvalidHorizon { t: f64, h: f64 },
    #[error("invalid datum: {0}")]
    InvalidDatum(String),
    #[error("invalid radii: {0}")]
    InvalidRadii(String),
    #[error(transparent)]
    Elliptic(#[from] EllipticError),
    #[error(transparent)]
    Radial(#[from] RadialError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy)]
pub struct EvolveOptions {
    /// Regularization parameter for φ. Applied whenever set, and defaulted to
    /// [`DEFAULT_K_REG`] when φ is not strictly increasing.
    pub k_reg: Option<f64>,
    /// Compute the H⁻¹ norm of every increment (one extra linear solve per step).
    pub hminus1: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { k_reg: None, hminus1: true }
    }
}

/// Per-state diagnostics. Integrals use the lumped node volumes, for which
/// the discrete flow laws hold exactly.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub step: usize,
    pub time: f64,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub dirichlet_energy_phi_u: f64,
    pub phi_integral: f64,
    /// ‖(uᵢ − uᵢ₋₁)/h‖_{H⁻¹}; NaN at step 0 or when disabled
    pub hminus1_rate: f64,
    /// √(∫Φ(u₀)/tᵢ)
    pub hminus1_bound: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<RadialFunction>,
    /// The nonlinearity actually used, after regularization.
    pub phi: Nonlinearity,
    pub h: f64,
    pub diagnostics: Vec<Diagnostics>,
    pub newton_iterations: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyInequality {
    /// Σᵢ h·∫|∇φ(uᵢ)|² + ∫Φ(u_N)
    pub lhs: f64,
    /// ∫Φ(u₀)
    pub rhs: f64,
    pub tol: f64,
    pub holds: bool,
}

/// Tolerance for energy-sized diagnostics: 1e−7·(1 + ∫Φ(u₀)).
pub fn diagnostics_tol(phi_integral0: f64) -> f64 {
    1e-7 * (1.0 + phi_integral0)
}

fn lumped_phi_integral(phi: &Nonlinearity, u: &RadialFunction) -> f64 {
    u.grid().weights().iter().zip(u.values()).map(|(w, &x)| w * phi.big_phi(x.max(0.0))).sum()
}

fn diagnostics(phi: &Nonlinearity, step: usize, time: f64, u: &RadialFunction) -> Result<Diagnostics, ParabolicError> {
    let pu = u.map(|x| phi.phi(x.max(0.0)))?;
    Ok(Diagnostics {
        step,
        time,
        l1: lp_norm(u, 1.0),
        l2: lp_norm(u, 2.0),
        linf: lp_norm(u, f64::INFINITY),
        dirichlet_energy_phi_u: dirichlet_energy(&pu),
        phi_integral: lumped_phi_integral(phi, u),
        hminus1_rate: f64::NAN,
        hminus1_bound: f64::NAN,
    })
}

impl Trajectory {
    pub fn final_state(&self) -> &RadialFunction {
        &self.states[self.states.len() - 1]
    }

    pub fn tol(&self) -> f64 {
        diagnostics_tol(self.diagnostics[0].phi_integral)
    }

    pub fn energy_inequality(&self) -> EnergyInequality {
        let d = &self.diagnostics;
        let dissipated: f64 = d[1..].iter().map(|x| self.h * x.dirichlet_energy_phi_u).sum();
        let lhs = dissipated + d[d.len() - 1].phi_integral;
        let tol = self.tol();
        EnergyInequality { lhs, rhs: d[0].phi_integral, tol, holds: lhs <= d[0].phi_integral + tol }
    }

    /// Largest increase of ∫|∇φ(uᵢ)|² between consecutive steps i ≥ 1.
    pub fn energy_increase(&self) -> f64 {
        self.diagnostics[1..]
            .windows(2)
            .map(|w| w[1].dirichlet_energy_phi_u - w[0].dirichlet_energy_phi_u)
            .fold(0.0, f64::max)
    }

    /// Steps whose H⁻¹ rate exceeds √(∫Φ(u₀)/tᵢ) + tol.
    pub fn hminus1_violations(&self) -> Vec<usize> {
        let tol = self.tol();
        self.diagnostics.iter().filter(|d| d.hminus1_rate > d.hminus1_bound + tol).map(|d| d.step).collect()
    }

    /// CSV with header `step,time,L1,L2,Linf,dirichlet_energy_phi_u,Phi_integral,hminus1_rate`.
    pub fn write_diagnostics<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,time,L1,L2,Linf,dirichlet_energy_phi_u,Phi_integral,hminus1_rate")?;
        for d in &self.diagnostics {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                d.step,
                fmt17(d.time),
                fmt17(d.l1),
                fmt17(d.l2),
                fmt17(d.linf),
                fmt17(d.dirichlet_energy_phi_u),
                fmt17(d.phi_integral),
                fmt17(d.hminus1_rate)
            )?;
        }
        Ok(())
    }

    /// Writes `<prefix>_<i>.csv` with columns `r,u` for every `stride`-th state
    /// and the final one, plus `<prefix>_diagnostics.csv`.
    pub fn write_csvs(&self, dir: &Path, prefix: &str, stride: usize) -> Result<Vec<PathBuf>, ParabolicError> {
        let mut out = Vec::new();
        for i in output_indices(self.states.len(), stride) {
            let path = dir.join(format!("{prefix}_{i}.csv"));
            let mut buf = Vec::new();
            self.states[i].write_csv(&mut buf)?;
            std::fs::write(&path, buf)?;
            out.push(path);
        }
        let path = dir.join(format!("{prefix}_diagnostics.csv"));
        let mut buf = Vec::new();
        self.write_diagnostics(&mut buf)?;
        std::fs::write(&path, buf)?;
        out.push(path);
        Ok(out)
    }
}

/// 0, stride, 2·stride, … and the last index.
pub fn output_indices(len: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut idx: Vec<usize> = (0..len).step_by(stride).collect();
    if idx.last() != Some(&(len - 1)) {
        idx.push(len - 1);
    }
    idx
}

/// Number of steps N with N·h = T.
pub fn step_count(h: f64, t: f64) -> Result<usize, ParabolicError> {
    if !(h > 0.0 && t >= 0.0 && h.is_finite() && t.is_finite()) {
        return Err(ParabolicError::InvalidHorizon { t, h });
    }
    let n = (t / h).round();
    if (n * h - t).abs() > 1e-9 * t.max(h) {
        return Err(ParabolicError::InvalidHorizon { t, h });
    }
    Ok(n as usize)
}

/// The φ used for stepping: regularized when requested or when φ has flat parts.
pub fn effective_nonlinearity(phi: &Nonlinearity, k_reg: Option<f64>) -> Result<Nonlinearity, ParabolicError> {
    Ok(match k_reg {
        Some(k) => phi.regularize(k)?,
        None if !phi.is_strictly_increasing() => phi.regularize(DEFAULT_K_REG)?,
        None => phi.clone(),
    })
}

/// Evolves `u0` up to time `t_final` on the grid of `u0` (which fixes the manifold and R).
pub fn evolve(
    phi: &Nonlinearity,
    u0: &RadialFunction,
    h: f64,
    t_final: f64,
    opts: EvolveOptions,
) -> Result<Trajectory, ParabolicError> {
    evolve_steps(phi, u0, h, step_count(h, t_final)?, opts)
}

pub fn evolve_steps(
    phi: &Nonlinearity,
    u0: &RadialFunction,
    h: f64,
    steps: usize,
    opts: EvolveOptions,
) -> Result<Trajectory, ParabolicError> {
    if !u0.is_nonnegative() || u0.values().iter().any(|v| !v.is_finite()) {
        return Err(ParabolicError::InvalidDatum("u₀ must be finite and nonnegative".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(ParabolicError::InvalidHorizon { t: steps as f64 * h, h });
    }
    let phi = effective_nonlinearity(phi, opts.k_reg)?;
    let mut u0 = u0.clone();
    // the boundary node carries the Dirichlet value
    let mut vals = u0.values().to_vec();
    let last = vals.len() - 1;
    vals[last] = 0.0;
    u0 = u0.with_values(vals)?;
    let d0 = diagnostics(&phi, 0, 0.0, &u0)?;
    let phi0 = d0.phi_integral;
    let tol_norm = |x: f64| 1e-7 * (1.0 + x);
    let mut times = vec![0.0];
    let mut states = vec![u0];
    let mut diags = vec![d0];
    let mut iters = vec![0];
    for i in 1..=steps {
        let prev = &states[i - 1];
        let out = implicit_step(&phi, h, prev, Some(prev.values()))?;
        let time = i as f64 * h;
        let mut d = diagnostics(&phi, i, time, &out.u)?;
        let before = &diags[i - 1];
        for (p, a, b) in [(1.0, before.l1, d.l1), (2.0, before.l2, d.l2), (f64::INFINITY, before.linf, d.linf)] {
            if b > a + tol_norm(a) {
                return Err(ParabolicError::StepRejected { step: i, p, before: a, after: b });
            }
        }
        d.hminus1_bound = (phi0 / time).sqrt();
        if opts.hminus1 {
            let rate =
                out.u.with_values(out.u.values().iter().zip(prev.values()).map(|(a, b)| (a - b) / h).collect())?;
            d.hminus1_rate = hminus1_norm(&rate)?;
        }
        times.push(time);
        states.push(out.u);
        diags.push(d);
        iters.push(out.newton_iterations);
    }
    Ok(Trajectory { times, states, phi, h, diagnostics: diags, newton_iterations: iters })
}

/// ‖g‖_{H⁻¹(B_R)} = √(∫ g·w) where −Δw = g, w(R) = 0.
pub fn hminus1_norm(g: &RadialFunction) -> Result<f64, ParabolicError> {
    if g.sup_abs() == 0.0 {
        return Ok(0.0);
    }
    let sol = solve_semilinear(&Beta::zero(), g)?;
    Ok(sol.integral_against(g).max(0.0).sqrt())
}

#[derive(Debug, Clone)]
pub struct NestedLimit {
    pub radii: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
    /// max over steps, consecutive radii and shared nodes of u_R − u_{R′}
    pub max_violation: f64,
    pub tol: f64,
    pub monotone: bool,
    /// ‖u_{R′}(T) − u_R(T)‖₁ on B_{R′} for consecutive radii
    pub l1_increments: Vec<f64>,
}

/// Evolves the same datum on nested balls B_R with a common node spacing and
/// checks that the solutions increase with R.
#[allow(clippy::too_many_arguments)]
pub fn nested_domain_limit(
    m: Arc<ModelManifold>,
    phi: &Nonlinearity,
    u0: &RadialFunction,
    h: f64,
    steps: usize,
    radii: &[f64],
    spacing: f64,
    opts: EvolveOptions,
    jobs: usize,
) -> Result<NestedLimit, ParabolicError> {
    if radii.is_empty() || radii.windows(2).any(|w| w[1] < w[0]) {
        return Err(ParabolicError::InvalidRadii("radii must be a nondecreasing nonempty list".into()));
    }
    if !(spacing > 0.0) {
        return Err(ParabolicError::InvalidRadii(format!("spacing must be positive, got {spacing}")));
    }
    let mut grids = Vec::with_capacity(radii.len());
    for &r in radii {
        let cells = (r / spacing).round();
        if cells < 2.0 || (cells * spacing - r).abs() > 1e-9 * r {
            return Err(ParabolicError::InvalidRadii(format!("R = {r} is not a multiple of the spacing {spacing}")));
        }
        let nodes: Vec<f64> =
            (0..=cells as usize).map(|j| if j == cells as usize { r } else { j as f64 * spacing }).collect();
        grids.push(RadialGrid::from_nodes(m.clone(), nodes)?);
    }
    if u0.value_at(radii[0]) != 0.0 {
        return Err(ParabolicError::InvalidDatum("u₀ must be supported inside the smallest ball".into()));
    }
    let trajectories = parallel_map(radii.len(), jobs, |i| {
        let data = u0.resample(grids[i].clone())?;
        evolve_steps(phi, &data, h, steps, opts)
    })?;
    let tol = trajectories[0].tol();
    let mut max_violation = f64::NEG_INFINITY;
    let mut l1_increments = Vec::new();
    for pair in trajectories.windows(2) {
        let (small, large) = (&pair[0], &pair[1]);
        for (a, b) in small.states.iter().zip(&large.states) {
            for (x, y) in a.values().iter().zip(b.values()) {
                max_violation = max_violation.max(x - y);
            }
        }
        let (a, b) = (small.final_state().values(), large.final_state());
        let diff: Vec<f64> = b.values().iter().enumerate().map(|(j, y)| y - a.get(j).copied().unwrap_or(0.0)).collect();
        l1_increments.push(lp_norm(&b.with_values(diff)?, 1.0));
    }
    let max_violation = max_violation.max(0.0);
    Ok(NestedLimit {
        radii: radii.to_vec(),
        trajectories,
        max_violation,
        tol,
        monotone: max_violation <= tol,
        l1_increments,
    })
}

/// Barenblatt profile of ∂ₜu = Δ(uᵐ) on ℝⁿ:
/// t^{−α}(C − k r² t^{−2α/n})₊^{1/(m−1)} with α = n/(n(m−1)+2), k = α(m−1)/(2mn).
pub fn barenblatt(n: usize, m: f64, c: f64, r: f64, t: f64) -> f64 {
    let nf = n as f64;
    let alpha = nf / (nf * (m - 1.0) + 2.0);
    let k = alpha * (m - 1.0) / (2.0 * m * nf);
    let inner = c - k * r * r * t.powf(-2.0 * alpha / nf);
    t.powf(-alpha) * inner.max(0.0).powf(1.0 / (m - 1.0))
}

/// Support radius √(C/k)·t^{α/n} of the Barenblatt profile.
pub fn barenblatt_radius(n: usize, m: f64, c: f64, t: f64) -> f64 {
    let nf = n as f64;
    let alpha = nf / (nf * (m - 1.0) + 2.0);
    let k = alpha * (m - 1.0) / (2.0 * m * nf);
    (c / k).sqrt() * t.powf(alpha / nf)
}

/// Largest node radius where u exceeds `frac`·max u.
pub fn support_radius(u: &RadialFunction, frac: f64) -> f64 {
    let cut = frac * u.sup_abs();
    u.grid().nodes().iter().zip(u.values()).filter(|(_, &v)| v > cut).map(|(&r, _)| r).fold(0.0, f64::max)
}
