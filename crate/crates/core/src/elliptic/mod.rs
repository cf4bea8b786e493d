//! Radial semilinear Dirichlet problems −Δv + β(v) = f on B_R and the
//! implicit step of the filtration equation.

mod nonlinearity;
mod step;

pub use nonlinearity::{Nonlinearity, NonlinearitySpec};
pub use step::{
    discrete_step, elliptic_concentration_check, elliptic_concentration_check_with, implicit_step,
    ConcentrationStepReport, StepOutcome,
};

use crate::expr::{EvalDomainError, ParseError};
use crate::manifold::{ManifoldError, ModelManifold};
use crate::quad::{bracketed_root, gauss_legendre, integrate};
use crate::radial::{fmt17, RadialError, RadialFunction};
use std::fmt;
use std::io::Write;
use std::sync::{Arc, OnceLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EllipticError {
    #[error("shooting bracket not found: v(R) keeps its sign up to |α| = {alpha}")]
    ShootingBracketFailed { alpha: f64 },
    #[error("no convergence after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("φ is not strictly increasing; regularize it first")]
    NotBijective,
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("f⋆ ≺ f̄ fails at grid scale (min margin {min_margin})")]
    PreconditionOrderFails { min_margin: f64 },
    #[error("invalid nonlinearity: {0}")]
    InvalidNonlinearity(String),
    #[error("ρ = {rho} is outside the range of φ (ℓ = {ell})")]
    OutsideRange { rho: f64, ell: f64 },
    #[error("invalid datum: {0}")]
    InvalidDatum(String),
    #[error("non-finite value during the solve")]
    NonFinite,
    #[error(transparent)]
    Radial(#[from] RadialError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalDomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Nondecreasing β with β(0) = 0, and optionally its primitive B.
#[derive(Clone)]
pub struct Beta {
    func: RealFn,
    primitive: Option<RealFn>,
    pub lipschitz_bound: Option<f64>,
    pub inf_derivative: Option<f64>,
}

impl fmt::Debug for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Beta")
            .field("lipschitz_bound", &self.lipschitz_bound)
            .field("inf_derivative", &self.inf_derivative)
            .finish_non_exhaustive()
    }
}

impl Beta {
    pub fn zero() -> Self {
        Beta::linear(0.0)
    }

    /// β(v) = c·v.
    pub fn linear(c: f64) -> Self {
        Beta {
            func: Arc::new(move |v| c * v),
            primitive: Some(Arc::new(move |v| 0.5 * c * v * v)),
            lipschitz_bound: Some(c),
            inf_derivative: Some(c),
        }
    }

    pub fn from_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Beta { func: Arc::new(f), primitive: None, lipschitz_bound: None, inf_derivative: None }
    }

    pub fn with_primitive(mut self, b: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.primitive = Some(Arc::new(b));
        self
    }

    pub fn with_bounds(mut self, inf_derivative: Option<f64>, lipschitz_bound: Option<f64>) -> Self {
        self.inf_derivative = inf_derivative;
        self.lipschitz_bound = lipschitz_bound;
        self
    }

    /// β(v) = φₗ⁻¹(v)/h, the nonlinearity of one implicit step written for v = φ(u).
    pub fn from_nonlinearity(phi: &Nonlinearity, h: f64) -> Self {
        let phi = phi.clone();
        Beta::from_fn(move |v| {
            let s = v.signum();
            s * phi.phi_inv_left(v.abs()).unwrap_or(f64::NAN) / h
        })
    }

    pub fn beta(&self, v: f64) -> f64 {
        (self.func)(v)
    }

    /// B(v) = ∫₀ᵛ β.
    pub fn big_b(&self, v: f64) -> f64 {
        match &self.primitive {
            Some(b) => b(v),
            None => integrate(|s| self.beta(s), 0.0, v, 1e-15, 1e-12).value,
        }
    }
}

fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

#[derive(Debug, Clone)]
pub struct EllipticSolution {
    pub v: RadialFunction,
    /// v′ at the nodes
    pub dv: Vec<f64>,
    pub alpha: f64,
    /// |−ωₙψⁿ⁻¹v′(r) + ∫_{B_r}(β(v) − f)dV| per node
    pub residuals: Vec<f64>,
    pub residual: f64,
    /// 1 + max_r ∫_{B_r}(|β(v)| + |f|)dV
    pub residual_scale: f64,
    pub iterations: usize,
}

impl EllipticSolution {
    /// CSV with header `r,v,residual`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), EllipticError> {
        writeln!(w, "r,v,residual")?;
        for ((r, v), e) in self.v.grid().nodes().iter().zip(self.v.values()).zip(&self.residuals) {
            writeln!(w, "{},{},{}", fmt17(*r), fmt17(*v), fmt17(*e))?;
        }
        Ok(())
    }

    /// ∫ g·v dV with v reconstructed by cubic Hermite interpolation in each cell.
    pub fn integral_against(&self, g: &RadialFunction) -> f64 {
        let grid = self.v.grid();
        let (r, vv, gv) = (grid.nodes(), self.v.values(), g.values());
        let (x, wt) = gl16();
        let mut total = 0.0;
        for (j, cell) in grid.cells().iter().enumerate() {
            let h = r[j + 1] - r[j];
            let ends = [vv[j], vv[j + 1], self.dv[j] * h, self.dv[j + 1] * h];
            for i in 0..x.len() {
                let t = 0.5 * (x[i] + 1.0);
                let gg = gv[j] + (gv[j + 1] - gv[j]) * t;
                total += 0.5 * wt[i] * cell.density(t) * gg * hermite(ends, t);
            }
        }
        total
    }
}

fn hermite([p0, p1, m0, m1]: [f64; 4], t: f64) -> f64 {
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * p0 + (t3 - 2.0 * t2 + t) * m0 + (-2.0 * t3 + 3.0 * t2) * p1 + (t3 - t2) * m1
}

struct Shooter<'a> {
    beta: &'a Beta,
    f: &'a RadialFunction,
    nodes: &'a [f64],
    dens: Vec<f64>,
    dens_mid: Vec<f64>,
    n: f64,
    omega: f64,
}

impl<'a> Shooter<'a> {
    fn new(beta: &'a Beta, f: &'a RadialFunction) -> Result<Self, EllipticError> {
        let grid = f.grid();
        let m = grid.manifold();
        let nodes = grid.nodes();
        let dens = nodes.iter().map(|&r| m.density(r)).collect::<Result<Vec<_>, _>>()?;
        let dens_mid = nodes.windows(2).map(|p| m.density(0.5 * (p[0] + p[1]))).collect::<Result<Vec<_>, _>>()?;
        Ok(Shooter { beta, f, nodes, dens, dens_mid, n: m.n() as f64, omega: m.omega_n() })
    }

    /// Integrates (v, w = ψⁿ⁻¹v′) outward from v(0) = α.
    fn shoot(&self, alpha: f64) -> (Vec<f64>, Vec<f64>) {
        let (r, fv) = (self.nodes, self.f.values());
        let m = r.len() - 1;
        let mut v = vec![0.0; m + 1];
        let mut w = vec![0.0; m + 1];
        v[0] = alpha;
        // series start on the pole cell: w ≈ ∫₀ʳ ψⁿ⁻¹(β(α) − f), v ≈ α + ∫ w/rⁿ⁻¹
        let cell = &self.f.grid().cells()[0];
        let h0 = r[1];
        let c = self.beta.beta(alpha) - fv[0];
        let f1 = (fv[1] - fv[0]) / h0;
        let n = self.n;
        v[1] = alpha + c * h0 * h0 / (2.0 * n) - f1 * h0.powi(3) / (3.0 * (n + 1.0));
        w[1] = (c * cell.m0 - f1 * h0 * cell.m1) / self.omega;
        for j in 1..m {
            let h = r[j + 1] - r[j];
            let (d0, dm, d1) = (self.dens[j], self.dens_mid[j], self.dens[j + 1]);
            let (f0, fm, f2) = (fv[j], 0.5 * (fv[j] + fv[j + 1]), fv[j + 1]);
            let rhs = |vv: f64, ww: f64, d: f64, ff: f64| (ww / d, d * (self.beta.beta(vv) - ff));
            let (k1v, k1w) = rhs(v[j], w[j], d0, f0);
            let (k2v, k2w) = rhs(v[j] + 0.5 * h * k1v, w[j] + 0.5 * h * k1w, dm, fm);
            let (k3v, k3w) = rhs(v[j] + 0.5 * h * k2v, w[j] + 0.5 * h * k2w, dm, fm);
            let (k4v, k4w) = rhs(v[j] + h * k3v, w[j] + h * k3w, d1, f2);
            v[j + 1] = v[j] + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            w[j + 1] = w[j] + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
        }
        (v, w)
    }

    fn end_value(&self, alpha: f64) -> f64 {
        let (v, _) = self.shoot(alpha);
        v[v.len() - 1]
    }
}

/// Solves −v″ − (n−1)(ψ′/ψ)v′ + β(v) = f, v′(0) = 0, v(R) = 0 by shooting on α = v(0).
///
/// The manifold and R are those of `f`'s grid. v(R) is nondecreasing in α
/// when β is nondecreasing, so α is bracketed by doubling and then located
/// by a safeguarded secant iteration.
pub fn solve_semilinear(beta: &Beta, f: &RadialFunction) -> Result<EllipticSolution, EllipticError> {
    if f.values().iter().any(|v| !v.is_finite()) {
        return Err(EllipticError::InvalidDatum("f must be finite".into()));
    }
    let shooter = Shooter::new(beta, f)?;
    let sup = f.sup_abs();
    let (alpha, iterations) = if sup == 0.0 {
        (0.0, 0)
    } else {
        let diam = 2.0 * f.grid().outer_radius();
        let start = sup * diam * diam;
        let mut lo = if f.values().iter().all(|&v| v >= 0.0) { 0.0 } else { -start };
        let mut hi = start;
        let mut doublings = 0;
        while shooter.end_value(hi) < 0.0 {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > 60 || !hi.is_finite() {
                return Err(EllipticError::ShootingBracketFailed { alpha: hi });
            }
        }
        doublings = 0;
        while shooter.end_value(lo) > 0.0 {
            hi = lo.min(hi);
            lo = if lo == 0.0 { -start } else { 2.0 * lo };
            doublings += 1;
            if doublings > 60 || !lo.is_finite() {
                return Err(EllipticError::ShootingBracketFailed { alpha: lo });
            }
        }
        let root = bracketed_root(|a| shooter.end_value(a), lo, hi, 1e-15, 1e-300, 400)
            .ok_or(EllipticError::NonConvergence { iterations: 400 })?;
        (root.x, root.iterations)
    };
    let (mut v, w) = shooter.shoot(alpha);
    let last = v.len() - 1;
    v[last] = 0.0;
    if v.iter().chain(&w).any(|x| !x.is_finite()) {
        return Err(EllipticError::NonFinite);
    }
    let dv: Vec<f64> = w.iter().zip(&shooter.dens).map(|(&ww, &d)| if d > 0.0 { ww / d } else { 0.0 }).collect();
    let v = f.with_values(v)?;
    let (residuals, residual_scale) = integral_identity(beta, f, &v, &w, &dv);
    let residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(EllipticSolution { v, dv, alpha, residuals, residual, residual_scale, iterations })
}

/// Defect of −ωₙψⁿ⁻¹v′(r) + ∫_{B_r}(β(v) − f)dV at every node, with v
/// reconstructed by cubic Hermite interpolation inside each cell.
fn integral_identity(beta: &Beta, f: &RadialFunction, v: &RadialFunction, w: &[f64], dv: &[f64]) -> (Vec<f64>, f64) {
    let grid = f.grid();
    let (r, vv, fv) = (grid.nodes(), v.values(), f.values());
    let omega = grid.manifold().omega_n();
    let (x, wt) = gl16();
    let mut acc = 0.0;
    let mut abs_acc = 0.0;
    let mut scale: f64 = 0.0;
    let mut out = vec![0.0; r.len()];
    for (j, cell) in grid.cells().iter().enumerate() {
        let h = r[j + 1] - r[j];
        let ends = [vv[j], vv[j + 1], dv[j] * h, dv[j + 1] * h];
        for i in 0..x.len() {
            let t = 0.5 * (x[i] + 1.0);
            let val = hermite(ends, t);
            let ff = fv[j] + (fv[j + 1] - fv[j]) * t;
            let b = beta.beta(val);
            let d = 0.5 * wt[i] * cell.density(t);
            acc += (b - ff) * d;
            abs_acc += (b.abs() + ff.abs()) * d;
        }
        scale = scale.max(abs_acc);
        out[j + 1] = (acc - omega * w[j + 1]).abs();
    }
    (out, 1.0 + scale)
}

/// min −v′(r) over nodes with r ≥ 2·(node spacing).
pub fn hopf_strict_decrease_check(sol: &EllipticSolution, f: &RadialFunction) -> Result<f64, EllipticError> {
    if f.sup_abs() == 0.0 || !f.is_nonincreasing(0.0) {
        return Err(EllipticError::NotApplicable("f must be nontrivial and radially nonincreasing".into()));
    }
    let eps = 2.0 * sol.v.grid().max_spacing();
    Ok(sol
        .v
        .grid()
        .nodes()
        .iter()
        .zip(&sol.dv)
        .filter(|(&r, _)| r >= eps * (1.0 - 1e-9))
        .map(|(_, &d)| -d)
        .fold(f64::INFINITY, f64::min))
}

/// c_R = (n−1)·sup_{[0,R]}((ψ″ψ − ψ′²)/ψ²)⁺ + 1, sampled at 1024 radii.
pub fn c_r(m: &ModelManifold, r_outer: f64) -> Result<f64, EllipticError> {
    let top = if r_outer >= m.r_dom() { m.r_dom() * (1.0 - 1e-9) } else { r_outer };
    let mut sup: f64 = 0.0;
    for i in 1..=1024 {
        let r = top * i as f64 / 1024.0;
        let j = m.psi(r)?;
        sup = sup.max((j.d2 * j.v - j.d1 * j.d1) / (j.v * j.v));
    }
    Ok((m.n() as f64 - 1.0) * sup + 1.0)
}
