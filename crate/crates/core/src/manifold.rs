//! Model manifolds `dr² + ψ(r)² g_{S^{n-1}}` described by their profile ψ.

use crate::expr::{parse_expression, EvalDomainError, Expr, Jet, ParseError};
use crate::quad::{bracketed_root, integrate};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    #[error("dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("profile is not positive at r = {0}")]
    NonPositiveProfile(f64),
    #[error("radius {r} outside the profile domain [0, {r_dom})")]
    DomainExceeded { r: f64, r_dom: f64 },
    #[error("volume {volume} is not below the total volume {total}")]
    VolumeExceedsManifold { volume: f64, total: f64 },
    #[error("parabolicity is undefined for a compact profile")]
    CompactProfile,
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("profile evaluation failed: {0}")]
    Eval(#[from] EvalDomainError),
}

/// Serializable description of a manifold, as found in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSpec {
    pub n: usize,
    pub profile: ProfileSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    Euclidean {},
    Hyperbolic {},
    Sphere {},
    Expression { psi: String },
    Table { r: Vec<f64>, psi: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Euclidean,
    Hyperbolic,
    Sphere,
    Expression,
    Table,
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl MonotoneCubic {
    /// Builds the interpolant; `start_slope` overrides the slope at the first knot.
    pub fn new(x: Vec<f64>, y: Vec<f64>, start_slope: Option<f64>) -> Result<Self, ManifoldError> {
        let k = x.len();
        if k < 3 || y.len() != k {
            return Err(ManifoldError::InvalidProfile("table needs at least 3 knots and matching columns".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(ManifoldError::InvalidProfile("table radii must be finite and strictly increasing".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let d: Vec<f64> = (0..k - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut m = vec![0.0; k];
        for i in 1..k - 1 {
            if d[i - 1] * d[i] > 0.0 {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
            let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
            if s * d0 <= 0.0 {
                0.0
            } else if d0 * d1 < 0.0 && s.abs() > 3.0 * d0.abs() {
                3.0 * d0
            } else {
                s
            }
        };
        m[0] = start_slope.unwrap_or_else(|| end(h[0], h[1], d[0], d[1]));
        m[k - 1] = end(h[k - 2], h[k - 3], d[k - 2], d[k - 3]);
        Ok(MonotoneCubic { x, y, m })
    }

    /// Slope estimate at the first knot from the data alone.
    pub fn data_start_slope(x: &[f64], y: &[f64]) -> f64 {
        let (h0, h1) = (x[1] - x[0], x[2] - x[1]);
        let (d0, d1) = ((y[1] - y[0]) / h0, (y[2] - y[1]) / h1);
        ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    }

    pub fn domain_end(&self) -> f64 {
        *self.x.last().unwrap_or(&0.0)
    }

    pub fn jet(&self, t: f64) -> Jet {
        let k = self.x.len();
        let i = match self.x.partition_point(|&xi| xi <= t) {
            0 => 0,
            p if p >= k => k - 2,
            p => p - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let (y0, y1, m0, m1) = (self.y[i], self.y[i + 1], self.m[i] * h, self.m[i + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let v =
            (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * m1;
        let d1 = (6.0 * s2 - 6.0 * s) * y0
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (-6.0 * s2 + 6.0 * s) * y1
            + (3.0 * s2 - 2.0 * s) * m1;
        let d2 = (12.0 * s - 6.0) * y0 + (6.0 * s - 4.0) * m0 + (-12.0 * s + 6.0) * y1 + (6.0 * s - 2.0) * m1;
        Jet { v, d1: d1 / h, d2: d2 / (h * h) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Euclidean,
    Hyperbolic,
    Sphere,
    Expression(Expr),
    Table(MonotoneCubic),
}

impl Profile {
    pub fn kind(&self) -> ProfileKind {
        match self {
            Profile::Euclidean => ProfileKind::Euclidean,
            Profile::Hyperbolic => ProfileKind::Hyperbolic,
            Profile::Sphere => ProfileKind::Sphere,
            Profile::Expression(_) => ProfileKind::Expression,
            Profile::Table(_) => ProfileKind::Table,
        }
    }

    fn jet(&self, r: f64) -> Result<Jet, EvalDomainError> {
        Ok(match self {
            Profile::Euclidean => Jet { v: r, d1: 1.0, d2: 0.0 },
            Profile::Hyperbolic => Jet { v: r.sinh(), d1: r.cosh(), d2: r.sinh() },
            Profile::Sphere => Jet { v: r.sin(), d1: r.cos(), d2: -r.sin() },
            Profile::Expression(e) => e.jet(r)?,
            Profile::Table(t) => t.jet(r),
        })
    }

    // 1 − ψ′², exact for the builtins so the orthogonal curvature does not cancel
    fn one_minus_dpsi_sq(&self, r: f64, j: &Jet) -> f64 {
        match self {
            Profile::Euclidean => 0.0,
            Profile::Hyperbolic => -r.sinh().powi(2),
            Profile::Sphere => r.sin().powi(2),
            _ => 1.0 - j.d1 * j.d1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Curvatures {
    pub k_rad: f64,
    pub k_perp: f64,
    pub ric_rad: f64,
    pub ric_perp: f64,
    pub scalar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmallBall {
    pub vol_approx: f64,
    pub area_approx: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Parabolicity {
    Parabolic,
    Nonparabolic,
    Inconclusive,
}

/// Area of the unit sphere `S^{n-1}` in `ℝⁿ`.
pub fn omega(n: usize) -> f64 {
    let (mut w, start) = if n.is_multiple_of(2) { (2.0 * PI, 2) } else { (2.0, 1) };
    let mut k = start;
    while k < n {
        w *= 2.0 * PI / k as f64;
        k += 2;
    }
    w
}

/// Truncated small-ball expansions of volume and area in terms of the scalar
/// curvature at the center.
pub fn smallball_expansion(s_center: f64, r: f64, n: usize) -> SmallBall {
    let nf = n as f64;
    let w = omega(n);
    SmallBall {
        vol_approx: w / nf * r.powi(n as i32) * (1.0 - s_center * r * r / (6.0 * (nf + 2.0))),
        area_approx: w * r.powi(n as i32 - 1) * (1.0 - s_center * r * r / (6.0 * nf)),
    }
}

const POSITIVITY_SAMPLES: usize = 2000;
const POSITIVITY_HORIZON: f64 = 20.0;
const TABLE_SLOPE_TOL: f64 = 1e-2;
const CURVATURE_EPS: f64 = 1e-4;

#[derive(Debug)]
pub struct ModelManifold {
    n: usize,
    profile: Profile,
    omega_n: f64,
    r_dom: f64,
    total: OnceLock<f64>,
}

impl Clone for ModelManifold {
    fn clone(&self) -> Self {
        ModelManifold {
            n: self.n,
            profile: self.profile.clone(),
            omega_n: self.omega_n,
            r_dom: self.r_dom,
            total: self.total.clone(),
        }
    }
}

impl ModelManifold {
    pub fn euclidean(n: usize) -> Result<Self, ManifoldError> {
        Self::new(n, Profile::Euclidean)
    }

    pub fn hyperbolic(n: usize) -> Result<Self, ManifoldError> {
        Self::new(n, Profile::Hyperbolic)
    }

    pub fn sphere(n: usize) -> Result<Self, ManifoldError> {
        Self::new(n, Profile::Sphere)
    }

    pub fn from_expression(n: usize, src: &str) -> Result<Self, ManifoldError> {
        let e = parse_expression(src)?;
        if e.variables().iter().any(|v| v != "r") {
            return Err(ManifoldError::InvalidProfile(format!("profile may only depend on r: {src}")));
        }
        Self::new(n, Profile::Expression(e))
    }

    pub fn from_table(n: usize, r: Vec<f64>, psi: Vec<f64>) -> Result<Self, ManifoldError> {
        if r.len() < 3 || psi.len() != r.len() {
            return Err(ManifoldError::InvalidProfile("table needs at least 3 knots and matching columns".into()));
        }
        if r[0] != 0.0 {
            return Err(ManifoldError::InvalidProfile("table radii must start at 0".into()));
        }
        let slope = MonotoneCubic::data_start_slope(&r, &psi);
        if (slope - 1.0).abs() > TABLE_SLOPE_TOL {
            return Err(ManifoldError::InvalidProfile(format!("table slope at the pole is {slope}, expected 1")));
        }
        Self::new(n, Profile::Table(MonotoneCubic::new(r, psi, Some(1.0))?))
    }

    pub fn from_spec(spec: &ManifoldSpec) -> Result<Self, ManifoldError> {
        match &spec.profile {
            ProfileSpec::Euclidean {} => Self::euclidean(spec.n),
            ProfileSpec::Hyperbolic {} => Self::hyperbolic(spec.n),
            ProfileSpec::Sphere {} => Self::sphere(spec.n),
            ProfileSpec::Expression { psi } => Self::from_expression(spec.n, psi),
            ProfileSpec::Table { r, psi } => Self::from_table(spec.n, r.clone(), psi.clone()),
        }
    }

    pub fn new(n: usize, profile: Profile) -> Result<Self, ManifoldError> {
        if n < 2 {
            return Err(ManifoldError::InvalidDimension(n));
        }
        let r_dom = match &profile {
            Profile::Sphere => PI,
            Profile::Table(t) => t.domain_end(),
            _ => f64::INFINITY,
        };
        let j0 = profile.jet(0.0)?;
        if j0.v.abs() > 1e-9 || (j0.d1 - 1.0).abs() > 1e-9 {
            return Err(ManifoldError::InvalidProfile(format!(
                "need psi(0)=0 and psi'(0)=1, got {} and {}",
                j0.v, j0.d1
            )));
        }
        let horizon = r_dom.min(POSITIVITY_HORIZON);
        for i in 1..POSITIVITY_SAMPLES {
            let r = horizon * i as f64 / POSITIVITY_SAMPLES as f64;
            let v = profile.jet(r)?.v;
            if !(v > 0.0) {
                return Err(ManifoldError::NonPositiveProfile(r));
            }
        }
        Ok(ModelManifold { n, omega_n: omega(n), profile, r_dom, total: OnceLock::new() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn omega_n(&self) -> f64 {
        self.omega_n
    }

    pub fn kind(&self) -> ProfileKind {
        self.profile.kind()
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    /// Upper end of the profile domain (∞ for noncompact builtins and expressions).
    pub fn r_dom(&self) -> f64 {
        self.r_dom
    }

    pub fn is_compact(&self) -> bool {
        self.r_dom.is_finite()
    }

    /// (ψ, ψ′, ψ″) at `r`.
    pub fn psi(&self, r: f64) -> Result<Jet, ManifoldError> {
        self.check_domain(r)?;
        Ok(self.profile.jet(r)?)
    }

    /// ψ(r)^{n−1}, the radial density of the volume measure (without ωₙ).
    pub fn density(&self, r: f64) -> Result<f64, ManifoldError> {
        Ok(self.psi(r)?.v.powi(self.n as i32 - 1))
    }

    fn check_domain(&self, r: f64) -> Result<(), ManifoldError> {
        if !(r >= 0.0) || r >= self.r_dom && !(r == self.r_dom && matches!(self.profile, Profile::Table(_))) {
            return Err(ManifoldError::DomainExceeded { r, r_dom: self.r_dom });
        }
        Ok(())
    }

    /// G(r) = ∫₀ʳ ψⁿ⁻¹.
    pub fn g(&self, r: f64) -> Result<f64, ManifoldError> {
        self.check_domain(r)?;
        self.g_between(0.0, r)
    }

    fn g_between(&self, a: f64, b: f64) -> Result<f64, ManifoldError> {
        let mut failure = None;
        let p = self.n as i32 - 1;
        let e = integrate(
            |t| match self.profile.jet(t) {
                Ok(j) => j.v.powi(p),
                Err(err) => {
                    failure.get_or_insert(err);
                    0.0
                }
            },
            a,
            b,
            1e-15,
            1e-13,
        );
        match failure {
            Some(err) => Err(err.into()),
            None => Ok(e.value),
        }
    }

    pub fn volume_ball(&self, r: f64) -> Result<f64, ManifoldError> {
        Ok(self.omega_n * self.g(r)?)
    }

    pub fn perimeter_ball(&self, r: f64) -> Result<f64, ManifoldError> {
        Ok(self.omega_n * self.density(r)?)
    }

    /// ωₙ·G(R_dom⁻); infinite when the volume integral diverges.
    pub fn total_volume(&self) -> f64 {
        *self.total.get_or_init(|| self.compute_total_volume())
    }

    fn compute_total_volume(&self) -> f64 {
        if self.r_dom.is_finite() {
            return self.omega_n * self.g_between(0.0, self.r_dom).unwrap_or(f64::INFINITY);
        }
        let mut acc = match self.g_between(0.0, 10.0) {
            Ok(v) => v,
            Err(_) => return f64::INFINITY,
        };
        let mut prev_inc = f64::INFINITY;
        let mut a = 10.0;
        while a < 1280.0 {
            let inc = match self.g_between(a, 2.0 * a) {
                Ok(v) if v.is_finite() => v,
                _ => return f64::INFINITY,
            };
            acc += inc;
            if inc <= 1e-16 * acc {
                return self.omega_n * acc;
            }
            if inc >= 0.5 * prev_inc {
                return f64::INFINITY;
            }
            prev_inc = inc;
            a *= 2.0;
        }
        f64::INFINITY
    }

    /// Radius of the centered ball of volume `v`.
    pub fn radius_of_volume(&self, v: f64) -> Result<f64, ManifoldError> {
        if !(v >= 0.0) {
            return Err(ManifoldError::InvalidProfile(format!("negative volume {v}")));
        }
        if v == 0.0 {
            return Ok(0.0);
        }
        let total = self.total_volume();
        if v >= total {
            return Err(ManifoldError::VolumeExceedsManifold { volume: v, total });
        }
        let y = v / self.omega_n;
        let mut lo = 0.0;
        let mut g_lo = 0.0;
        let mut hi = 1.0f64.min(0.5 * self.r_dom);
        let mut g_hi = self.g(hi)?;
        while g_hi < y {
            lo = hi;
            g_lo = g_hi;
            hi = if self.r_dom.is_finite() { 0.5 * (hi + self.r_dom) } else { 2.0 * hi };
            if self.r_dom.is_finite() && self.r_dom - hi < 1e-15 * self.r_dom {
                hi = self.r_dom;
                break;
            }
            g_hi = g_lo + self.g_between(lo, hi)?;
        }
        let mut failure = None;
        let root = bracketed_root(
            |r| match self.g_between(lo, r) {
                Ok(gv) => g_lo + gv - y,
                Err(e) => {
                    failure.get_or_insert(e);
                    0.0
                }
            },
            lo,
            hi,
            1e-15,
            0.0,
            200,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        root.map(|r| r.x).ok_or(ManifoldError::VolumeExceedsManifold { volume: v, total })
    }

    fn curvatures_at(&self, r: f64) -> Result<Curvatures, ManifoldError> {
        let j = self.psi(r)?;
        let nf = self.n as f64;
        let k_rad = -j.d2 / j.v;
        let k_perp = self.profile.one_minus_dpsi_sq(r, &j) / (j.v * j.v);
        Ok(Curvatures {
            k_rad,
            k_perp,
            ric_rad: (nf - 1.0) * k_rad,
            ric_perp: k_rad + (nf - 2.0) * k_perp,
            scalar: (nf - 1.0) * (2.0 * k_rad + (nf - 2.0) * k_perp),
        })
    }

    /// Sectional, Ricci and scalar curvature at distance `r` from the pole.
    ///
    /// At the pole the quotients are 0/0; the limit is extrapolated from
    /// ε = 1e−4 and 2ε assuming an even expansion in r.
    pub fn curvatures(&self, r: f64) -> Result<Curvatures, ManifoldError> {
        if r > 0.0 {
            return self.curvatures_at(r);
        }
        self.check_domain(r)?;
        let a = self.curvatures_at(CURVATURE_EPS)?;
        let b = self.curvatures_at(2.0 * CURVATURE_EPS)?;
        let x = |p: f64, q: f64| (4.0 * p - q) / 3.0;
        Ok(Curvatures {
            k_rad: x(a.k_rad, b.k_rad),
            k_perp: x(a.k_perp, b.k_perp),
            ric_rad: x(a.ric_rad, b.ric_rad),
            ric_perp: x(a.ric_perp, b.ric_perp),
            scalar: x(a.scalar, b.scalar),
        })
    }

    pub fn scalar_curvature(&self, r: f64) -> Result<f64, ManifoldError> {
        Ok(self.curvatures(r)?.scalar)
    }

    /// Classifies ∫₁^∞ ψ^{1−n} from partial integrals at R_cut ∈ {10, 20, 40, 80}.
    pub fn is_parabolic(&self) -> Result<Parabolicity, ManifoldError> {
        if self.is_compact() {
            return Err(ManifoldError::CompactProfile);
        }
        let p = 1 - self.n as i32;
        let cuts = [10.0, 20.0, 40.0, 80.0];
        let mut inc = Vec::with_capacity(3);
        for w in cuts.windows(2) {
            let e = integrate(
                |t| self.profile.jet(t).map(|j| j.v.powi(p)).unwrap_or(f64::INFINITY),
                w[0],
                w[1],
                1e-300,
                1e-12,
            );
            inc.push(if e.value.is_nan() { f64::INFINITY } else { e.value });
        }
        Ok(classify_increments(&inc))
    }
}

/// Tail-ratio heuristic on successive partial-integral increments.
pub fn classify_increments(inc: &[f64]) -> Parabolicity {
    const SLACK: f64 = 1e-9;
    let nondecreasing = inc.windows(2).all(|w| w[1] >= w[0] * (1.0 - SLACK) || w[1].is_infinite());
    let halving = inc.windows(2).all(|w| w[0].is_finite() && w[1] <= 0.5 * w[0] * (1.0 + SLACK));
    if nondecreasing {
        Parabolicity::Parabolic
    } else if halving {
        Parabolicity::Nonparabolic
    } else {
        Parabolicity::Inconclusive
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn omega_values() {
        assert!(close(omega(2), 2.0 * PI, 1e-15));
        assert!(close(omega(3), 4.0 * PI, 1e-15));
        assert!(close(omega(4), 2.0 * PI * PI, 1e-15));
        assert!(close(omega(5), 8.0 * PI * PI / 3.0, 1e-15));
    }

    #[test]
    fn builtin_examples() {
        let e3 = ModelManifold::euclidean(3).unwrap();
        let j = e3.psi(1.0).unwrap();
        assert_eq!((j.v, j.d1, j.d2), (1.0, 1.0, 0.0));
        assert!(close(e3.volume_ball(1.0).unwrap(), 4.0 * PI / 3.0, 1e-12));
        assert_eq!(e3.volume_ball(0.0).unwrap(), 0.0);
        let h2 = ModelManifold::hyperbolic(2).unwrap();
        assert!(close(h2.psi(1.0).unwrap().v, 1.0f64.sinh(), 1e-15));
        assert!(close(h2.volume_ball(1.0).unwrap(), 2.0 * PI * (1.0f64.cosh() - 1.0), 1e-12));
        let e2 = ModelManifold::euclidean(2).unwrap();
        assert!(close(e2.perimeter_ball(2.0).unwrap(), 4.0 * PI, 1e-15));
        let h3 = ModelManifold::hyperbolic(3).unwrap();
        assert!(close(h3.perimeter_ball(1.0).unwrap(), 4.0 * PI * 1.0f64.sinh().powi(2), 1e-14));
        assert!(close(e2.radius_of_volume(PI).unwrap(), 1.0, 1e-12));
        assert!(close(h2.radius_of_volume(2.0 * PI * (1.0f64.cosh() - 1.0)).unwrap(), 1.0, 1e-10));
    }

    #[test]
    fn expression_profile_derivative_at_pole() {
        let m = ModelManifold::from_expression(2, "r*exp(-r^2)").unwrap();
        assert_eq!(m.psi(0.0).unwrap().d1, 1.0);
        assert!(close(m.total_volume(), PI, 1e-10));
        assert!(matches!(m.radius_of_volume(4.0), Err(ManifoldError::VolumeExceedsManifold { .. })));
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        assert!(matches!(ModelManifold::from_expression(2, "2*r"), Err(ManifoldError::InvalidProfile(_))));
        assert!(matches!(ModelManifold::from_expression(2, "1+r"), Err(ManifoldError::InvalidProfile(_))));
        assert!(matches!(ModelManifold::from_expression(2, "r - r^2"), Err(ManifoldError::NonPositiveProfile(_))));
        assert!(matches!(ModelManifold::euclidean(1), Err(ManifoldError::InvalidDimension(1))));
        assert!(matches!(ModelManifold::from_expression(2, "u"), Err(ManifoldError::InvalidProfile(_))));
    }

    #[test]
    fn domain_checks() {
        let s = ModelManifold::sphere(2).unwrap();
        assert!(matches!(s.volume_ball(PI), Err(ManifoldError::DomainExceeded { .. })));
        assert!(matches!(s.is_parabolic(), Err(ManifoldError::CompactProfile)));
        assert!(close(s.total_volume(), 4.0 * PI, 1e-12));
        let v = s.volume_ball(3.0).unwrap();
        assert!(close(s.radius_of_volume(v).unwrap(), 3.0, 1e-10));
    }

    #[test]
    fn curvature_examples() {
        let e = ModelManifold::euclidean(4).unwrap();
        assert_eq!(e.curvatures(0.7).unwrap().scalar, 0.0);
        let h3 = ModelManifold::hyperbolic(3).unwrap();
        let c = h3.curvatures(1.0).unwrap();
        assert!(close(c.scalar, -6.0, 1e-12));
        assert!(close(c.ric_rad, -2.0, 1e-12) && close(c.ric_perp, -2.0, 1e-12));
        let p = ModelManifold::from_expression(2, "r + r^3").unwrap();
        assert!(close(p.scalar_curvature(1.0).unwrap(), -6.0, 1e-12));
        assert!(close(p.scalar_curvature(0.0).unwrap(), -12.0, 1e-7));
        for r in [0.1, 0.5, 2.0] {
            assert!(close(p.scalar_curvature(r).unwrap(), -12.0 / (1.0 + r * r), 1e-10));
        }
        let s4 = ModelManifold::sphere(4).unwrap();
        assert!(close(s4.scalar_curvature(0.0).unwrap(), 12.0, 1e-12));
    }

    #[test]
    fn smallball_examples() {
        assert!(close(smallball_expansion(0.0, 0.3, 2).vol_approx, PI * 0.09, 1e-15));
        let b = smallball_expansion(2.0, 0.1, 2);
        assert!((b.vol_approx - 2.0 * PI * (1.0 - 0.1f64.cos())).abs() < 1e-6);
        assert!((b.area_approx - 2.0 * PI * 0.1 * (1.0 - 0.01 / 6.0)).abs() < 1e-12);
        assert!((b.area_approx - 2.0 * PI * 0.1f64.sin()).abs() < 1e-5);
    }

    #[test]
    fn smallball_error_is_fifth_order() {
        let s = ModelManifold::sphere(3).unwrap();
        let h = ModelManifold::hyperbolic(2).unwrap();
        for m in [&s, &h] {
            let sc = m.scalar_curvature(0.0).unwrap();
            let err = |r: f64| (smallball_expansion(sc, r, m.n()).vol_approx - m.volume_ball(r).unwrap()).abs();
            let ratio = err(0.2) / err(0.1);
            assert!(ratio >= 16.0 * 0.8, "ratio {ratio}");
        }
    }

    #[test]
    fn parabolicity_examples() {
        assert_eq!(ModelManifold::euclidean(2).unwrap().is_parabolic().unwrap(), Parabolicity::Parabolic);
        assert_eq!(ModelManifold::euclidean(3).unwrap().is_parabolic().unwrap(), Parabolicity::Nonparabolic);
        assert_eq!(ModelManifold::hyperbolic(2).unwrap().is_parabolic().unwrap(), Parabolicity::Nonparabolic);
        assert_eq!(classify_increments(&[1.0, 0.8, 0.7]), Parabolicity::Inconclusive);
    }

    #[test]
    fn table_profile_tracks_sinh() {
        let r: Vec<f64> = (0..=60).map(|i| i as f64 * 0.05).collect();
        let psi: Vec<f64> = r.iter().map(|x| x.sinh()).collect();
        let m = ModelManifold::from_table(2, r, psi).unwrap();
        assert!(close(m.psi(1.03).unwrap().v, 1.03f64.sinh(), 1e-5));
        assert!(close(m.volume_ball(2.0).unwrap(), 2.0 * PI * (2.0f64.cosh() - 1.0), 1e-5));
        assert!(ModelManifold::from_table(2, vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 4.0]).is_err());
    }

    #[test]
    fn manifold_spec_rejects_unknown_keys() {
        let ok: ManifoldSpec =
            serde_json::from_str(r#"{"n":2,"profile":{"kind":"expression","psi":"r+r^3"}}"#).unwrap();
        assert!(ModelManifold::from_spec(&ok).is_ok());
        assert!(serde_json::from_str::<ManifoldSpec>(r#"{"n":2,"profile":{"kind":"euclidean"},"x":1}"#).is_err());
        assert!(serde_json::from_str::<ManifoldSpec>(r#"{"n":2,"profile":{"kind":"sphere","psi":"r"}}"#).is_err());
    }

    fn builtins() -> Vec<ModelManifold> {
        vec![
            ModelManifold::euclidean(2).unwrap(),
            ModelManifold::euclidean(3).unwrap(),
            ModelManifold::hyperbolic(2).unwrap(),
            ModelManifold::hyperbolic(3).unwrap(),
            ModelManifold::sphere(2).unwrap(),
            ModelManifold::sphere(3).unwrap(),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn volume_round_trip(frac in 0.0f64..0.999, which in 0usize..6) {
            let m = &builtins()[which];
            let cap = if m.is_compact() { m.total_volume() } else { m.volume_ball(6.0).unwrap() };
            let v = frac * cap;
            let r = m.radius_of_volume(v).unwrap();
            let back = m.volume_ball(r).unwrap();
            prop_assert!((back - v).abs() <= 1e-8 * v.max(1e-300), "{v} -> {r} -> {back}");
        }

        #[test]
        fn derivative_of_volume_is_perimeter(r in 0.05f64..3.0, which in 0usize..6) {
            let m = &builtins()[which];
            let h = 1e-5;
            let d = (m.volume_ball(r + h).unwrap() - m.volume_ball(r - h).unwrap()) / (2.0 * h);
            let p = m.perimeter_ball(r).unwrap();
            prop_assert!((d - p).abs() <= 1e-6 * p, "{:?} r={r}: {d} vs {p}", m.kind());
        }

        #[test]
        fn builtin_curvatures_are_constant(r in 0.01f64..3.0, which in 0usize..6) {
            let m = &builtins()[which];
            let nf = m.n() as f64;
            let (k, s) = match m.kind() {
                ProfileKind::Euclidean => (0.0, 0.0),
                ProfileKind::Hyperbolic => (-1.0, -nf * (nf - 1.0)),
                _ => (1.0, nf * (nf - 1.0)),
            };
            let c = m.curvatures(r).unwrap();
            prop_assert!((c.k_rad - k).abs() < 1e-9 && (c.k_perp - k).abs() < 1e-9);
            prop_assert!((c.scalar - s).abs() < 1e-9);
        }

        #[test]
        fn volume_is_increasing(mut rs in prop::collection::vec(0.0f64..3.0, 2..20), which in 0usize..6) {
            let m = &builtins()[which];
            rs.sort_by(f64::total_cmp);
            rs.dedup();
            let vs: Vec<f64> = rs.iter().map(|&r| m.volume_ball(r).unwrap()).collect();
            prop_assert!(vs.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
