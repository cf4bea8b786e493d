//! Filtration nonlinearities φ: continuous, nondecreasing, nonconstant, φ(0) = 0.

use super::EllipticError;
use crate::expr::{parse_expression, Expr};
use crate::quad::integrate;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Scenario-file description of φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearitySpec {
    /// φ(u) = u
    Linear {},
    /// φ(u) = uᵐ, m ≥ 1
    Power { m: f64 },
    /// φ(u) = (u − 1)⁺
    Stefan {},
    /// φ given as an expression in `u`
    Expression { phi: String },
}

#[derive(Debug, Clone)]
enum Base {
    Linear,
    Power(f64),
    Stefan,
    /// the expression and its kinks on [0, SCREEN_TOP]
    Expression(Expr, Arc<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct Nonlinearity {
    base: Base,
    /// smoothing parameter k of φₖ
    k: Option<f64>,
    strictly_increasing: bool,
}

/// Points used to screen expression nonlinearities.
const SCREEN: usize = 2000;
const SCREEN_TOP: f64 = 100.0;

impl Nonlinearity {
    pub fn linear() -> Self {
        Nonlinearity { base: Base::Linear, k: None, strictly_increasing: true }
    }

    pub fn power(m: f64) -> Result<Self, EllipticError> {
        if !(m >= 1.0 && m.is_finite()) {
            return Err(EllipticError::InvalidNonlinearity(format!("power exponent must be ≥ 1, got {m}")));
        }
        Ok(Nonlinearity { base: Base::Power(m), k: None, strictly_increasing: true })
    }

    pub fn stefan() -> Self {
        Nonlinearity { base: Base::Stefan, k: None, strictly_increasing: false }
    }

    /// φ from an expression in `u`, screened on [0, 100] for φ(0) = 0 and monotonicity.
    pub fn from_expression(src: &str) -> Result<Self, EllipticError> {
        let e = parse_expression(src)?;
        if e.variables().iter().any(|v| v != "u") {
            return Err(EllipticError::InvalidNonlinearity(format!("φ may only depend on u: {src}")));
        }
        let at = |u: f64| e.eval(u).map_err(EllipticError::from);
        if at(0.0)? != 0.0 {
            return Err(EllipticError::InvalidNonlinearity("φ(0) must be 0".into()));
        }
        let mut prev = 0.0;
        let mut strict = true;
        for i in 1..=SCREEN {
            let u = SCREEN_TOP * (i as f64 / SCREEN as f64).powi(2);
            let v = at(u)?;
            if v < prev {
                return Err(EllipticError::InvalidNonlinearity(format!("φ decreases near u = {u}")));
            }
            strict &= v > prev;
            prev = v;
        }
        if prev == 0.0 {
            return Err(EllipticError::InvalidNonlinearity("φ is constant on the screened range".into()));
        }
        let kinks = Arc::new(e.breakpoints(0.0, SCREEN_TOP, 8 * SCREEN));
        Ok(Nonlinearity { base: Base::Expression(e, kinks), k: None, strictly_increasing: strict })
    }

    pub fn from_spec(spec: &NonlinearitySpec) -> Result<Self, EllipticError> {
        match spec {
            NonlinearitySpec::Linear {} => Ok(Self::linear()),
            NonlinearitySpec::Power { m } => Self::power(*m),
            NonlinearitySpec::Stefan {} => Ok(Self::stefan()),
            NonlinearitySpec::Expression { phi } => Self::from_expression(phi),
        }
    }

    /// φₖ(u) = u/(k+1) + (Φ(u+ε) − Φ(u) − Φ(ε))/ε with ε = 1/k.
    ///
    /// φₖ(0) = 0 and φₖ′ = 1/(k+1) + (φ(u+ε) − φ(u))/ε, so 1/(k+1) ≤ φₖ′ ≤ k+1
    /// wherever φ is k-Lipschitz, and φₖ → φ locally uniformly.
    pub fn regularize(&self, k: f64) -> Result<Self, EllipticError> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(EllipticError::InvalidNonlinearity(format!("regularization k must be positive, got {k}")));
        }
        Ok(Nonlinearity { base: self.base.clone(), k: Some(k), strictly_increasing: true })
    }

    pub fn regularization(&self) -> Option<f64> {
        self.k
    }

    /// The unregularized φ.
    pub fn base(&self) -> Self {
        Nonlinearity { k: None, strictly_increasing: !matches!(self.base, Base::Stefan), ..self.clone() }
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.strictly_increasing
    }

    fn base_phi(&self, u: f64) -> f64 {
        match &self.base {
            Base::Linear => u,
            Base::Power(m) => u.powf(*m),
            Base::Stefan => (u - 1.0).max(0.0),
            Base::Expression(e, _) => e.eval(u).unwrap_or(f64::NAN),
        }
    }

    fn base_dphi(&self, u: f64) -> f64 {
        match &self.base {
            Base::Linear => 1.0,
            Base::Power(m) => m * u.powf(m - 1.0),
            Base::Stefan => {
                if u > 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Base::Expression(e, _) => e.jet(u).map_or(f64::NAN, |j| j.d1),
        }
    }

    fn base_big_phi(&self, u: f64) -> f64 {
        match &self.base {
            Base::Linear => 0.5 * u * u,
            Base::Power(m) => u.powf(m + 1.0) / (m + 1.0),
            Base::Stefan => 0.5 * (u - 1.0).max(0.0).powi(2),
            Base::Expression(e, kinks) => split_integral(|s| self.base_phi(s), u, e, kinks),
        }
    }

    /// ∫₀ᵘ Φ.
    fn base_big_phi2(&self, u: f64) -> f64 {
        match &self.base {
            Base::Linear => u * u * u / 6.0,
            Base::Power(m) => u.powf(m + 2.0) / ((m + 1.0) * (m + 2.0)),
            Base::Stefan => (u - 1.0).max(0.0).powi(3) / 6.0,
            // ∫₀ᵘ Φ = ∫₀ᵘ (u − s) φ(s) ds
            Base::Expression(e, kinks) => split_integral(|s| (u - s) * self.base_phi(s), u, e, kinks),
        }
    }

    /// φ on [0, ∞).
    pub fn phi(&self, u: f64) -> f64 {
        match self.k {
            None => self.base_phi(u),
            Some(k) => {
                let eps = 1.0 / k;
                u / (k + 1.0) + (self.base_big_phi(u + eps) - self.base_big_phi(u) - self.base_big_phi(eps)) / eps
            }
        }
    }

    pub fn dphi(&self, u: f64) -> f64 {
        match self.k {
            None => self.base_dphi(u),
            Some(k) => {
                let eps = 1.0 / k;
                1.0 / (k + 1.0) + (self.base_phi(u + eps) - self.base_phi(u)) / eps
            }
        }
    }

    /// Φ(u) = ∫₀ᵘ φ.
    pub fn big_phi(&self, u: f64) -> f64 {
        match self.k {
            None => self.base_big_phi(u),
            Some(k) => {
                let eps = 1.0 / k;
                let b = |s| self.base_big_phi2(s);
                u * u / (2.0 * (k + 1.0)) + (b(u + eps) - b(eps) - b(u) - u * self.base_big_phi(eps)) / eps
            }
        }
    }

    /// Odd extension of φ to the real line, used inside Newton iterations.
    pub(crate) fn phi_odd(&self, u: f64) -> f64 {
        if u >= 0.0 {
            self.phi(u)
        } else {
            -self.phi(-u)
        }
    }

    pub(crate) fn dphi_odd(&self, u: f64) -> f64 {
        self.dphi(u.abs())
    }

    /// ℓ = lim φ(u) as u → ∞.
    pub fn ell(&self) -> f64 {
        match (&self.base, self.k) {
            (Base::Expression(..), None) => {
                let (a, b) = (self.phi(1e8), self.phi(1e16));
                if b.is_finite() && (b - a).abs() <= 1e-12 * b.abs() {
                    b
                } else {
                    f64::INFINITY
                }
            }
            _ => f64::INFINITY,
        }
    }

    /// φₗ⁻¹(ρ) = min{u ≥ 0 : φ(u) = ρ}.
    pub fn phi_inv_left(&self, rho: f64) -> Result<f64, EllipticError> {
        if rho <= 0.0 {
            return Ok(0.0);
        }
        match (&self.base, self.k) {
            (Base::Linear, None) => Ok(rho),
            (Base::Power(m), None) => Ok(rho.powf(1.0 / m)),
            (Base::Stefan, None) => Ok(1.0 + rho),
            _ => self.invert(rho, false),
        }
    }

    /// φᵣ⁻¹(ρ) = max{u ≥ 0 : φ(u) = ρ}.
    pub fn phi_inv_right(&self, rho: f64) -> Result<f64, EllipticError> {
        match (&self.base, self.k) {
            (Base::Stefan, None) => Ok(1.0 + rho.max(0.0)),
            (Base::Linear | Base::Power(_), None) | (_, Some(_)) if rho <= 0.0 => Ok(0.0),
            (Base::Linear | Base::Power(_), None) | (_, Some(_)) => self.phi_inv_left(rho),
            _ => self.invert(rho.max(0.0), true),
        }
    }

    /// Bisection for inf{u : φ(u) ≥ ρ} (left) or sup{u : φ(u) ≤ ρ} (right).
    fn invert(&self, rho: f64, right: bool) -> Result<f64, EllipticError> {
        if rho >= self.ell() {
            return Err(EllipticError::OutsideRange { rho, ell: self.ell() });
        }
        let past = |u: f64| if right { self.phi(u) > rho } else { self.phi(u) >= rho };
        let mut hi = 1.0;
        let mut doublings = 0;
        while !past(hi) {
            hi *= 2.0;
            doublings += 1;
            if doublings > 1000 || !hi.is_finite() {
                return Err(EllipticError::OutsideRange { rho, ell: self.ell() });
            }
        }
        let mut lo = 0.0;
        while hi - lo > 4.0 * f64::EPSILON * hi {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if past(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if !right {
            return Ok(hi);
        }
        // a right inverse within roundoff of the left one is the same point
        let left = self.invert(rho, false)?;
        Ok(if lo - left <= 1e-9 * left.max(1.0) { left } else { lo })
    }

    /// sup φ′ over [0, u_max], sampled; used for the monotonicity step condition.
    pub fn sup_derivative(&self, u_max: f64) -> f64 {
        (0..=512).map(|i| self.dphi(u_max * i as f64 / 512.0)).fold(0.0, f64::max)
    }
}

/// ∫₀ᵘ f split at the kinks of φ, so that every adaptive panel sees a smooth integrand.
fn split_integral(mut f: impl FnMut(f64) -> f64, u: f64, e: &Expr, kinks: &[f64]) -> f64 {
    let mut cuts = vec![0.0];
    cuts.extend(kinks.iter().copied().filter(|&x| x < u));
    if u > SCREEN_TOP {
        cuts.extend(e.breakpoints(SCREEN_TOP, u, 8 * SCREEN));
    }
    cuts.push(u);
    cuts.windows(2).map(|w| integrate(&mut f, w[0], w[1], 1e-16, 1e-14).value).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all() -> Vec<Nonlinearity> {
        vec![
            Nonlinearity::linear(),
            Nonlinearity::power(2.0).unwrap(),
            Nonlinearity::power(3.5).unwrap(),
            Nonlinearity::stefan(),
            Nonlinearity::stefan().regularize(64.0).unwrap(),
            Nonlinearity::power(2.0).unwrap().regularize(8.0).unwrap(),
            Nonlinearity::from_expression("min(u, 1) + 0.5*pospart(u - 3)").unwrap(),
            Nonlinearity::from_expression("u^2/(1+u)").unwrap(),
        ]
    }

    #[test]
    fn builtin_inverses() {
        let s = Nonlinearity::stefan();
        assert_eq!(s.phi_inv_left(0.0).unwrap(), 0.0);
        assert_eq!(s.phi_inv_right(0.0).unwrap(), 1.0);
        assert_eq!(s.phi_inv_left(0.5).unwrap(), 1.5);
        assert_eq!(s.phi_inv_right(0.5).unwrap(), 1.5);
        let p = Nonlinearity::power(2.0).unwrap();
        assert_eq!(p.phi_inv_left(4.0).unwrap(), 2.0);
        assert_eq!(Nonlinearity::linear().ell(), f64::INFINITY);
        let sat = Nonlinearity::from_expression("min(u, 1)").unwrap();
        assert_eq!(sat.ell(), 1.0);
        assert!(sat.phi_inv_left(1.0).is_err());
        assert!(!sat.is_strictly_increasing());
    }

    #[test]
    fn expression_inverses_on_plateaus() {
        let e = Nonlinearity::from_expression("min(u, 1) + 0.5*pospart(u - 3)").unwrap();
        assert!((e.phi_inv_left(1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((e.phi_inv_right(1.0).unwrap() - 3.0).abs() < 1e-14);
        assert!((e.phi_inv_left(2.0).unwrap() - 5.0).abs() < 1e-13);
    }

    #[test]
    fn rejects_inadmissible() {
        assert!(Nonlinearity::from_expression("u - 1").is_err());
        assert!(Nonlinearity::from_expression("-u").is_err());
        assert!(Nonlinearity::from_expression("0*u").is_err());
        assert!(Nonlinearity::from_expression("r*u").is_err());
        assert!(Nonlinearity::power(0.5).is_err());
        assert!(Nonlinearity::linear().regularize(0.0).is_err());
    }

    #[test]
    fn regularized_derivative_bounds() {
        for k in [4.0, 16.0, 64.0] {
            for base in [Nonlinearity::stefan(), Nonlinearity::linear()] {
                let r = base.regularize(k).unwrap();
                for i in 0..2000 {
                    let u = i as f64 * 0.005;
                    let d = r.dphi(u);
                    assert!(d >= 1.0 / (k + 1.0) - 1e-12 && d <= k + 1.0 + 1e-12);
                    let h = 1e-6;
                    let fd = (r.phi(u + h) - r.phi((u - h).max(0.0))) / (u + h - (u - h).max(0.0));
                    assert!((fd - d).abs() < 1e-3 * d.max(1.0) || (u - 1.0).abs() < 2.0 / k, "{u}: {fd} vs {d}");
                }
                assert_eq!(r.phi(0.0), 0.0);
            }
        }
    }

    #[test]
    fn regularization_converges_locally_uniformly() {
        let base = Nonlinearity::stefan();
        let mut prev = f64::INFINITY;
        for k in [4.0, 16.0, 64.0, 256.0] {
            let r = base.regularize(k).unwrap();
            let err = (0..=500).map(|i| i as f64 * 0.01).map(|u| (r.phi(u) - base.phi(u)).abs()).fold(0.0, f64::max);
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 0.03);
    }

    proptest! {
        #[test]
        fn pseudo_inverse_laws(which in 0usize..8, rho in 0.0f64..3.0, rho2 in 0.0f64..3.0) {
            let phi = &all()[which];
            if rho < phi.ell() && rho2 < phi.ell() {
                let l = phi.phi_inv_left(rho).unwrap();
                let r = phi.phi_inv_right(rho).unwrap();
                prop_assert!((phi.phi(l) - rho).abs() <= 1e-9 * rho.max(1.0));
                prop_assert!(l <= r);
                let (a, b) = if rho <= rho2 { (rho, rho2) } else { (rho2, rho) };
                prop_assert!(phi.phi_inv_left(a).unwrap() <= phi.phi_inv_left(b).unwrap());
                prop_assert!(phi.phi_inv_right(a).unwrap() <= phi.phi_inv_right(b).unwrap());
            }
        }

        #[test]
        fn primitive_is_convex_and_consistent(which in 0usize..8, u in 0.0f64..5.0, v in 0.0f64..5.0) {
            let phi = &all()[which];
            prop_assert_eq!(phi.big_phi(0.0), 0.0);
            let (a, b) = if u <= v { (u, v) } else { (v, u) };
            prop_assert!(phi.big_phi(a) <= phi.big_phi(b) + 1e-12);
            let m = 0.5 * (a + b);
            prop_assert!(phi.big_phi(m) <= 0.5 * (phi.big_phi(a) + phi.big_phi(b)) + 1e-11 * phi.big_phi(b).max(1.0));
            let direct: f64 = (0..64)
                .map(|i| {
                    let (lo, hi) = (a + (b - a) * i as f64 / 64.0, a + (b - a) * (i + 1) as f64 / 64.0);
                    integrate(|s| phi.phi(s), lo, hi, 1e-14, 1e-12).value
                })
                .sum();
            prop_assert!((phi.big_phi(b) - phi.big_phi(a) - direct).abs() <= 1e-8 * direct.abs().max(1.0));
        }
    }
}
