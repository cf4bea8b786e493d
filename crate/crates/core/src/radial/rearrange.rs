//! Decreasing and Schwarz rearrangements, the concentration order ≺, and
//! integral identities that go with them.
//!
//! `|f|` is split into pieces on which it is linear in the cell coordinate.
//! Nodal values and 0 are the only levels where the set of pieces that cross a
//! level can change, so between two consecutive levels μ(t) is smooth and
//! strictly decreasing and f* is found by a safeguarded Newton iteration.

use super::{CellDensity, RadialError, RadialFunction, RadialGrid};
use crate::quad::{gauss_legendre, integrate};
use serde::Serialize;
use std::sync::Arc;

#[derive(Debug, Clone, Copy)]
struct Piece {
    cell: usize,
    t0: f64,
    t1: f64,
    p: f64,
    q: f64,
}

impl Piece {
    fn lo(&self) -> f64 {
        self.p.min(self.q)
    }
    fn hi(&self) -> f64 {
        self.p.max(self.q)
    }
    fn full_volume(&self, c: &CellDensity) -> f64 {
        if self.t0 == 0.0 && self.t1 == 1.0 {
            c.m0
        } else {
            c.partial(self.t1) - c.partial(self.t0)
        }
    }
    fn crossing(&self, t: f64) -> f64 {
        self.t0 + (self.t1 - self.t0) * (t - self.p) / (self.q - self.p)
    }
    /// Volume of {|f| > t} (or ≥ t) on the piece.
    fn volume(&self, c: &CellDensity, t: f64, ge: bool) -> f64 {
        let (lo, hi) = (self.lo(), self.hi());
        if lo > t || (ge && lo >= t) {
            return self.full_volume(c);
        }
        if hi < t || (!ge && hi <= t) {
            return 0.0;
        }
        let th = self.crossing(t);
        if self.p > self.q {
            c.partial(th) - c.partial(self.t0)
        } else {
            c.partial(self.t1) - c.partial(th)
        }
    }
    /// d/dt of the strict superlevel volume inside the crossing range (≤ 0).
    fn volume_slope(&self, c: &CellDensity, t: f64) -> f64 {
        let th = self.crossing(t);
        -c.density(th) * ((self.t1 - self.t0) / (self.q - self.p)).abs()
    }
    /// ∫ (|f| − T)⁺ over the piece.
    fn excess(&self, c: &CellDensity, t: f64) -> f64 {
        let (lo, hi) = (self.lo(), self.hi());
        if hi <= t {
            return 0.0;
        }
        let c1 = (self.q - self.p) / (self.t1 - self.t0);
        let c0 = self.p - c1 * self.t0;
        let (a, b) = if lo >= t {
            (self.t0, self.t1)
        } else if self.p > self.q {
            (self.t0, self.crossing(t))
        } else {
            (self.crossing(t), self.t1)
        };
        c.linear_integral(a, b, c0 - t, c1)
    }
}

fn pieces_of(f: &RadialFunction) -> Vec<Piece> {
    let v = &f.values;
    let mut out = Vec::with_capacity(v.len());
    for j in 0..v.len() - 1 {
        let (a, b) = (v[j], v[j + 1]);
        if a * b < 0.0 {
            let z = a / (a - b);
            out.push(Piece { cell: j, t0: 0.0, t1: z, p: a.abs(), q: 0.0 });
            out.push(Piece { cell: j, t0: z, t1: 1.0, p: 0.0, q: b.abs() });
        } else {
            out.push(Piece { cell: j, t0: 0.0, t1: 1.0, p: a.abs(), q: b.abs() });
        }
    }
    out
}

pub(super) fn level_volume(f: &RadialFunction, t: f64, ge: bool) -> f64 {
    let cells = f.grid.cells();
    pieces_of(f).iter().map(|p| p.volume(&cells[p.cell], t, ge)).sum()
}

/// Decreasing rearrangement f* on the volume coordinate, with the Schwarz
/// rearrangement f⋆ sampled at the grid nodes.
#[derive(Debug, Clone)]
pub struct Rearrangement {
    grid: Arc<RadialGrid>,
    pieces: Vec<Piece>,
    levels: Vec<f64>,
    mu_gt: Vec<f64>,
    mu_ge: Vec<f64>,
    band_base: Vec<f64>,
    band_active: Vec<Vec<u32>>,
    star: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Rearrangement {
    /// Builds the rearrangement of `|f|`, treating `f` as zero outside the grid.
    pub fn new(f: &RadialFunction) -> Self {
        let grid = f.grid.clone();
        let cells = grid.cells();
        let pieces = pieces_of(f);
        let mut levels: Vec<f64> = f.values.iter().map(|v| v.abs()).chain(std::iter::once(0.0)).collect();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        let idx = |x: f64| levels.binary_search_by(|l| x.total_cmp(l)).expect("piece endpoints are levels");
        let nl = levels.len();
        let mut mu_gt = vec![0.0; nl];
        let mut mu_ge = vec![0.0; nl];
        for (k, &l) in levels.iter().enumerate() {
            let mut gt = 0.0;
            let mut ge = 0.0;
            for p in &pieces {
                gt += p.volume(&cells[p.cell], l, false);
                ge += p.volume(&cells[p.cell], l, true);
            }
            mu_gt[k] = gt;
            mu_ge[k] = ge;
        }
        let bands = nl.saturating_sub(1);
        let mut base_add = vec![0.0; nl];
        let mut band_active: Vec<Vec<u32>> = vec![Vec::new(); bands];
        for (i, p) in pieces.iter().enumerate() {
            let (kh, kl) = (idx(p.hi()), idx(p.lo()));
            base_add[kl] += p.full_volume(&cells[p.cell]);
            for band in band_active.iter_mut().take(kl).skip(kh) {
                band.push(i as u32);
            }
        }
        let mut band_base = vec![0.0; bands];
        let mut acc = 0.0;
        for k in 0..bands {
            acc += base_add[k];
            band_base[k] = acc;
        }
        let mut r = Rearrangement {
            grid: grid.clone(),
            pieces,
            levels,
            mu_gt,
            mu_ge,
            band_base,
            band_active,
            star: Vec::new(),
            cumulative: Vec::new(),
        };
        r.star = grid.node_volumes().iter().map(|&s| r.value(s)).collect();
        r.cumulative = grid.node_volumes().iter().zip(&r.star).map(|(&s, &t)| r.layer_cake(s, t)).collect();
        r
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    /// μ(t) = V({|f| > t}).
    pub fn mu(&self, t: f64) -> f64 {
        let cells = self.grid.cells();
        self.pieces.iter().map(|p| p.volume(&cells[p.cell], t, false)).sum()
    }

    /// Largest nodal |f|.
    pub fn sup(&self) -> f64 {
        self.levels[0]
    }

    /// Volume of the support of f.
    pub fn support_volume(&self) -> f64 {
        self.mu_gt[self.levels.len() - 1]
    }

    /// f*(s) = sup{t : μ(t) > s}.
    pub fn value(&self, s: f64) -> f64 {
        if s < 0.0 {
            return self.levels[0];
        }
        let k = self.mu_gt.partition_point(|&m| m <= s).max(1) - 1;
        if k + 1 >= self.levels.len() {
            return 0.0;
        }
        if s <= self.mu_ge[k] {
            return self.levels[k];
        }
        self.solve_band(k, s)
    }

    fn band_mu(&self, k: usize, t: f64) -> (f64, f64) {
        let cells = self.grid.cells();
        let mut m = self.band_base[k];
        let mut d = 0.0;
        for &i in &self.band_active[k] {
            let p = &self.pieces[i as usize];
            m += p.volume(&cells[p.cell], t, false);
            d += p.volume_slope(&cells[p.cell], t);
        }
        (m, d)
    }

    fn solve_band(&self, k: usize, s: f64) -> f64 {
        let (mut hi, mut lo) = (self.levels[k], self.levels[k + 1]);
        let (m_hi, _) = self.band_mu(k, hi);
        let (m_lo, _) = self.band_mu(k, lo);
        if m_hi >= s {
            return hi;
        }
        if m_lo <= s {
            return lo;
        }
        // linear start in the band, then Newton kept inside the bracket
        let mut t = lo + (hi - lo) * (m_lo - s) / (m_lo - m_hi);
        for _ in 0..100 {
            let (m, d) = self.band_mu(k, t);
            let f = m - s;
            if f == 0.0 {
                return t;
            }
            if f > 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let mut next = if d < 0.0 { t - f / d } else { f64::NAN };
            // a Newton step at rounding level means t is converged, even on the bracket edge
            if (next - t).abs() <= 4.0 * f64::EPSILON * t.abs() {
                return next.clamp(lo, hi);
            }
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 4.0 * f64::EPSILON * t.abs() || hi - lo <= 4.0 * f64::EPSILON * hi {
                return next;
            }
            t = next;
        }
        t
    }

    fn layer_cake(&self, s: f64, t: f64) -> f64 {
        let cells = self.grid.cells();
        let excess: f64 = self.pieces.iter().map(|p| p.excess(&cells[p.cell], t)).sum();
        s * t + excess
    }

    /// ∫₀ˢ f*(σ)dσ.
    pub fn cumulative_at(&self, s: f64) -> f64 {
        self.layer_cake(s, self.value(s))
    }

    /// f⋆ at the grid nodes.
    pub fn star_values(&self) -> &[f64] {
        &self.star
    }

    pub fn star(&self) -> RadialFunction {
        RadialFunction { grid: self.grid.clone(), values: self.star.clone() }
    }

    /// ∫_{B_{r_j}} f⋆ at every node.
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Dirichlet energy of the exact Schwarz rearrangement of the
    /// piecewise-linear f, by the coarea formula ∫ P(μ(t))² / |μ′(t)| dt.
    pub fn dirichlet_energy(&self) -> f64 {
        let mut e = 0.0;
        for k in 0..self.band_active.len() {
            let (hi, lo) = (self.levels[k], self.levels[k + 1]);
            e += integrate(
                |t| {
                    let (m, d) = self.band_mu(k, t);
                    if d < 0.0 {
                        let p = self.grid.perimeter_at_volume(m);
                        p * p / -d
                    } else {
                        0.0
                    }
                },
                lo,
                hi,
                0.0,
                1e-11,
            )
            .value;
        }
        e
    }

    /// Volumes where f* changes its analytic form: band ends and plateau ends.
    fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.mu_gt.iter().chain(&self.mu_ge).copied()
    }
}

/// Schwarz rearrangement of `f`; requires f(R) = 0.
pub fn schwarz_rearrangement(f: &RadialFunction) -> Result<Rearrangement, RadialError> {
    f.check_compact_support()?;
    Ok(Rearrangement::new(f))
}

fn segments(a: &Rearrangement, b: &Rearrangement) -> Vec<f64> {
    let total = a.grid.total_volume();
    let mut pts: Vec<f64> = a.breakpoints().chain(b.breakpoints()).filter(|&s| s > 0.0 && s < total).collect();
    pts.push(0.0);
    pts.push(a.support_volume().max(b.support_volume()).min(total));
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let end = a.support_volume().max(b.support_volume());
    pts.retain(|&s| s <= end);
    pts
}

fn integrate_profiles(a: &Rearrangement, b: &Rearrangement, h: impl Fn(f64, f64) -> f64, split_sign: bool) -> f64 {
    let (x, _) = gauss_legendre(8);
    let pts = segments(a, b);
    let mut total = 0.0;
    // f* − L behaves like a fractional power of s where a level crossing sits at the pole
    let same = std::ptr::eq(a, b);
    let pair = |s: f64| {
        let x = a.value(s);
        (x, if same { x } else { b.value(s) })
    };
    let quad = |lo: f64, hi: f64| -> f64 {
        integrate(
            |s| {
                let (x, y) = pair(s);
                h(x, y)
            },
            lo,
            hi,
            0.0,
            1e-12,
        )
        .value
    };
    for seg in pts.windows(2) {
        let (lo, hi) = (seg[0], seg[1]);
        if hi <= lo {
            continue;
        }
        if !split_sign {
            total += quad(lo, hi);
            continue;
        }
        // locate sign changes of f* − g* so |·| is integrated on smooth pieces
        let probe: Vec<f64> = std::iter::once(lo)
            .chain((0..8).map(|i| lo + 0.5 * (hi - lo) * (x[i] + 1.0)))
            .chain(std::iter::once(hi))
            .collect();
        let diff = |s: f64| a.value(s) - b.value(s);
        let mut cuts = vec![lo];
        for pair in probe.windows(2) {
            let (d0, d1) = (diff(pair[0]), diff(pair[1]));
            if d0 * d1 < 0.0 {
                let root = crate::quad::bracketed_root(diff, pair[0], pair[1], 1e-15, 0.0, 200);
                if let Some(r) = root {
                    cuts.push(r.x);
                }
            }
        }
        cuts.push(hi);
        for c in cuts.windows(2) {
            if c[1] > c[0] {
                total += quad(c[0], c[1]);
            }
        }
    }
    total
}

/// ∫ f⋆g⋆ dV − ∫ f g dV, which the Hardy–Littlewood inequality makes nonnegative.
pub fn hardy_littlewood_gap(f: &RadialFunction, g: &RadialFunction) -> Result<f64, RadialError> {
    let direct = f.inner(g)?;
    let (fa, ga) = (Rearrangement::new(f), Rearrangement::new(g));
    let star = integrate_profiles(&fa, &ga, |x, y| x * y, false);
    Ok(star - direct)
}

/// ‖f⋆ − g⋆‖₁ computed from the exact decreasing rearrangements.
pub fn rearranged_l1_distance(f: &RadialFunction, g: &RadialFunction) -> Result<f64, RadialError> {
    if !f.grid.same_as(&g.grid) {
        return Err(RadialError::GridMismatch);
    }
    let (fa, ga) = (Rearrangement::new(f), Rearrangement::new(g));
    Ok(integrate_profiles(&fa, &ga, |x, y| (x - y).abs(), true))
}

/// ∫ |f⋆|^p computed on the volume coordinate.
pub fn rearranged_power_integral(r: &Rearrangement, p: f64) -> f64 {
    integrate_profiles(r, r, |x, _| x.powf(p), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
    Borderline,
}

/// Comparison of ∫H(|f|) and ∫H(|g|) for H(u) = u^p.
#[derive(Debug, Clone, Serialize)]
pub struct CrossCheck {
    pub p: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub consistent: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    pub radii: Vec<f64>,
    /// ∫_{B_r} g⋆ − ∫_{B_r} f⋆ per node
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub tol_report: f64,
    pub verdict: Verdict,
    pub cross_checks: Vec<CrossCheck>,
}

impl ConcentrationReport {
    pub fn holds(&self) -> bool {
        self.verdict == Verdict::Holds
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CompareOptions {
    /// Multiplies the default report tolerance 1e−8·(‖f‖₁+‖g‖₁).
    pub tol_scale: f64,
    /// Absolute tolerance overriding the default when set.
    pub tol_report: Option<f64>,
    /// Resample `g` onto the grid of `f` when the grids differ.
    pub allow_resample: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions { tol_scale: 1.0, tol_report: None, allow_resample: true }
    }
}

pub(crate) fn report_from_cumulatives(
    grid: &RadialGrid,
    cf: &[f64],
    cg: &[f64],
    tol: f64,
    cross_checks: Vec<CrossCheck>,
) -> ConcentrationReport {
    let margins: Vec<f64> = cg.iter().zip(cf).map(|(g, f)| g - f).collect();
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let verdict = if min_margin < -tol {
        Verdict::Fails
    } else if cross_checks.iter().any(|c| !c.consistent) {
        Verdict::Borderline
    } else {
        Verdict::Holds
    };
    ConcentrationReport { radii: grid.nodes().to_vec(), margins, min_margin, tol_report: tol, verdict, cross_checks }
}

/// Margins of `f ≺ g` at every node.
pub fn concentration_compare(f: &RadialFunction, g: &RadialFunction) -> Result<ConcentrationReport, RadialError> {
    concentration_compare_with(f, g, CompareOptions::default())
}

pub fn concentration_compare_with(
    f: &RadialFunction,
    g: &RadialFunction,
    opts: CompareOptions,
) -> Result<ConcentrationReport, RadialError> {
    let g = if f.grid.same_as(&g.grid) {
        g.clone()
    } else if opts.allow_resample {
        g.resample(f.grid.clone())?
    } else {
        return Err(RadialError::GridMismatch);
    };
    let (fa, ga) = (Rearrangement::new(f), Rearrangement::new(&g));
    let tol =
        opts.tol_report.unwrap_or_else(|| 1e-8 * opts.tol_scale * (super::lp_norm(f, 1.0) + super::lp_norm(&g, 1.0)));
    let band = 10.0 * tol;
    let mut checks = Vec::new();
    for p in [1.0, 2.0, 4.0] {
        let lhs = f.integral_of(|u| u.powf(p));
        let rhs = g.integral_of(|u| u.powf(p));
        let scale = (f.sup_abs() + g.sup_abs()).max(1.0).powf(p - 1.0);
        checks.push(CrossCheck { p, lhs, rhs, consistent: lhs <= rhs + band * scale });
    }
    Ok(report_from_cumulatives(&f.grid, fa.cumulative(), ga.cumulative(), tol, checks))
}

/// A nonincreasing grid function that dominates the exact rearrangement of
/// its source in the concentration order.
#[derive(Debug, Clone)]
pub struct DominatingDatum {
    pub function: RadialFunction,
    /// ∫ datum − ∫ f⋆ (nonnegative, of the order of the interpolation error)
    pub excess_mass: f64,
}

/// Nonincreasing grid representative `g` of f⋆ with ∫_{B_{r_j}} f⋆ ≤ ∫_{B_{r_j}} g
/// at every node.
///
/// Nodal samples of f⋆ miss the cumulative integrals of f⋆ by the
/// interpolation error, with either sign. Walking outward, each nodal value is
/// raised above its sample only as far as needed to keep the running surplus
/// nonnegative, so the result is the sample itself wherever the
/// interpolant already dominates.
pub fn dominating_datum(f: &RadialFunction) -> DominatingDatum {
    let r = Rearrangement::new(f);
    let grid = f.grid.clone();
    let cells = grid.cells();
    let y = r.star_values();
    let c = r.cumulative();
    let m = cells.len();
    let mut g = vec![0.0; m + 1];
    g[0] = y[0];
    let mut surplus = 0.0;
    for j in 0..m {
        let (alpha, beta) = (cells[j].m0 - cells[j].m1, cells[j].m1);
        let need = c[j + 1] - c[j];
        let lower = (need - surplus - alpha * g[j]) / beta;
        // a deficit at rounding level is not worth raising the sample for
        let deficit = need - surplus - alpha * g[j] - beta * y[j + 1];
        let noise = 16.0 * f64::EPSILON * (c[j + 1].abs() + surplus.abs() + (alpha * g[j]).abs());
        let v = if deficit <= noise { y[j + 1] } else { y[j + 1].max(lower) }.min(g[j]);
        g[j + 1] = v;
        surplus += alpha * g[j] + beta * v - need;
    }
    let function = RadialFunction { grid, values: g };
    let excess_mass = function.integral() - c[m];
    DominatingDatum { function, excess_mass }
}

#[cfg(test)]
mod tests {
    use super::super::{distribution_function, lp_norm};
    use super::*;
    use crate::manifold::ModelManifold;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid(m: ModelManifold, r: f64, cells: usize) -> Arc<RadialGrid> {
        RadialGrid::uniform(Arc::new(m), r, cells).unwrap()
    }

    fn e2(r: f64, cells: usize) -> Arc<RadialGrid> {
        grid(ModelManifold::euclidean(2).unwrap(), r, cells)
    }

    #[test]
    fn distribution_examples() {
        let g = e2(2.0, 64);
        let chi = RadialFunction::from_fn(g.clone(), |r| if r <= 1.0 { 1.0 } else { 0.0 }).unwrap();
        // the ramp of the piecewise-linear indicator lies in (1, 1+h]
        let mu = distribution_function(&chi, 0.5);
        let exact = PI * (1.0f64 + 2.0 / 64.0).powi(2);
        assert!(mu > PI && mu < exact);
        let tent = RadialFunction::from_fn(g.clone(), |r| (1.0 - r).max(0.0)).unwrap();
        assert!((distribution_function(&tent, 0.25) - PI * 0.5625).abs() < 1e-13);
        assert_eq!(distribution_function(&RadialFunction::zeros(g), 1.0), 0.0);
    }

    #[test]
    fn annulus_indicator_rearranges_to_unit_ball() {
        let g = e2(2.0, 2000);
        let s2 = 2f64.sqrt();
        let f = RadialFunction::from_fn(g.clone(), |r| if (1.0..=s2).contains(&r) { 1.0 } else { 0.0 }).unwrap();
        let star = schwarz_rearrangement(&f).unwrap().star();
        for (&r, &v) in g.nodes().iter().zip(star.values()) {
            if r < 0.99 {
                assert_eq!(v, 1.0);
            }
            if r > 1.01 {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn nested_plateaus() {
        let g = e2(4.0, 400);
        let f = RadialFunction::from_fn(g.clone(), |r| {
            if (1.0..=1.5).contains(&r) {
                1.0
            } else if (2.5..=3.0).contains(&r) {
                2.0
            } else {
                0.0
            }
        })
        .unwrap();
        let rr = schwarz_rearrangement(&f).unwrap();
        let mu2 = distribution_function(&f, 1.5);
        let mu1 = distribution_function(&f, 0.5);
        let r2 = (mu2 / PI).sqrt();
        let r1 = (mu1 / PI).sqrt();
        for (&r, &v) in g.nodes().iter().zip(rr.star_values()) {
            if r < r2 - 0.02 {
                assert_eq!(v, 2.0);
            } else if r > r2 + 0.02 && r < r1 - 0.02 {
                assert_eq!(v, 1.0);
            } else if r > r1 + 0.02 {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn unsupported_tail() {
        let g = e2(1.0, 32);
        let f = RadialFunction::from_fn(g, |_| 1.0).unwrap();
        assert!(matches!(schwarz_rearrangement(&f), Err(RadialError::UnsupportedTail { .. })));
    }

    #[test]
    fn nonincreasing_functions_are_fixed_points_bitwise() {
        let g = grid(ModelManifold::hyperbolic(3).unwrap(), 3.0, 300);
        let f = RadialFunction::from_fn(g, |r| {
            let v = ((3.0 - r) * (1.0 + (2.0 * r).cos() * 0.2)).max(0.0);
            if (1.0..1.3).contains(&r) {
                (3.0 - 1.0) * (1.0 + 2f64.cos() * 0.2)
            } else {
                v
            }
        })
        .unwrap();
        let f = RadialFunction::new(f.grid.clone(), {
            let mut v = f.values.clone();
            for i in 1..v.len() {
                v[i] = v[i].min(v[i - 1]);
            }
            v
        })
        .unwrap();
        let r = Rearrangement::new(&f);
        assert_eq!(r.star_values(), f.values());
        let direct = f.cumulative();
        for (a, b) in direct.iter().zip(r.cumulative()) {
            assert!((a - b).abs() <= 1e-13 * direct[direct.len() - 1]);
        }
    }

    #[test]
    fn compare_examples() {
        let g = e2(2.0, 800);
        let f = RadialFunction::from_fn(g.clone(), |r| (1.0 - r).max(0.0) + 0.3 * (1.2 - r).max(0.0)).unwrap();
        let rep = concentration_compare(&f, &f).unwrap();
        assert!(rep.margins.iter().all(|&m| m == 0.0));
        assert_eq!(rep.verdict, Verdict::Holds);

        // equal masses, g taller
        let rho = 0.5f64.sqrt();
        let chi = RadialFunction::from_fn(g.clone(), |r| if r <= 1.0 { 1.0 } else { 0.0 }).unwrap();
        let tall = RadialFunction::from_fn(g.clone(), |r| if r <= rho { 2.0 } else { 0.0 }).unwrap();
        let tall = tall.scaled(chi.integral() / tall.integral());
        assert_eq!(concentration_compare(&chi, &tall).unwrap().verdict, Verdict::Holds);
        let back = concentration_compare(&tall, &chi).unwrap();
        assert_eq!(back.verdict, Verdict::Fails);
        let first_bad = back.margins.iter().position(|&m| m < -back.tol_report).unwrap();
        assert!(g.nodes()[first_bad] < 0.1);
    }

    #[test]
    fn hardy_littlewood_examples() {
        let g = e2(3.0, 300);
        let f = RadialFunction::from_fn(g.clone(), |r| (2.0 - r).max(0.0)).unwrap();
        let h = RadialFunction::from_fn(g.clone(), |r| (1.5 - r).max(0.0).powi(2)).unwrap();
        assert!(hardy_littlewood_gap(&f, &h).unwrap().abs() < 1e-10);
        let a = RadialFunction::from_fn(g.clone(), |r| if (0.5..=1.0).contains(&r) { 1.0 } else { 0.0 }).unwrap();
        let b = RadialFunction::from_fn(g.clone(), |r| if (1.5..=2.0).contains(&r) { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(a.inner(&b).unwrap(), 0.0);
        let gap = hardy_littlewood_gap(&a, &b).unwrap();
        // nested balls of areas π·0.75 and π·1.75 overlap in the smaller one
        assert!((gap - PI * 0.75).abs() < 0.05, "{gap}");
    }

    #[test]
    fn dominating_datum_properties() {
        let g = e2(3.0, 200);
        let f = RadialFunction::from_fn(g.clone(), |r| ((r - 1.0) * (2.0 - r)).max(0.0) + 0.2 * (2.5 - r).max(0.0))
            .unwrap();
        let d = dominating_datum(&f);
        assert!(d.function.is_nonincreasing(0.0));
        assert!(d.excess_mass >= 0.0 && d.excess_mass < 1e-3, "{}", d.excess_mass);
        let rep = concentration_compare(&f, &d.function).unwrap();
        assert!(rep.min_margin >= -1e-13, "{}", rep.min_margin);
        // already rearranged data are returned unchanged
        let mono = RadialFunction::from_fn(g, |r| (2.0 - r).max(0.0).powi(2)).unwrap();
        assert_eq!(dominating_datum(&mono).function.values(), mono.values());
    }

    fn arb_profile(cells: usize) -> impl Strategy<Value = Vec<f64>> {
        // random step/tent mixtures with compact support
        (prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..2.0, prop::bool::ANY), 1..4)).prop_map(move |parts| {
            (0..=cells)
                .map(|j| {
                    let x = j as f64 / cells as f64;
                    if j == cells {
                        return 0.0;
                    }
                    parts
                        .iter()
                        .map(|&(c, w, h, step)| {
                            let d = (x - c).abs() / (0.05 + 0.3 * w);
                            if step {
                                if d < 1.0 {
                                    h
                                } else {
                                    0.0
                                }
                            } else {
                                h * (1.0 - d).max(0.0)
                            }
                        })
                        .sum()
                })
                .collect()
        })
    }

    fn manifolds() -> Vec<Arc<RadialGrid>> {
        vec![
            grid(ModelManifold::euclidean(2).unwrap(), 2.0, 120),
            grid(ModelManifold::hyperbolic(2).unwrap(), 2.0, 120),
            grid(ModelManifold::sphere(3).unwrap(), 3.0, 120),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(60))]

        #[test]
        fn equimeasurable(v in arb_profile(120), which in 0usize..3, levels in prop::collection::vec(0.01f64..2.0, 50)) {
            let g = manifolds()[which].clone();
            let f = RadialFunction::new(g.clone(), v).unwrap();
            let star = Rearrangement::new(&f).star();
            let m = g.manifold();
            let perim = g.nodes().iter().map(|&r| m.perimeter_ball(r).unwrap()).fold(0.0, f64::max);
            let bound = 2.0 * g.max_spacing() * perim;
            for t in levels {
                let d = (distribution_function(&f, t) - distribution_function(&star, t)).abs();
                prop_assert!(d <= bound, "t={t}: {d} > {bound}");
            }
        }

        #[test]
        fn idempotent(v in arb_profile(120), which in 0usize..3) {
            let f = RadialFunction::new(manifolds()[which].clone(), v).unwrap();
            let s1 = Rearrangement::new(&f).star();
            let s2 = Rearrangement::new(&s1).star();
            for (a, b) in s1.values().iter().zip(s2.values()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn lp_preserved(v in arb_profile(120), which in 0usize..3) {
            let f = RadialFunction::new(manifolds()[which].clone(), v).unwrap();
            let r = Rearrangement::new(&f);
            let star = r.star();
            for p in [1.0, 2.0, 3.0] {
                let exact = f.integral_of(|u| u.powf(p));
                let via_profile = rearranged_power_integral(&r, p);
                prop_assert!((exact - via_profile).abs() <= 1e-9 * exact.max(1.0));
                let (a, b) = (lp_norm(&f, p), lp_norm(&star, p));
                let h = f.grid.max_spacing();
                prop_assert!((a - b).abs() <= 20.0 * h * a.max(1e-12), "p={p}: {a} vs {b}");
            }
            prop_assert_eq!(lp_norm(&f, f64::INFINITY), lp_norm(&star, f64::INFINITY));
        }

        #[test]
        fn monotone(v in arb_profile(120), bump in arb_profile(120), which in 0usize..3) {
            let g = manifolds()[which].clone();
            let f = RadialFunction::new(g.clone(), v.clone()).unwrap();
            let big = RadialFunction::new(g, v.iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
            let (sf, sb) = (Rearrangement::new(&f), Rearrangement::new(&big));
            for (a, b) in sf.star_values().iter().zip(sb.star_values()) {
                prop_assert!(a <= &(b + 1e-12 * b.abs().max(1.0)));
            }
        }

        #[test]
        fn l1_nonexpansive(v in arb_profile(120), w in arb_profile(120), which in 0usize..3) {
            let g = manifolds()[which].clone();
            let f = RadialFunction::new(g.clone(), v).unwrap();
            let h = RadialFunction::new(g, w).unwrap();
            let diff = RadialFunction::new(f.grid.clone(), f.values().iter().zip(h.values()).map(|(a, b)| a - b).collect()).unwrap();
            let lhs = rearranged_l1_distance(&f, &h).unwrap();
            let rhs = diff.integral_of(|u| u);
            prop_assert!(lhs <= rhs + 1e-8, "{lhs} > {rhs}");
        }

        #[test]
        fn hardy_littlewood(v in arb_profile(120), w in arb_profile(120), which in 0usize..3) {
            let g = manifolds()[which].clone();
            let f = RadialFunction::new(g.clone(), v).unwrap();
            let h = RadialFunction::new(g, w).unwrap();
            prop_assert!(hardy_littlewood_gap(&f, &h).unwrap() >= -1e-8);
        }

        #[test]
        fn square_commutes_on_monotone_data(v in arb_profile(120), which in 0usize..3) {
            let g = manifolds()[which].clone();
            let star = Rearrangement::new(&RadialFunction::new(g, v).unwrap()).star();
            let sq = star.map(|x| x * x).unwrap();
            let lhs = Rearrangement::new(&sq);
            for (a, b) in lhs.star_values().iter().zip(star.values()) {
                prop_assert!((a - b * b).abs() <= 1e-9);
            }
        }

        #[test]
        fn square_commutes_to_grid_accuracy(v in arb_profile(120), which in 0usize..3) {
            let g = manifolds()[which].clone();
            let f = RadialFunction::new(g, v).unwrap();
            let sq = f.map(|x| x * x).unwrap();
            let lhs = Rearrangement::new(&sq);
            let rhs = Rearrangement::new(&f);
            // the two sides differ only through cells where the interpolant of f² departs from (PL f)²
            let gap: f64 = lhs.star_values().iter().zip(rhs.star_values()).map(|(a, b)| (a - b * b).abs()).fold(0.0, f64::max);
            prop_assert!(gap <= 4.0 * f.sup_abs().powi(2), "{gap}");
            let mass_gap = (sq.integral_of(|u| u) - f.integral_of(|u| u * u)).abs();
            prop_assert!(mass_gap <= f.sup_abs().powi(2) * f.grid.total_volume() * 0.25);
        }

        #[test]
        fn order_is_transitive(a in arb_profile(120), b in arb_profile(120), c in arb_profile(120)) {
            let g = manifolds()[0].clone();
            let fs: Vec<RadialFunction> = [a, b, c].into_iter().map(|v| RadialFunction::new(g.clone(), v).unwrap()).collect();
            let ab = concentration_compare(&fs[0], &fs[1]).unwrap();
            let bc = concentration_compare(&fs[1], &fs[2]).unwrap();
            if ab.verdict == Verdict::Holds && bc.verdict == Verdict::Holds {
                let ac = concentration_compare(&fs[0], &fs[2]).unwrap();
                prop_assert!(ac.min_margin >= -(ab.tol_report + bc.tol_report));
            }
        }
    }
}
