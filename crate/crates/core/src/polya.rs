//! Dirichlet energies of radial functions, the radial Pólya–Szegő ratio, the
//! Nazarov subadditivity test, annulus isoperimetry and the small-ball
//! curvature coefficients.

use crate::manifold::{ManifoldError, ModelManifold};
use crate::quad::{bracketed_root, gauss_legendre};
use crate::radial::{RadialError, RadialFunction, RadialGrid, Rearrangement};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Relative tolerance for ratio verdicts.
pub const RATIO_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PolyaError {
    #[error("function has zero Dirichlet energy")]
    ZeroEnergy,
    #[error("function takes negative values")]
    Negative,
    #[error("scan grid size {0} is below 32")]
    GridTooSmall(usize),
    #[error("invalid tent family: {0}")]
    InvalidFamily(String),
    #[error(transparent)]
    Radial(#[from] RadialError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

/// ωₙ Σ |slope|² ∫_cell ψⁿ⁻¹ for the piecewise-linear interpolant.
pub fn dirichlet_energy(f: &RadialFunction) -> f64 {
    let grid = f.grid();
    let (r, v) = (grid.nodes(), f.values());
    grid.cells()
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let slope = (v[j + 1] - v[j]) / (r[j + 1] - r[j]);
            slope * slope * c.m0
        })
        .sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct PolyaVerdict {
    pub energy_original: f64,
    pub energy_rearranged: f64,
    pub ratio: f64,
    pub holds: bool,
    #[serde(skip)]
    pub witness: Option<RadialFunction>,
}

pub fn radial_polya_ratio(f: &RadialFunction) -> Result<PolyaVerdict, PolyaError> {
    radial_polya_ratio_with(f, RATIO_TOL)
}

/// Compares the energy of f with that of its exact Schwarz rearrangement.
pub fn radial_polya_ratio_with(f: &RadialFunction, tol: f64) -> Result<PolyaVerdict, PolyaError> {
    f.check_compact_support()?;
    if !f.is_nonnegative() {
        return Err(PolyaError::Negative);
    }
    let energy_original = dirichlet_energy(f);
    if energy_original <= 0.0 {
        return Err(PolyaError::ZeroEnergy);
    }
    let energy_rearranged = Rearrangement::new(f).dirichlet_energy();
    let ratio = energy_rearranged / energy_original;
    let holds = ratio <= 1.0 + tol;
    Ok(PolyaVerdict { energy_original, energy_rearranged, ratio, holds, witness: (!holds).then(|| f.clone()) })
}

/// G on a fine radius table, with local inversion on each table segment.
struct VolumeMap<'a> {
    m: &'a ModelManifold,
    r: Vec<f64>,
    g: Vec<f64>,
    x: Vec<f64>,
    w: Vec<f64>,
}

const TABLE_SEGMENTS: usize = 4096;

impl<'a> VolumeMap<'a> {
    fn new(m: &'a ModelManifold) -> Result<Self, PolyaError> {
        let r_max = if m.r_dom().is_finite() {
            m.r_dom() * (1.0 - 1e-12)
        } else if m.total_volume().is_finite() {
            let total = m.total_volume();
            let mut r = 1.0;
            while r < 64.0 && m.volume_ball(r)? < total * (1.0 - 1e-13) {
                r *= 2.0;
            }
            r
        } else {
            10.0
        };
        let (x, w) = gauss_legendre(8);
        let mut map = VolumeMap { m, r: Vec::new(), g: vec![0.0], x, w };
        map.r = (0..=TABLE_SEGMENTS).map(|i| r_max * i as f64 / TABLE_SEGMENTS as f64).collect();
        for i in 0..TABLE_SEGMENTS {
            let inc = map.segment(map.r[i], map.r[i + 1])?;
            let last = map.g[i];
            map.g.push(last + inc);
        }
        Ok(map)
    }

    fn segment(&self, a: f64, b: f64) -> Result<f64, ManifoldError> {
        let half = 0.5 * (b - a);
        let mut s = 0.0;
        for i in 0..8 {
            s += self.w[i] * self.m.density(a + half * (self.x[i] + 1.0))?;
        }
        Ok(s * half)
    }

    fn y_max(&self) -> f64 {
        self.g[TABLE_SEGMENTS]
    }

    fn radius(&self, y: f64) -> Result<f64, PolyaError> {
        let i = self.g.partition_point(|&g| g <= y).clamp(1, TABLE_SEGMENTS) - 1;
        let (lo, hi) = (self.r[i], self.r[i + 1]);
        let mut failure = None;
        let root = bracketed_root(
            |r| match self.segment(lo, r) {
                Ok(v) => self.g[i] + v - y,
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
            return Err(e.into());
        }
        Ok(root.map_or(if y <= self.g[i] { lo } else { hi }, |r| r.x))
    }

    /// 𝔞(y) = ψ(G⁻¹(y))ⁿ⁻¹.
    fn a(&self, y: f64) -> Result<f64, PolyaError> {
        Ok(self.m.density(self.radius(y)?)?)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NazarovSample {
    pub mu: f64,
    pub nu: f64,
    /// 𝔞(μ+ν) + 𝔞(ν) − 𝔞(μ)
    pub slack: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum NazarovOutcome {
    Pass { pairs: usize, min_slack: f64 },
    Violation { pairs: usize, mu: f64, nu: f64, slack: f64 },
}

impl NazarovOutcome {
    pub fn passes(&self) -> bool {
        matches!(self, NazarovOutcome::Pass { .. })
    }
}

fn log_axis(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1).max(1) as f64).exp()).collect()
}

/// Volume coordinates y = V/ωₙ scanned in each direction.
///
/// Log-uniform from the small end; on finite-volume manifolds half of the
/// points are log-uniform in the distance to the total volume instead.
fn nazarov_axis(y_max: f64, finite: bool, grid_size: usize) -> Vec<f64> {
    let mut axis = if finite {
        let half = grid_size / 2;
        let mut v = log_axis(1e-6 * y_max, 0.5 * y_max, grid_size - half);
        v.extend(log_axis(1e-10 * y_max, 0.5 * y_max, half).into_iter().map(|d| y_max - d));
        v
    } else {
        log_axis(1e-8 * y_max, 0.5 * y_max, grid_size)
    };
    axis.sort_by(f64::total_cmp);
    axis.dedup();
    axis
}

/// Every (μ, ν) pair of the scan with its slack; rows are split over `jobs` threads.
pub fn nazarov_scan(m: &ModelManifold, grid_size: usize, jobs: usize) -> Result<Vec<NazarovSample>, PolyaError> {
    if grid_size < 32 {
        return Err(PolyaError::GridTooSmall(grid_size));
    }
    let map = VolumeMap::new(m)?;
    let y_max = map.y_max();
    let axis = nazarov_axis(y_max, m.total_volume().is_finite(), grid_size);
    let a_axis: Vec<f64> = axis.iter().map(|&y| map.a(y)).collect::<Result<_, _>>()?;
    let row = |i: usize| -> Result<Vec<NazarovSample>, PolyaError> {
        let mut out = Vec::new();
        for (j, &nu) in axis.iter().enumerate() {
            let mu = axis[i];
            if mu + nu >= y_max {
                continue;
            }
            let a_sum = map.a(mu + nu)?;
            let slack = a_sum + a_axis[j] - a_axis[i];
            let scale = a_sum + a_axis[j] + a_axis[i];
            out.push(NazarovSample { mu, nu, slack, violated: slack < -1e-9 * scale });
        }
        Ok(out)
    };
    let rows = parallel_map(axis.len(), jobs, row)?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn nazarov_check(m: &ModelManifold, grid_size: usize) -> Result<NazarovOutcome, PolyaError> {
    nazarov_check_with(m, grid_size, 1)
}

/// Tests 𝔞(μ) ≤ 𝔞(μ+ν) + 𝔞(ν) for 𝔞(y) = ψ(G⁻¹(y))ⁿ⁻¹ over the scan grid.
pub fn nazarov_check_with(m: &ModelManifold, grid_size: usize, jobs: usize) -> Result<NazarovOutcome, PolyaError> {
    let samples = nazarov_scan(m, grid_size, jobs)?;
    let pairs = samples.len();
    let worst = samples.iter().min_by(|a, b| a.slack.total_cmp(&b.slack));
    let worst_violation = samples.iter().filter(|s| s.violated).min_by(|a, b| a.slack.total_cmp(&b.slack));
    Ok(match worst_violation {
        Some(s) => NazarovOutcome::Violation { pairs, mu: s.mu, nu: s.nu, slack: s.slack },
        None => NazarovOutcome::Pass { pairs, min_slack: worst.map_or(f64::INFINITY, |s| s.slack) },
    })
}

/// ωₙ[ψ(a)ⁿ⁻¹ + ψ(b)ⁿ⁻¹] minus the perimeter of the centered ball with the annulus' volume.
pub fn annulus_isoperimetric_check(m: &ModelManifold, a: f64, b: f64) -> Result<f64, PolyaError> {
    if !(a >= 0.0 && a < b && b < m.r_dom()) {
        return Err(ManifoldError::DomainExceeded { r: b, r_dom: m.r_dom() }.into());
    }
    let boundary = m.perimeter_ball(a)? + m.perimeter_ball(b)?;
    if a == 0.0 {
        return Ok(boundary - m.perimeter_ball(b)?);
    }
    let v = m.volume_ball(b)? - m.volume_ball(a)?;
    let r = m.radius_of_volume(v)?;
    Ok(boundary - m.perimeter_ball(r)?)
}

/// Annulus tents f_{a,b}(r) = min(r−a, b−r)⁺ on an (a, b−a) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TentFamily {
    pub a_min: f64,
    pub a_max: f64,
    pub a_steps: usize,
    pub width_min: f64,
    pub width_max: f64,
    pub width_steps: usize,
    /// Cells on each flank of a tent.
    #[serde(default = "default_tent_cells")]
    pub cells: usize,
}

fn default_tent_cells() -> usize {
    32
}

impl TentFamily {
    fn validate(&self, m: &ModelManifold) -> Result<(), PolyaError> {
        let bad = |s: &str| Err(PolyaError::InvalidFamily(s.to_string()));
        if !(self.a_min >= 0.0 && self.a_max >= self.a_min) {
            return bad("need 0 ≤ a_min ≤ a_max");
        }
        if !(self.width_min > 0.0 && self.width_max >= self.width_min) {
            return bad("need 0 < width_min ≤ width_max");
        }
        if self.a_steps == 0 || self.width_steps == 0 || self.cells < 2 {
            return bad("steps must be positive and cells at least 2");
        }
        if !(self.a_max + self.width_max < m.r_dom()) {
            return bad("tents must lie inside the model's domain");
        }
        Ok(())
    }

    fn values(min: f64, max: f64, steps: usize) -> Vec<f64> {
        if steps == 1 {
            return vec![min];
        }
        (0..steps).map(|i| min + (max - min) * i as f64 / (steps - 1) as f64).collect()
    }

    pub fn candidates(&self) -> Vec<(f64, f64)> {
        let widths = Self::values(self.width_min, self.width_max, self.width_steps);
        Self::values(self.a_min, self.a_max, self.a_steps)
            .into_iter()
            .flat_map(|a| widths.iter().map(move |&w| (a, a + w)))
            .collect()
    }
}

/// The tent min(r−a, b−r)⁺ on a grid of `[0, b]` with nodes at a, (a+b)/2 and b.
pub fn annulus_tent(m: Arc<ModelManifold>, a: f64, b: f64, cells: usize) -> Result<RadialFunction, PolyaError> {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut nodes = Vec::new();
    if a > 0.0 {
        let inner = ((cells as f64 * a / half).ceil() as usize).clamp(1, 4 * cells);
        nodes.extend((0..inner).map(|i| a * i as f64 / inner as f64));
    }
    nodes.extend((0..cells).map(|i| a + half * i as f64 / cells as f64));
    nodes.extend((0..cells).map(|i| mid + half * i as f64 / cells as f64));
    nodes.push(b);
    let grid = RadialGrid::from_nodes(m, nodes)?;
    let f = RadialFunction::from_fn(grid, |r| (r - a).min(b - r).max(0.0))?;
    Ok(f)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TentRatio {
    pub a: f64,
    pub b: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct ViolationSearch {
    pub evaluated: Vec<TentRatio>,
    pub best: TentRatio,
    /// The maximizing tent when its ratio exceeds 1 + tol.
    pub witness: Option<RadialFunction>,
}

pub fn find_radial_violation(m: &Arc<ModelManifold>, family: &TentFamily) -> Result<ViolationSearch, PolyaError> {
    find_radial_violation_with(m, family, RATIO_TOL, 1)
}

pub fn find_radial_violation_with(
    m: &Arc<ModelManifold>,
    family: &TentFamily,
    tol: f64,
    jobs: usize,
) -> Result<ViolationSearch, PolyaError> {
    family.validate(m)?;
    let candidates = family.candidates();
    let evaluated = parallel_map(candidates.len(), jobs, |i| {
        let (a, b) = candidates[i];
        let f = annulus_tent(m.clone(), a, b, family.cells)?;
        let v = radial_polya_ratio_with(&f, tol)?;
        Ok::<_, PolyaError>(TentRatio { a, b, ratio: v.ratio })
    })?;
    let best = *evaluated.iter().max_by(|x, y| x.ratio.total_cmp(&y.ratio)).expect("family is nonempty");
    let witness =
        if best.ratio > 1.0 + tol { Some(annulus_tent(m.clone(), best.a, best.b, family.cells)?) } else { None };
    Ok(ViolationSearch { evaluated, best, witness })
}

/// Runs `f(0..count)` on up to `jobs` threads; results keep index order.
pub(crate) fn parallel_map<T: Send, E: Send>(
    count: usize,
    jobs: usize,
    f: impl Fn(usize) -> Result<T, E> + Sync,
) -> Result<Vec<T>, E> {
    let jobs = jobs.clamp(1, count.max(1));
    if jobs == 1 {
        return (0..count).map(&f).collect();
    }
    let chunk = count.div_ceil(jobs);
    let f = &f;
    let parts: Vec<Result<Vec<T>, E>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|k| scope.spawn(move || (k * chunk..((k + 1) * chunk).min(count)).map(f).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// ρ²-coefficients of ∫|∇f|² and of the Hölder lower bound on ∫|∇f⋆|² for a
/// small cone f centered at distance `r_hat` from the pole (both relative to
/// (ωₙ/n)ρⁿ⁻²).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvatureGap {
    pub s_o: f64,
    pub s_hat: f64,
    /// −S(ô)/(6(n+2))
    pub coeff_original: f64,
    /// −S(ô)/(6(n+2)) + ((n−1)S(ô) − S(o))/(3(n+2)²), the closed-form lower bound
    pub coeff_lowerbound: f64,
    pub gap: f64,
    /// (n−1)(S(ô) − S(o))/(6(n+2)²), the correction inside the squared bracket
    pub coeff_intermediate: f64,
    /// Expansion of the Hölder quotient built from the squared bracket
    pub coeff_quotient: f64,
    /// Lower-bound coefficient rederived with the pole curvature in the
    /// perimeter of the equal-volume centered ball
    pub coeff_lowerbound_series: f64,
    /// (S(ô) − S(o))/(n+2)²
    pub gap_series: f64,
}

pub fn curvature_gap(m: &ModelManifold, r_hat: f64) -> Result<CurvatureGap, PolyaError> {
    if !(r_hat > 0.0 && r_hat < m.r_dom()) {
        return Err(ManifoldError::DomainExceeded { r: r_hat, r_dom: m.r_dom() }.into());
    }
    let s_o = m.scalar_curvature(0.0)?;
    let s_hat = m.scalar_curvature(r_hat)?;
    Ok(curvature_gap_from(m.n(), s_o, s_hat))
}

/// Coefficients for given pole and center scalar curvatures.
pub fn curvature_gap_from(n: usize, s_o: f64, s_hat: f64) -> CurvatureGap {
    let nf = n as f64;
    let q = nf + 2.0;
    let coeff_original = -s_hat / (6.0 * q);
    let coeff_lowerbound = coeff_original + ((nf - 1.0) * s_hat - s_o) / (3.0 * q * q);
    let coeff_intermediate = (nf - 1.0) * (s_hat - s_o) / (6.0 * q * q);
    let bracket = coeff_original + coeff_intermediate;
    let coeff_quotient = 2.0 * bracket - coeff_original;
    // perimeter term −S(o)/(6n) at the pole instead of −S(ô)/(6n)
    let bracket_pole = -s_o / (6.0 * q) + (nf - 1.0) * (s_o - s_hat) / (6.0 * q * q);
    let coeff_lowerbound_series = 2.0 * bracket_pole - coeff_original;
    CurvatureGap {
        s_o,
        s_hat,
        coeff_original,
        coeff_lowerbound,
        gap: coeff_lowerbound - coeff_original,
        coeff_intermediate,
        coeff_quotient,
        coeff_lowerbound_series,
        gap_series: coeff_lowerbound_series - coeff_original,
    }
}
