//! Radial grids, piecewise-linear radial functions and their integrals.
//!
//! Every cell carries a degree-15 Legendre fit of its volume density
//! ωₙψⁿ⁻¹, so partial cell volumes and first moments are closed-form
//! polynomials. Level sets of piecewise-linear functions are then measured
//! exactly up to the fit error, which is at rounding level for smooth ψ.

mod rearrange;

pub use rearrange::{
    concentration_compare, concentration_compare_with, dominating_datum, hardy_littlewood_gap, rearranged_l1_distance,
    rearranged_power_integral, schwarz_rearrangement, CompareOptions, ConcentrationReport, CrossCheck, DominatingDatum,
    Rearrangement, Verdict,
};

use crate::manifold::{ManifoldError, ModelManifold};
use crate::quad::gauss_legendre;
use std::io::{BufRead, Write};
use std::sync::{Arc, OnceLock};
use thiserror::Error;

pub const MIN_CELLS: usize = 16;

#[derive(Debug, Error)]
pub enum RadialError {
    #[error("grid needs at least {MIN_CELLS} cells, got {0}")]
    TooFewCells(usize),
    #[error("grid nodes must start at 0 and increase strictly")]
    BadNodes,
    #[error("outer radius {r} is outside the profile domain (< {r_dom})")]
    RadiusOutsideDomain { r: f64, r_dom: f64 },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("value at node {0} is not finite")]
    NonFinite(usize),
    #[error("function is {value} at the outer radius; compact support is required")]
    UnsupportedTail { value: f64 },
    #[error("functions live on different grids")]
    GridMismatch,
    #[error("malformed CSV at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const FIT_POINTS: usize = 16;

fn fit_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(FIT_POINTS))
}

fn legendre_all(x: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for k in 1..out.len() - 1 {
        out[k + 1] = ((2 * k + 1) as f64 * x * out[k] - k as f64 * out[k - 1]) / (k + 1) as f64;
    }
}

fn clenshaw(a: &[f64], x: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for k in (0..a.len()).rev() {
        let kf = k as f64;
        let b0 = a[k] + (2.0 * kf + 1.0) / (kf + 1.0) * x * b1 - (kf + 1.0) / (kf + 2.0) * b2;
        b2 = b1;
        b1 = b0;
    }
    b1
}

// series of x·f from the series of f
fn times_x(c: &[f64]) -> Vec<f64> {
    let mut e = vec![0.0; c.len() + 1];
    for (k, &ck) in c.iter().enumerate() {
        let d = (2 * k + 1) as f64;
        e[k + 1] += ck * (k + 1) as f64 / d;
        if k > 0 {
            e[k - 1] += ck * k as f64 / d;
        }
    }
    e
}

// series of ∫_{-1}^x f
fn antiderivative(c: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; c.len() + 1];
    a[0] += c[0];
    a[1] += c[0];
    for k in 1..c.len() {
        let d = (2 * k + 1) as f64;
        a[k + 1] += c[k] / d;
        a[k - 1] -= c[k] / d;
    }
    a
}

/// Volume density of one cell as a polynomial in the local coordinate θ ∈ [0, 1].
#[derive(Debug, Clone)]
pub struct CellDensity {
    rho: Vec<f64>,
    anti0: Vec<f64>,
    anti1: Vec<f64>,
    /// ∫₀¹ ρ dθ: cell volume
    pub m0: f64,
    /// ∫₀¹ θ ρ dθ
    pub m1: f64,
    /// ∫₀¹ θ² ρ dθ
    pub m2: f64,
}

impl CellDensity {
    fn fit(samples: &[f64]) -> CellDensity {
        let (x, w) = fit_rule();
        let mut c = vec![0.0; FIT_POINTS];
        let mut p = vec![0.0; FIT_POINTS];
        for i in 0..FIT_POINTS {
            legendre_all(x[i], &mut p);
            for k in 0..FIT_POINTS {
                c[k] += (2 * k + 1) as f64 / 2.0 * w[i] * samples[i] * p[k];
            }
        }
        let xc = times_x(&c);
        let theta_rho: Vec<f64> = (0..xc.len()).map(|k| 0.5 * (c.get(k).copied().unwrap_or(0.0) + xc[k])).collect();
        let xt = times_x(&theta_rho);
        let m2 = 0.5 * (theta_rho[0] + xt[0]);
        CellDensity {
            anti0: antiderivative(&c),
            anti1: antiderivative(&theta_rho),
            m0: c[0],
            m1: theta_rho[0],
            m2,
            rho: c,
        }
    }

    /// ρ(θ) per unit θ.
    pub fn density(&self, theta: f64) -> f64 {
        clenshaw(&self.rho, 2.0 * theta - 1.0)
    }

    /// ∫₀^θ ρ.
    pub fn partial(&self, theta: f64) -> f64 {
        if theta <= 0.0 {
            0.0
        } else if theta >= 1.0 {
            self.m0
        } else {
            0.5 * clenshaw(&self.anti0, 2.0 * theta - 1.0)
        }
    }

    /// ∫₀^θ θ′ρ(θ′)dθ′.
    pub fn moment(&self, theta: f64) -> f64 {
        if theta <= 0.0 {
            0.0
        } else if theta >= 1.0 {
            self.m1
        } else {
            0.5 * clenshaw(&self.anti1, 2.0 * theta - 1.0)
        }
    }

    /// ∫_{θa}^{θb} (c0 + c1 θ) ρ dθ.
    pub fn linear_integral(&self, th_a: f64, th_b: f64, c0: f64, c1: f64) -> f64 {
        c0 * (self.partial(th_b) - self.partial(th_a)) + c1 * (self.moment(th_b) - self.moment(th_a))
    }
}

/// Nodes on `[0, R]` with hat-function quadrature weights for the measure ωₙψⁿ⁻¹dr.
#[derive(Debug)]
pub struct RadialGrid {
    manifold: Arc<ModelManifold>,
    nodes: Vec<f64>,
    cells: Vec<CellDensity>,
    weights: Vec<f64>,
    node_volumes: Vec<f64>,
}

impl RadialGrid {
    pub fn uniform(manifold: Arc<ModelManifold>, r_outer: f64, cells: usize) -> Result<Arc<Self>, RadialError> {
        let nodes = (0..=cells).map(|j| if j == cells { r_outer } else { r_outer * j as f64 / cells as f64 }).collect();
        Self::from_nodes(manifold, nodes)
    }

    pub fn from_nodes(manifold: Arc<ModelManifold>, nodes: Vec<f64>) -> Result<Arc<Self>, RadialError> {
        let m = nodes.len().saturating_sub(1);
        if m < MIN_CELLS {
            return Err(RadialError::TooFewCells(m));
        }
        if nodes[0] != 0.0 || nodes.windows(2).any(|w| !(w[1] > w[0])) || !nodes[m].is_finite() {
            return Err(RadialError::BadNodes);
        }
        let r_dom = manifold.r_dom();
        if nodes[m] >= r_dom && !(nodes[m] == r_dom && manifold.kind() == crate::manifold::ProfileKind::Table) {
            return Err(RadialError::RadiusOutsideDomain { r: nodes[m], r_dom });
        }
        let (x, _) = fit_rule();
        let omega = manifold.omega_n();
        let mut cells = Vec::with_capacity(m);
        let mut samples = [0.0; FIT_POINTS];
        for j in 0..m {
            let h = nodes[j + 1] - nodes[j];
            for i in 0..FIT_POINTS {
                let r = nodes[j] + h * 0.5 * (x[i] + 1.0);
                samples[i] = omega * h * manifold.density(r)?;
            }
            cells.push(CellDensity::fit(&samples));
        }
        let mut weights = vec![0.0; m + 1];
        for (j, c) in cells.iter().enumerate() {
            weights[j] += c.m0 - c.m1;
            weights[j + 1] += c.m1;
        }
        let mut node_volumes = Vec::with_capacity(m + 1);
        let mut acc = 0.0;
        node_volumes.push(acc);
        for c in &cells {
            acc += c.m0;
            node_volumes.push(acc);
        }
        Ok(Arc::new(RadialGrid { manifold, nodes, cells, weights, node_volumes }))
    }

    pub fn manifold(&self) -> &Arc<ModelManifold> {
        &self.manifold
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cells(&self) -> &[CellDensity] {
        &self.cells
    }

    /// Number of cells M (nodes are M+1).
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn outer_radius(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// V(B_{r_j}) for every node, accumulated cell by cell.
    pub fn node_volumes(&self) -> &[f64] {
        &self.node_volumes
    }

    pub fn total_volume(&self) -> f64 {
        self.node_volumes[self.node_volumes.len() - 1]
    }

    /// ωₙψⁿ⁻¹ at the radius of the centered ball of volume `s`, from the cell fits.
    pub fn perimeter_at_volume(&self, s: f64) -> f64 {
        let m = self.cells.len();
        let j = self.node_volumes.partition_point(|&v| v <= s).clamp(1, m) - 1;
        let c = &self.cells[j];
        let h = self.nodes[j + 1] - self.nodes[j];
        let target = s - self.node_volumes[j];
        let th = if target <= 0.0 {
            0.0
        } else if target >= c.m0 {
            1.0
        } else {
            crate::quad::bracketed_root(|th| c.partial(th) - target, 0.0, 1.0, 1e-15, 0.0, 200).map_or(0.5, |r| r.x)
        };
        c.density(th) / h
    }

    pub fn max_spacing(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn same_as(&self, other: &RadialGrid) -> bool {
        std::ptr::eq(self, other) || (self.nodes == other.nodes && Arc::ptr_eq(&self.manifold, &other.manifold))
    }

    /// Cell index containing `r` (the last cell for r = R).
    pub fn locate(&self, r: f64) -> usize {
        let p = self.nodes.partition_point(|&x| x <= r);
        p.clamp(1, self.cells.len()) - 1
    }
}

/// Samples at grid nodes, interpreted piecewise-linearly in r.
#[derive(Debug, Clone)]
pub struct RadialFunction {
    grid: Arc<RadialGrid>,
    values: Vec<f64>,
}

impl RadialFunction {
    pub fn new(grid: Arc<RadialGrid>, values: Vec<f64>) -> Result<Self, RadialError> {
        if values.len() != grid.nodes.len() {
            return Err(RadialError::LengthMismatch { expected: grid.nodes.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(RadialError::NonFinite(i));
        }
        Ok(RadialFunction { grid, values })
    }

    pub fn from_fn(grid: Arc<RadialGrid>, f: impl Fn(f64) -> f64) -> Result<Self, RadialError> {
        let values = grid.nodes.iter().map(|&r| f(r)).collect();
        Self::new(grid, values)
    }

    pub fn zeros(grid: Arc<RadialGrid>) -> Self {
        let n = grid.nodes.len();
        RadialFunction { grid, values: vec![0.0; n] }
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, RadialError> {
        Self::new(self.grid.clone(), values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, RadialError> {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scaled(&self, c: f64) -> Self {
        RadialFunction { grid: self.grid.clone(), values: self.values.iter().map(|v| c * v).collect() }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn is_nonincreasing(&self, tol: f64) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0] + tol)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Piecewise-linear value at `r`; zero beyond the outer radius.
    pub fn value_at(&self, r: f64) -> f64 {
        if r > self.grid.outer_radius() || r < 0.0 {
            return 0.0;
        }
        let j = self.grid.locate(r);
        let (a, b) = (self.grid.nodes[j], self.grid.nodes[j + 1]);
        let t = (r - a) / (b - a);
        self.values[j] + t * (self.values[j + 1] - self.values[j])
    }

    /// Piecewise-linear transfer onto another grid (zero outside the source support).
    pub fn resample(&self, grid: Arc<RadialGrid>) -> Result<Self, RadialError> {
        let values = grid.nodes.iter().map(|&r| self.value_at(r)).collect();
        Self::new(grid, values)
    }

    pub fn check_compact_support(&self) -> Result<(), RadialError> {
        let last = self.values[self.values.len() - 1];
        if last != 0.0 {
            return Err(RadialError::UnsupportedTail { value: last });
        }
        Ok(())
    }

    /// Exact integral of the piecewise-linear function against the volume measure.
    pub fn integral(&self) -> f64 {
        self.weights_dot(&self.values)
    }

    fn weights_dot(&self, v: &[f64]) -> f64 {
        self.grid.weights.iter().zip(v).map(|(w, x)| w * x).sum()
    }

    /// ∫_{B_{r_j}} f at every node, for the piecewise-linear interpretation.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        out.push(acc);
        for (j, c) in self.grid.cells.iter().enumerate() {
            acc += (c.m0 - c.m1) * self.values[j] + c.m1 * self.values[j + 1];
            out.push(acc);
        }
        out
    }

    /// Exact ∫ H(|f|) for the piecewise-linear interpretation, with H evaluated by
    /// 16-point Gauss–Legendre on each sign-definite piece (exact for polynomial H of degree ≤ 16).
    pub fn integral_of(&self, h: impl Fn(f64) -> f64) -> f64 {
        let (x, w) = fit_rule();
        let mut total = 0.0;
        for (j, c) in self.grid.cells.iter().enumerate() {
            let (a, b) = (self.values[j], self.values[j + 1]);
            let mut pieces = [(0.0, 1.0); 2];
            let mut count = 1;
            if a * b < 0.0 {
                let z = a / (a - b);
                pieces = [(0.0, z), (z, 1.0)];
                count = 2;
            }
            for &(t0, t1) in &pieces[..count] {
                let half = 0.5 * (t1 - t0);
                for i in 0..FIT_POINTS {
                    let th = t0 + half * (x[i] + 1.0);
                    let v = a + (b - a) * th;
                    total += w[i] * half * h(v.abs()) * c.density(th);
                }
            }
        }
        total
    }

    /// Exact ∫ f g for two piecewise-linear functions on the same grid.
    pub fn inner(&self, other: &RadialFunction) -> Result<f64, RadialError> {
        if !self.grid.same_as(&other.grid) {
            return Err(RadialError::GridMismatch);
        }
        let mut s = 0.0;
        for (j, c) in self.grid.cells.iter().enumerate() {
            let (a, da) = (self.values[j], self.values[j + 1] - self.values[j]);
            let (b, db) = (other.values[j], other.values[j + 1] - other.values[j]);
            s += a * b * c.m0 + (a * db + b * da) * c.m1 + da * db * c.m2;
        }
        Ok(s)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), RadialError> {
        writeln!(w, "r,value")?;
        for (r, v) in self.grid.nodes.iter().zip(&self.values) {
            writeln!(w, "{},{}", fmt17(*r), fmt17(*v))?;
        }
        Ok(())
    }

    /// Reads `r,value` rows; radii must match the grid nodes to 1e−12.
    pub fn read_csv<R: BufRead>(grid: Arc<RadialGrid>, reader: R) -> Result<Self, RadialError> {
        let (rs, vs) = read_two_columns(reader, "r,value")?;
        if rs.len() != grid.nodes.len() {
            return Err(RadialError::LengthMismatch { expected: grid.nodes.len(), got: rs.len() });
        }
        for (i, (r, node)) in rs.iter().zip(&grid.nodes).enumerate() {
            if (r - node).abs() > 1e-12 * node.abs().max(1.0) {
                return Err(RadialError::Csv { line: i + 2, msg: format!("radius {r} does not match node {node}") });
            }
        }
        Self::new(grid, vs)
    }
}

/// Parses a two-column CSV with the given header.
pub fn read_two_columns<R: BufRead>(reader: R, header: &str) -> Result<(Vec<f64>, Vec<f64>), RadialError> {
    let mut lines = reader.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == header => {}
        Some(Ok(h)) => return Err(RadialError::Csv { line: 1, msg: format!("expected header `{header}`, got `{h}`") }),
        Some(Err(e)) => return Err(e.into()),
        None => return Err(RadialError::Csv { line: 1, msg: "empty file".into() }),
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64, RadialError> {
            s.and_then(|t| t.trim().parse::<f64>().ok())
                .ok_or(RadialError::Csv { line: i + 2, msg: format!("cannot parse `{line}`") })
        };
        a.push(parse(it.next())?);
        b.push(parse(it.next())?);
        if it.next().is_some() {
            return Err(RadialError::Csv { line: i + 2, msg: "too many columns".into() });
        }
    }
    Ok((a, b))
}

/// Formats with 17 significant digits, the round-trip precision of f64.
pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    format!("{:.16e}", x)
}

/// Weighted-quadrature Lᵖ norm; `p = f64::INFINITY` gives the nodal maximum.
pub fn lp_norm(f: &RadialFunction, p: f64) -> f64 {
    if p.is_infinite() {
        return f.sup_abs();
    }
    let s: f64 = f.grid.weights.iter().zip(&f.values).map(|(w, v)| w * v.abs().powf(p)).sum();
    s.powf(1.0 / p)
}

/// V({|f| > t}) for the piecewise-linear interpretation of `f`.
pub fn distribution_function(f: &RadialFunction, t: f64) -> f64 {
    rearrange::level_volume(f, t, false)
}
