//! Scenario files and experiment orchestration for the `lab` binary.

mod run;

pub use run::{emit_outputs, run_command, run_scenarios, Check, Command, ExperimentResult, OutputFile, RunContext};

use crate::elliptic::{EllipticError, Nonlinearity, NonlinearitySpec};
use crate::expr::{parse_expression, EvalDomainError, ParseError};
use crate::manifold::{ManifoldError, ManifoldSpec, ModelManifold};
use crate::parabolic::ParabolicError;
use crate::polya::{PolyaError, TentFamily};
use crate::radial::{RadialError, RadialFunction, RadialGrid};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_CELLS: usize = 400;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("experiment inconsistent: {0}")]
    ExperimentInconsistent(String),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Radial(#[from] RadialError),
    #[error(transparent)]
    Elliptic(#[from] EllipticError),
    #[error(transparent)]
    Parabolic(#[from] ParabolicError),
    #[error(transparent)]
    Polya(#[from] PolyaError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalDomainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub manifold: ManifoldSpec,
    #[serde(default)]
    pub nonlinearity: Option<NonlinearitySpec>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub time: Option<TimeSpec>,
    #[serde(default)]
    pub datum: Option<DatumSpec>,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Outer radius; chosen from the datum when absent.
    #[serde(rename = "R", default)]
    pub r_outer: Option<f64>,
    #[serde(rename = "M", default = "default_cells")]
    pub cells: usize,
}

fn default_cells() -> usize {
    DEFAULT_CELLS
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { r_outer: None, cells: DEFAULT_CELLS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub h: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    /// Steps between written states; a quarter of the run when absent.
    #[serde(default)]
    pub output_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatumSpec {
    /// amplitude·exp(−r²/(2σ²))
    Gaussian {
        sigma: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// Tent on [a, b] with its peak `height` at (a+b)/2.
    AnnulusTent {
        a: f64,
        b: f64,
        #[serde(default = "one")]
        height: f64,
    },
    /// u = u[i] on [r[i], r[i+1]), zero beyond the last radius.
    StepTable { r: Vec<f64>, u: Vec<f64> },
    /// Expression in `r`.
    Expression { u0: String },
    /// Sum of `count` random tents inside B_{R/2}, drawn with the run seed.
    RandomTents { count: usize },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentSpec {
    Concentration {},
    Falsify {
        #[serde(default)]
        r_hat: Option<f64>,
        #[serde(default)]
        family: Option<TentFamily>,
        #[serde(default = "default_nazarov_grid")]
        nazarov_grid: usize,
    },
}

fn default_nazarov_grid() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "one")]
    pub tol_scale: f64,
    /// Regularization k for φ; 64 is used for non-bijective φ when absent.
    #[serde(default)]
    pub k_reg: Option<f64>,
    /// Floor for concentration margins and A_max.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    1e-7
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { tol_scale: 1.0, k_reg: None, margin: default_margin() }
    }
}

impl Scenario {
    pub fn from_json(src: &str) -> Result<Self, LabError> {
        Ok(serde_json::from_str(src)?)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let src = std::fs::read_to_string(path)
            .map_err(|source| LabError::Read { path: path.display().to_string(), source })?;
        Self::from_json(&src)
    }
}

impl DatumSpec {
    /// Radius outside which the datum vanishes or is negligible.
    fn extent(&self) -> Option<f64> {
        match self {
            DatumSpec::Gaussian { sigma, .. } => Some(4.0 * sigma),
            DatumSpec::AnnulusTent { b, .. } => Some(*b),
            DatumSpec::StepTable { r, .. } => r.last().copied(),
            DatumSpec::Expression { .. } | DatumSpec::RandomTents { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), LabError> {
        let bad = |s: String| Err(LabError::Invalid(s));
        match self {
            DatumSpec::Gaussian { sigma, amplitude } => {
                if !(*sigma > 0.0 && amplitude.is_finite()) {
                    return bad(format!("gaussian needs σ > 0 and a finite amplitude, got σ = {sigma}"));
                }
            }
            DatumSpec::AnnulusTent { a, b, height } => {
                if !(*a >= 0.0 && b > a && height.is_finite()) {
                    return bad(format!("annulus tent needs 0 ≤ a < b, got a = {a}, b = {b}"));
                }
            }
            DatumSpec::StepTable { r, u } => {
                if r.len() != u.len() + 1 || u.is_empty() {
                    return bad("step table needs one more radius than values".into());
                }
                if r[0] != 0.0 || r.windows(2).any(|w| w[1] <= w[0]) {
                    return bad("step table radii must start at 0 and increase".into());
                }
                if u.iter().any(|v| !v.is_finite()) {
                    return bad("step table values must be finite".into());
                }
            }
            DatumSpec::Expression { u0 } => {
                let e = parse_expression(u0)?;
                if e.variables().iter().any(|v| v != "r") {
                    return bad(format!("datum may only depend on r: {u0}"));
                }
            }
            DatumSpec::RandomTents { count } => {
                if *count == 0 {
                    return bad("random_tents needs count ≥ 1".into());
                }
            }
        }
        Ok(())
    }

    fn sample(&self, grid: Arc<RadialGrid>, seed: u64) -> Result<RadialFunction, LabError> {
        let f = match self {
            DatumSpec::Gaussian { sigma, amplitude } => {
                RadialFunction::from_fn(grid, |r| amplitude * (-r * r / (2.0 * sigma * sigma)).exp())?
            }
            DatumSpec::AnnulusTent { a, b, height } => {
                let half = 0.5 * (b - a);
                RadialFunction::from_fn(grid, |r| height * ((r - a).min(b - r) / half).max(0.0))?
            }
            DatumSpec::StepTable { r, u } => RadialFunction::from_fn(grid, |x| {
                r.windows(2).zip(u).find(|(w, _)| x >= w[0] && x < w[1]).map_or(0.0, |(_, &v)| v)
            })?,
            DatumSpec::Expression { u0 } => {
                let e = parse_expression(u0)?;
                let values = grid.nodes().iter().map(|&r| e.eval(r)).collect::<Result<Vec<_>, _>>()?;
                RadialFunction::new(grid, values)?
            }
            DatumSpec::RandomTents { count } => {
                let top = 0.5 * grid.outer_radius();
                let mut rng = StdRng::seed_from_u64(seed);
                let tents: Vec<(f64, f64, f64)> = (0..*count)
                    .map(|_| (rng.gen_range(0.0..top), rng.gen_range(0.05..0.25) * top, rng.gen_range(0.2..2.0)))
                    .collect();
                RadialFunction::from_fn(grid, |r| {
                    tents.iter().map(|&(c, w, a)| a * (1.0 - (r - c).abs() / w).max(0.0)).sum()
                })?
            }
        };
        Ok(f)
    }
}

/// A scenario with every section turned into its runtime object.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub manifold: Arc<ModelManifold>,
    pub grid: Option<Arc<RadialGrid>>,
    pub nonlinearity: Option<Nonlinearity>,
    pub datum: Option<RadialFunction>,
}

impl Prepared {
    /// Validates every part of the scenario before any solve starts.
    pub fn new(scenario: Scenario, seed: u64) -> Result<Self, LabError> {
        let manifold = Arc::new(ModelManifold::from_spec(&scenario.manifold)?);
        let nonlinearity = scenario.nonlinearity.as_ref().map(Nonlinearity::from_spec).transpose()?;
        if let Some(k) = scenario.tolerances.k_reg {
            if !(k > 0.0 && k.is_finite()) {
                return Err(LabError::Invalid(format!("k_reg must be positive, got {k}")));
            }
        }
        if !(scenario.tolerances.tol_scale > 0.0 && scenario.tolerances.margin >= 0.0) {
            return Err(LabError::Invalid("tolerances must be positive".into()));
        }
        if let Some(t) = &scenario.time {
            crate::parabolic::step_count(t.h, t.t_final)?;
        }
        if let Some(d) = &scenario.datum {
            d.validate()?;
        }
        let r_outer = match (scenario.grid.r_outer, scenario.datum.as_ref().and_then(DatumSpec::extent)) {
            (Some(r), _) => Some(r),
            (None, Some(e)) => Some((2.0 * e).min(0.99 * manifold.r_dom())),
            (None, None) => None,
        };
        if let Some(r) = r_outer {
            if !(r > 0.0 && r < manifold.r_dom()) {
                return Err(LabError::Invalid(format!("R = {r} must lie in (0, {})", manifold.r_dom())));
            }
        }
        let grid = r_outer.map(|r| RadialGrid::uniform(manifold.clone(), r, scenario.grid.cells)).transpose()?;
        let datum = match (&scenario.datum, &grid) {
            (Some(d), Some(g)) => Some(d.sample(g.clone(), seed)?),
            (Some(_), None) => return Err(LabError::Invalid("grid.R is required for this datum".into())),
            _ => None,
        };
        Ok(Prepared { scenario, manifold, grid, nonlinearity, datum })
    }

    pub fn require_grid(&self) -> Result<Arc<RadialGrid>, LabError> {
        self.grid.clone().ok_or_else(|| LabError::Invalid("grid.R is required".into()))
    }

    pub fn require_datum(&self) -> Result<&RadialFunction, LabError> {
        self.datum.as_ref().ok_or_else(|| LabError::Invalid("a datum is required".into()))
    }

    pub fn require_nonlinearity(&self) -> Result<&Nonlinearity, LabError> {
        self.nonlinearity.as_ref().ok_or_else(|| LabError::Invalid("a nonlinearity is required".into()))
    }

    pub fn require_time(&self) -> Result<&TimeSpec, LabError> {
        self.scenario.time.as_ref().ok_or_else(|| LabError::Invalid("a time section is required".into()))
    }
}
