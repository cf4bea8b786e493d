//! Experiment runners. Each produces its CSV bodies in memory; `emit_outputs`
//! writes them together with the run manifest.

use super::{ExperimentSpec, LabError, Prepared, Scenario};
use crate::elliptic::{elliptic_concentration_check_with, implicit_step};
use crate::manifold::Parabolicity;
use crate::parabolic::{effective_nonlinearity, evolve, output_indices, step_count, EvolveOptions, Trajectory};
use crate::polya::{
    curvature_gap, find_radial_violation_with, nazarov_scan, parallel_map, radial_polya_ratio_with, TentFamily,
    RATIO_TOL,
};
use crate::radial::{
    concentration_compare_with, dominating_datum, fmt17, lp_norm, CompareOptions, ConcentrationReport, RadialFunction,
    Rearrangement, Verdict,
};
use serde::Serialize;
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    ManifoldInfo,
    Rearrange,
    PolyaCheck,
    PolyaFalsify,
    EllipticSolve,
    Evolve,
    Concentration,
}

impl Command {
    /// Prefix of every file the command writes.
    pub fn label(self) -> &'static str {
        match self {
            Command::ManifoldInfo => "manifold_info",
            Command::Rearrange => "rearrange",
            Command::PolyaCheck => "polya_check",
            Command::PolyaFalsify => "polya_falsify",
            Command::EllipticSolve => "elliptic_solve",
            Command::Evolve => "evolve",
            Command::Concentration => "concentration",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunContext {
    pub jobs: usize,
    pub seed: u64,
    /// Global multiplier on every tolerance.
    pub tol_scale: f64,
}

impl Default for RunContext {
    fn default() -> Self {
        RunContext { jobs: 1, seed: 0, tol_scale: 1.0 }
    }
}

/// One verdict of a run. Failing checks give exit code 2.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, holds: bool, detail: String) -> Self {
        Check { name: name.to_string(), holds, detail }
    }
}

#[derive(Debug, Clone)]
pub struct OutputFile {
    pub name: String,
    pub body: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub command: Command,
    pub scenario: Scenario,
    pub files: Vec<OutputFile>,
    pub checks: Vec<Check>,
    pub summary: Value,
}

impl ExperimentResult {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn file(&self, name: &str) -> Option<&OutputFile> {
        self.files.iter().find(|f| f.name == name)
    }
}

fn csv(header: &str, rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    csv_with_counts(header, &[], rows)
}

/// Like `csv`, but the listed columns hold counts or flags and print as integers.
fn csv_with_counts(header: &str, counts: &[usize], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut s = String::new();
    s.push_str(header);
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row
            .into_iter()
            .enumerate()
            .map(|(k, x)| if counts.contains(&k) { format!("{}", x as i64) } else { fmt17(x) })
            .collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Runs one command on a validated scenario.
pub fn run_command(command: Command, scenario: &Scenario, ctx: &RunContext) -> Result<ExperimentResult, LabError> {
    let prep = Prepared::new(scenario.clone(), ctx.seed)?;
    let scale = ctx.tol_scale * scenario.tolerances.tol_scale;
    let mut out = ExperimentResult {
        command,
        scenario: scenario.clone(),
        files: Vec::new(),
        checks: Vec::new(),
        summary: Value::Null,
    };
    match command {
        Command::ManifoldInfo => manifold_info(&prep, &mut out)?,
        Command::Rearrange => rearrange(&prep, scale, &mut out)?,
        Command::PolyaCheck => polya_check(&prep, scale, ctx, &mut out)?,
        Command::PolyaFalsify => polya_falsify(&prep, scale, ctx, &mut out)?,
        Command::EllipticSolve => elliptic_solve(&prep, scale, &mut out)?,
        Command::Evolve => evolve_run(&prep, &mut out)?,
        Command::Concentration => concentration(&prep, scale, ctx, &mut out)?,
    }
    Ok(out)
}

fn manifold_info(p: &Prepared, out: &mut ExperimentResult) -> Result<(), LabError> {
    let m = &p.manifold;
    let r_outer = p.grid.as_ref().map_or_else(|| m.r_dom().min(5.0) * (1.0 - 1e-9), |g| g.outer_radius());
    let samples = p.scenario.grid.cells;
    let mut rows = Vec::with_capacity(samples + 1);
    for i in 0..=samples {
        let r = r_outer * i as f64 / samples as f64;
        let c = m.curvatures(r)?;
        rows.push(vec![r, m.psi(r)?.v, m.volume_ball(r)?, m.perimeter_ball(r)?, c.k_rad, c.k_perp, c.scalar]);
    }
    out.files.push(OutputFile {
        name: "manifold_info_0.csv".into(),
        body: csv("r,psi,volume,perimeter,k_rad,k_perp,scalar", rows),
    });
    let parabolicity = if m.is_compact() {
        "compact".to_string()
    } else {
        match m.is_parabolic()? {
            Parabolicity::Parabolic => "parabolic",
            Parabolicity::Nonparabolic => "nonparabolic",
            Parabolicity::Inconclusive => "inconclusive",
        }
        .to_string()
    };
    out.summary = json!({
        "n": m.n(),
        "r_dom": m.r_dom(),
        "total_volume": m.total_volume(),
        "parabolicity": parabolicity,
    });
    Ok(())
}

fn rearrange(p: &Prepared, scale: f64, out: &mut ExperimentResult) -> Result<(), LabError> {
    let f = p.require_datum()?;
    let r = Rearrangement::new(f);
    let star = r.star();
    let again = Rearrangement::new(&star).star();
    let rows =
        f.grid().nodes().iter().enumerate().map(|(i, &x)| vec![x, f.values()[i], star.values()[i], r.cumulative()[i]]);
    out.files.push(OutputFile { name: "rearrange_0.csv".into(), body: csv("r,f,f_star,cumulative_f_star", rows) });
    for pw in [1.0, 2.0, 4.0] {
        let (a, b) = (f.integral_of(|u| u.powf(pw)), crate::radial::rearranged_power_integral(&r, pw));
        let tol = 1e-8 * scale * a.abs().max(1.0);
        out.checks.push(Check::new(
            &format!("lp_preserved_p{pw}"),
            (a - b).abs() <= tol,
            format!("∫|f|^p = {a}, ∫(f*)^p = {b}"),
        ));
    }
    let drift = star.values().iter().zip(again.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.checks.push(Check::new(
        "idempotent",
        drift <= 1e-12 * scale * (1.0 + star.sup_abs()),
        format!("max |(f⋆)⋆ − f⋆| = {drift}"),
    ));
    out.summary = json!({ "sup": r.sup(), "support_volume": r.support_volume(), "l1": lp_norm(f, 1.0) });
    Ok(())
}

fn polya_check(p: &Prepared, scale: f64, ctx: &RunContext, out: &mut ExperimentResult) -> Result<(), LabError> {
    let f = p.require_datum()?;
    let v = radial_polya_ratio_with(f, RATIO_TOL * scale)?;
    let star = Rearrangement::new(f).star();
    let rows = f.grid().nodes().iter().enumerate().map(|(i, &x)| vec![x, f.values()[i], star.values()[i]]);
    out.files.push(OutputFile { name: "polya_check_0.csv".into(), body: csv("r,f,f_star", rows) });
    out.checks.push(Check::new(
        "radial_polya",
        v.holds,
        format!("E(f⋆)/E(f) = {} (E(f) = {}, E(f⋆) = {})", v.ratio, v.energy_original, v.energy_rearranged),
    ));
    let nazarov = crate::polya::nazarov_check_with(&p.manifold, 256, ctx.jobs)?;
    out.summary = json!({ "polya": v, "nazarov": nazarov });
    Ok(())
}

fn default_family(p: &Prepared) -> TentFamily {
    let top = 4.0f64.min(0.95 * p.manifold.r_dom());
    TentFamily {
        a_min: 0.0,
        a_max: 0.5 * top,
        a_steps: 9,
        width_min: 0.05 * top,
        width_max: 0.45 * top,
        width_steps: 9,
        cells: 32,
    }
}

fn polya_falsify(p: &Prepared, scale: f64, ctx: &RunContext, out: &mut ExperimentResult) -> Result<(), LabError> {
    let (r_hat, family, grid) = match &p.scenario.experiment {
        Some(ExperimentSpec::Falsify { r_hat, family, nazarov_grid }) => {
            (*r_hat, family.clone().unwrap_or_else(|| default_family(p)), *nazarov_grid)
        }
        Some(other) => return Err(LabError::Invalid(format!("scenario declares experiment {other:?}"))),
        None => (None, default_family(p), 256),
    };
    let m = &p.manifold;
    let samples = nazarov_scan(m, grid, ctx.jobs)?;
    out.files.push(OutputFile {
        name: "polya_falsify_nazarov.csv".into(),
        body: csv_with_counts(
            "mu,nu,slack,violated",
            &[3],
            samples.iter().map(|s| vec![s.mu, s.nu, s.slack, if s.violated { 1.0 } else { 0.0 }]),
        ),
    });
    let worst = samples.iter().min_by(|a, b| a.slack.total_cmp(&b.slack)).copied();
    let violated = samples.iter().any(|s| s.violated);
    out.checks.push(Check::new(
        "nazarov",
        !violated,
        worst.map_or("empty scan".into(), |w| format!("min slack {} at μ = {}, ν = {}", w.slack, w.mu, w.nu)),
    ));
    let search = find_radial_violation_with(m, &family, RATIO_TOL * scale, ctx.jobs)?;
    out.files.push(OutputFile {
        name: "polya_falsify_tents.csv".into(),
        body: csv("a,b,ratio", search.evaluated.iter().map(|t| vec![t.a, t.b, t.ratio])),
    });
    out.checks.push(Check::new(
        "radial_polya",
        search.witness.is_none(),
        format!("largest E(f⋆)/E(f) = {} for the tent on [{}, {}]", search.best.ratio, search.best.a, search.best.b),
    ));
    let mut flow = Value::Null;
    if let Some(w) = &search.witness {
        let w = w.scaled(1.0 / w.sup_abs());
        let mut body = String::new();
        w.write_csv(string_sink(&mut body))?;
        out.files.push(OutputFile { name: "polya_falsify_witness.csv".into(), body });
        flow = witness_flow(p, &w, scale, out)?;
    }
    let r_hat = r_hat.unwrap_or_else(|| 1.0f64.min(0.5 * m.r_dom()));
    let gap = curvature_gap(m, r_hat)?;
    let gap_rows = [
        ("r_hat", r_hat),
        ("s_o", gap.s_o),
        ("s_hat", gap.s_hat),
        ("coeff_original", gap.coeff_original),
        ("coeff_lowerbound", gap.coeff_lowerbound),
        ("gap", gap.gap),
        ("coeff_intermediate", gap.coeff_intermediate),
        ("coeff_quotient", gap.coeff_quotient),
        ("coeff_lowerbound_series", gap.coeff_lowerbound_series),
        ("gap_series", gap.gap_series),
    ];
    let mut body = String::from("quantity,value\n");
    for (k, v) in gap_rows {
        let _ = writeln!(body, "{k},{}", fmt17(v));
    }
    out.files.push(OutputFile { name: "polya_falsify_gap.csv".into(), body });
    out.checks.push(Check::new(
        "centered_curvature_gap",
        gap.gap_series <= 1e-9 * scale,
        format!("gap = {}, series gap = {}", gap.gap, gap.gap_series),
    ));
    out.summary = json!({
        "nazarov_pairs": samples.len(),
        "nazarov_min_slack": worst.map(|w| w.slack),
        "best_tent": search.best,
        "curvature_gap": gap,
        "witness_flow": flow,
    });
    Ok(())
}

/// Adapter so `RadialFunction::write_csv` can fill a `String`.
fn string_sink(s: &mut String) -> StringWriter<'_> {
    StringWriter(s)
}

struct StringWriter<'a>(&'a mut String);

impl std::io::Write for StringWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let text = std::str::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        self.0.push_str(text);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Flow from the witness against the flow from its rearrangement, reported descriptively.
fn witness_flow(p: &Prepared, w: &RadialFunction, scale: f64, out: &mut ExperimentResult) -> Result<Value, LabError> {
    let phi = match &p.nonlinearity {
        Some(phi) => phi.clone(),
        None => crate::elliptic::Nonlinearity::linear(),
    };
    let (h, t) = p.scenario.time.as_ref().map_or((1e-3, 0.05), |t| (t.h, t.t_final));
    let opts = EvolveOptions { k_reg: p.scenario.tolerances.k_reg, hminus1: false };
    let bar = dominating_datum(w).function;
    let (u, ubar) = (evolve(&phi, w, h, t, opts)?, evolve(&phi, &bar, h, t, opts)?);
    let mut rows = Vec::new();
    let mut min_margin = f64::INFINITY;
    for i in 0..u.states.len() {
        let rep = compare(&u.states[i], &ubar.states[i], scale)?;
        min_margin = min_margin.min(rep.min_margin);
        rows.push(vec![i as f64, u.times[i], rep.min_margin, if rep.verdict == Verdict::Fails { 0.0 } else { 1.0 }]);
    }
    out.files.push(OutputFile {
        name: "polya_falsify_flow.csv".into(),
        body: csv_with_counts("step,time,min_margin,holds", &[0, 3], rows),
    });
    Ok(json!({ "h": h, "T": t, "min_margin": min_margin }))
}

fn compare(u: &RadialFunction, ubar: &RadialFunction, scale: f64) -> Result<ConcentrationReport, LabError> {
    Ok(concentration_compare_with(u, ubar, CompareOptions { tol_scale: scale, ..CompareOptions::default() })?)
}

fn elliptic_solve(p: &Prepared, scale: f64, out: &mut ExperimentResult) -> Result<(), LabError> {
    let f = p.require_datum()?;
    let h = p.require_time()?.h;
    let phi = effective_nonlinearity(p.require_nonlinearity()?, p.scenario.tolerances.k_reg)?;
    let step = implicit_step(&phi, h, f, None)?;
    let rows = f.grid().nodes().iter().enumerate().map(|(i, &x)| vec![x, f.values()[i], step.u.values()[i]]);
    out.files.push(OutputFile { name: "elliptic_solve_0.csv".into(), body: csv("r,f,u", rows) });
    let bar = dominating_datum(f).function;
    let rep = elliptic_concentration_check_with(
        &phi,
        h,
        f,
        &bar,
        CompareOptions { tol_scale: scale, ..CompareOptions::default() },
    )?;
    let rows = rep.report.radii.iter().enumerate().map(|(i, &x)| vec![x, rep.report.margins[i], rep.a[i]]);
    out.files.push(OutputFile { name: "elliptic_solve_margins.csv".into(), body: csv("r,margin,a", rows) });
    let floor = p.scenario.tolerances.margin * scale;
    out.checks.push(Check::new(
        "concentration",
        rep.report.verdict != Verdict::Fails && rep.report.min_margin >= -floor,
        format!("min margin {} (tol {})", rep.report.min_margin, rep.report.tol_report),
    ));
    out.checks.push(Check::new("a_max", rep.a_max <= floor, format!("A_max = {}", rep.a_max)));
    out.summary = json!({
        "newton_iterations": step.newton_iterations,
        "min_margin": rep.report.min_margin,
        "a_max": rep.a_max,
        "k_reg": phi.regularization(),
    });
    Ok(())
}

fn stride(p: &Prepared, steps: usize) -> usize {
    p.scenario.time.as_ref().and_then(|t| t.output_stride).unwrap_or((steps / 4).max(1))
}

fn flow_checks(name: &str, t: &Trajectory, out: &mut ExperimentResult) {
    let e = t.energy_inequality();
    out.checks.push(Check::new(
        &format!("{name}_energy_inequality"),
        e.holds,
        format!("Σh∫|∇φ(u)|² + ∫Φ(u_N) = {} vs ∫Φ(u₀) = {} (tol {})", e.lhs, e.rhs, e.tol),
    ));
    let inc = t.energy_increase();
    let tol = t.tol() * (1.0 + t.diagnostics.get(1).map_or(0.0, |d| d.dirichlet_energy_phi_u));
    out.checks.push(Check::new(
        &format!("{name}_energy_monotone"),
        inc <= tol,
        format!("largest increase of ∫|∇φ(u)|² is {inc}"),
    ));
}

fn trajectory_files(t: &Trajectory, prefix: &str, stride: usize, out: &mut ExperimentResult) -> Result<(), LabError> {
    for i in output_indices(t.states.len(), stride) {
        let mut body = String::new();
        t.states[i].write_csv(string_sink(&mut body))?;
        out.files.push(OutputFile { name: format!("{prefix}_{i}.csv"), body });
    }
    let mut buf = Vec::new();
    t.write_diagnostics(&mut buf)?;
    out.files.push(OutputFile {
        name: format!("{prefix}_diagnostics.csv"),
        body: String::from_utf8(buf).expect("diagnostics are ASCII"),
    });
    Ok(())
}

fn evolve_run(p: &Prepared, out: &mut ExperimentResult) -> Result<(), LabError> {
    let u0 = p.require_datum()?;
    let time = p.require_time()?;
    let phi = p.require_nonlinearity()?;
    let opts = EvolveOptions { k_reg: p.scenario.tolerances.k_reg, hminus1: true };
    let t = evolve(phi, u0, time.h, time.t_final, opts)?;
    trajectory_files(&t, "evolve", stride(p, t.states.len() - 1), out)?;
    flow_checks("evolve", &t, out);
    let violations = t.hminus1_violations();
    out.summary = json!({
        "steps": t.states.len() - 1,
        "k_reg": t.phi.regularization(),
        "energy_inequality": t.energy_inequality(),
        "hminus1_bound_exceeded_at": violations,
    });
    Ok(())
}

fn concentration(p: &Prepared, scale: f64, ctx: &RunContext, out: &mut ExperimentResult) -> Result<(), LabError> {
    if let Some(e @ ExperimentSpec::Falsify { .. }) = &p.scenario.experiment {
        return Err(LabError::Invalid(format!("scenario declares experiment {e:?}")));
    }
    let u0 = p.require_datum()?;
    let time = p.require_time()?;
    let phi = p.require_nonlinearity()?;
    let steps = step_count(time.h, time.t_final)?;
    let opts = EvolveOptions { k_reg: p.scenario.tolerances.k_reg, hminus1: false };
    let ubar0 = dominating_datum(u0).function;
    let data = [u0.clone(), ubar0];
    let mut runs = parallel_map(2, ctx.jobs, |i| evolve(phi, &data[i], time.h, time.t_final, opts))?;
    let ubar = runs.pop().expect("two runs");
    let u = runs.pop().expect("two runs");
    for (i, s) in ubar.states.iter().enumerate() {
        if !s.is_nonincreasing(1e-12 * (1.0 + s.sup_abs())) {
            return Err(LabError::ExperimentInconsistent(format!("ū lost radial monotonicity at step {i}")));
        }
    }
    let floor = p.scenario.tolerances.margin * scale;
    let mut summary_rows = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut all_hold = true;
    for i in output_indices(steps + 1, stride(p, steps)) {
        let rep = compare(&u.states[i], &ubar.states[i], scale)?;
        let rows = rep.radii.iter().zip(&rep.margins).map(|(&r, &m)| vec![r, m]);
        out.files.push(OutputFile { name: format!("concentration_{i}.csv"), body: csv("r,margin", rows) });
        min_margin = min_margin.min(rep.min_margin);
        let holds = rep.verdict != Verdict::Fails && rep.min_margin >= -floor;
        all_hold &= holds;
        summary_rows.push(vec![i as f64, u.times[i], rep.min_margin, rep.tol_report, if holds { 1.0 } else { 0.0 }]);
    }
    out.files.push(OutputFile {
        name: "concentration_diagnostics.csv".into(),
        body: csv_with_counts("step,time,min_margin,tol_report,holds", &[0, 4], summary_rows),
    });
    out.checks.push(Check::new("concentration", all_hold, format!("min margin over output times {min_margin}")));
    flow_checks("u", &u, out);
    flow_checks("u_bar", &ubar, out);
    let pos = |a: &RadialFunction, b: &RadialFunction| -> Result<f64, LabError> {
        let d = a.with_values(a.values().iter().zip(b.values()).map(|(x, y)| (x - y).max(0.0)).collect())?;
        Ok(lp_norm(&d, 1.0))
    };
    let start = pos(&u.states[0], &ubar.states[0])?;
    let mut worst: f64 = 0.0;
    for i in 0..u.states.len() {
        worst = worst.max(pos(&u.states[i], &ubar.states[i])? - start);
    }
    out.checks.push(Check::new(
        "l1_contraction",
        worst <= 1e-8 * scale,
        format!("max growth of ‖(u − ū)⁺‖₁ is {worst}"),
    ));
    out.summary = json!({ "steps": steps, "min_margin": min_margin, "k_reg": u.phi.regularization() });
    Ok(())
}

/// Validates every scenario, then runs them over `ctx.jobs` threads.
pub fn run_scenarios(
    command: Command,
    scenarios: &[Scenario],
    ctx: &RunContext,
) -> Result<Vec<ExperimentResult>, LabError> {
    for s in scenarios {
        Prepared::new(s.clone(), ctx.seed)?;
    }
    let inner = RunContext { jobs: (ctx.jobs / scenarios.len().max(1)).max(1), ..*ctx };
    parallel_map(scenarios.len(), ctx.jobs, |i| run_command(command, &scenarios[i], &inner))
}

/// Writes the result files and `manifest.json` into `dir`.
pub fn emit_outputs(result: &ExperimentResult, dir: &Path, started: Instant) -> Result<Vec<PathBuf>, LabError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in &result.files {
        let path = dir.join(&f.name);
        std::fs::write(&path, &f.body)?;
        written.push(path);
    }
    let manifest = json!({
        "tool": "lab",
        "version": env!("CARGO_PKG_VERSION"),
        "command": result.command,
        "scenario": result.scenario,
        "files": result.files.iter().map(|f| f.name.clone()).collect::<Vec<_>>(),
        "checks": result.checks,
        "all_hold": result.all_hold(),
        "summary": result.summary,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    written.push(path);
    Ok(written)
}
