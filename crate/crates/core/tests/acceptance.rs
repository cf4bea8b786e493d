//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed; exits nonzero if any fails.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::{Duration, Instant};
use warpflow::elliptic::{elliptic_concentration_check, solve_semilinear, Beta, Nonlinearity};
use warpflow::manifold::ModelManifold;
use warpflow::parabolic::{
    barenblatt, barenblatt_radius, evolve, nested_domain_limit, support_radius, EvolveOptions, Trajectory,
};
use warpflow::polya::{curvature_gap, find_radial_violation, nazarov_check, TentFamily};
use warpflow::radial::{
    concentration_compare, distribution_function, dominating_datum, hardy_littlewood_gap, lp_norm,
    rearranged_l1_distance, rearranged_power_integral, RadialFunction, RadialGrid, Rearrangement, Verdict,
};

type Outcome = Result<String, String>;

fn grid(m: ModelManifold, r: f64, cells: usize) -> Arc<RadialGrid> {
    RadialGrid::uniform(Arc::new(m), r, cells).unwrap()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn quick() -> EvolveOptions {
    EvolveOptions { k_reg: None, hminus1: false }
}

/// Random compactly supported mixture of bumps and plateaus on the grid nodes.
fn random_profile(rng: &mut StdRng, g: &Arc<RadialGrid>) -> RadialFunction {
    let r_out = g.outer_radius();
    let parts: Vec<(f64, f64, f64, bool)> = (0..rng.gen_range(1..4))
        .map(|_| (rng.gen_range(0.0..0.9), rng.gen_range(0.05..0.35), rng.gen_range(0.0..2.0), rng.gen_bool(0.5)))
        .collect();
    let last = g.nodes().len() - 1;
    let values = g
        .nodes()
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            if j == last {
                return 0.0;
            }
            let x = r / r_out;
            parts
                .iter()
                .map(|&(c, w, h, step)| {
                    let d = (x - c).abs() / w;
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
        .collect();
    RadialFunction::new(g.clone(), values).unwrap()
}

fn geometry() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [2usize, 3, 4] {
        let nf = n as f64;
        let cases = [
            (ModelManifold::euclidean(n).unwrap(), 0.0, 5.0),
            (ModelManifold::hyperbolic(n).unwrap(), -nf * (nf - 1.0), 5.0),
            (ModelManifold::sphere(n).unwrap(), nf * (nf - 1.0), PI),
        ];
        for (m, s, top) in cases {
            for i in 0..50 {
                let r = top * (i as f64 + 0.5) / 50.0;
                let c = m.curvatures(r).map_err(|e| e.to_string())?;
                let err = (c.scalar - s).abs();
                worst = worst.max(err);
                ensure(err <= 1e-9, || format!("S = {} at r = {r} on n = {n}, expected {s}", c.scalar))?;
            }
        }
    }
    let h2 = ModelManifold::hyperbolic(2).unwrap();
    let v = h2.volume_ball(1.0).unwrap();
    let exact = 2.0 * PI * (1f64.cosh() - 1.0);
    ensure((v - exact).abs() <= 1e-8, || format!("V(B₁) on ℍ² = {v}, expected {exact}"))?;
    let p = h2.perimeter_ball(1.0).unwrap();
    ensure((p - 2.0 * PI * 1f64.sinh()).abs() <= 1e-8, || format!("|∂B₁| on ℍ² = {p}"))?;
    let e3 = ModelManifold::euclidean(3).unwrap();
    let v3 = e3.volume_ball(2.0).unwrap();
    ensure((v3 - 4.0 / 3.0 * PI * 8.0).abs() <= 1e-8, || format!("V(B₂) on ℝ³ = {v3}"))?;
    let s2 = ModelManifold::sphere(2).unwrap();
    let vs = s2.volume_ball(1.0).unwrap();
    ensure((vs - 2.0 * PI * (1.0 - 1f64.cos())).abs() <= 1e-8, || format!("V(B₁) on S² = {vs}"))?;
    Ok(format!("largest curvature error {worst:.3e} over 450 radii; volumes and perimeters within 1e-8"))
}

fn rearrangement() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let grids = [
        grid(ModelManifold::euclidean(2).unwrap(), 2.0, 120),
        grid(ModelManifold::hyperbolic(2).unwrap(), 2.0, 120),
        grid(ModelManifold::sphere(3).unwrap(), 3.0, 120),
    ];
    let mut min_gap = f64::INFINITY;
    for k in 0..200 {
        for g in &grids {
            let f = random_profile(&mut rng, g);
            let h = random_profile(&mut rng, g);
            let r = Rearrangement::new(&f);
            let star = r.star();
            let m = g.manifold();
            let perim = g.nodes().iter().map(|&x| m.perimeter_ball(x).unwrap()).fold(0.0, f64::max);
            let bound = 2.0 * g.max_spacing() * perim;
            for t in [0.05, 0.3, 0.7, 1.1, 1.7] {
                let d = (distribution_function(&f, t) - distribution_function(&star, t)).abs();
                ensure(d <= bound, || format!("profile {k}: distribution functions differ by {d} at t = {t}"))?;
            }
            for p in [1.0, 2.0, 3.0] {
                let exact = f.integral_of(|u| u.powf(p));
                let via = rearranged_power_integral(&r, p);
                ensure((exact - via).abs() <= 1e-9 * exact.max(1.0), || format!("profile {k}: L{p} {exact} vs {via}"))?;
            }
            let again = Rearrangement::new(&star).star();
            let drift = star.values().iter().zip(again.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(drift <= 1e-10, || format!("profile {k}: rearranging twice moves values by {drift}"))?;
            let diff = f.with_values(f.values().iter().zip(h.values()).map(|(a, b)| a - b).collect()).unwrap();
            let lhs = rearranged_l1_distance(&f, &h).unwrap();
            let rhs = diff.integral_of(|u| u);
            ensure(lhs <= rhs + 1e-8, || format!("profile {k}: ‖f⋆ − g⋆‖₁ = {lhs} > ‖f − g‖₁ = {rhs}"))?;
            let gap = hardy_littlewood_gap(&f, &h).unwrap();
            min_gap = min_gap.min(gap);
            ensure(gap >= -1e-8, || format!("profile {k}: Hardy–Littlewood gap {gap}"))?;
        }
    }
    Ok(format!("600 profiles; smallest Hardy–Littlewood gap {min_gap:.3e}"))
}

fn poisson_error(n: usize, cells: usize) -> f64 {
    let g = grid(ModelManifold::euclidean(n).unwrap(), 1.0, cells);
    let f = RadialFunction::from_fn(g.clone(), |_| 1.0).unwrap();
    let s = solve_semilinear(&Beta::zero(), &f).unwrap();
    g.nodes().iter().zip(s.v.values()).map(|(&r, &v)| (v - (1.0 - r * r) / (2.0 * n as f64)).abs()).fold(0.0, f64::max)
}

fn elliptic_oracle() -> Outcome {
    let mut notes = Vec::new();
    for n in [2usize, 3, 4] {
        let (e1, e2) = (poisson_error(n, 400), poisson_error(n, 800));
        ensure(e1 <= 1e-6, || format!("n = {n}: error {e1} at M = 400"))?;
        // a solution reproduced to roundoff has no convergence ratio to measure
        if e1 > 1e-12 {
            ensure(e1 / e2 >= 3.5, || format!("n = {n}: error ratio {} on doubling M", e1 / e2))?;
            notes.push(format!("n={n}: {e1:.2e}, ratio {:.2}", e1 / e2));
        } else {
            notes.push(format!("n={n}: {e1:.2e} (roundoff)"));
        }
    }
    Ok(notes.join("; "))
}

fn elliptic_concentration() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let grids =
        [grid(ModelManifold::euclidean(2).unwrap(), 2.0, 160), grid(ModelManifold::hyperbolic(2).unwrap(), 2.0, 160)];
    let phis = [("heat", Nonlinearity::linear()), ("pme", Nonlinearity::power(2.0).unwrap().regularize(64.0).unwrap())];
    let (mut min_margin, mut a_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..50 {
        for g in &grids {
            let f = random_profile(&mut rng, g);
            let f_bar = dominating_datum(&f).function;
            for (name, phi) in &phis {
                let rep =
                    elliptic_concentration_check(phi, 0.1, &f, &f_bar).map_err(|e| format!("pair {k}, {name}: {e}"))?;
                min_margin = min_margin.min(rep.report.min_margin);
                a_max = a_max.max(rep.a_max);
                ensure(rep.report.min_margin >= -1e-7 && rep.a_max <= 1e-7, || {
                    format!("pair {k}, {name}: min margin {}, A_max {}", rep.report.min_margin, rep.a_max)
                })?;
            }
        }
    }
    Ok(format!("200 step pairs; min margin {min_margin:.3e}, A_max {a_max:.3e}"))
}

fn gaussian(s0: f64, t: f64, r: f64) -> f64 {
    let s = s0 + 2.0 * t;
    (-r * r / (2.0 * s)).exp() / (2.0 * PI * s)
}

fn parabolic_oracle(runs: &mut Vec<(String, Trajectory)>) -> Outcome {
    let g = grid(ModelManifold::euclidean(2).unwrap(), 8.0, 800);
    let u0 = RadialFunction::from_fn(g.clone(), |r| gaussian(0.25, 0.0, r)).unwrap();
    let t = evolve(&Nonlinearity::linear(), &u0, 1e-3, 0.5, quick()).map_err(|e| e.to_string())?;
    let exact = RadialFunction::from_fn(g, |r| gaussian(0.25, 0.5, r)).unwrap();
    let err: Vec<f64> = t.final_state().values().iter().zip(exact.values()).map(|(a, b)| a - b).collect();
    let rel = lp_norm(&exact.with_values(err).unwrap(), 1.0) / lp_norm(&exact, 1.0);
    runs.push(("heat gaussian".into(), t));
    ensure(rel <= 0.03, || format!("heat: relative L1 error {rel}"))?;

    let (n, m, c) = (2, 2.0, 1.0 / 16.0);
    let g = grid(ModelManifold::euclidean(2).unwrap(), 2.5, 500);
    let u0 = RadialFunction::from_fn(g, |r| barenblatt(n, m, c, r, 1.0)).unwrap();
    let t = evolve(&Nonlinearity::power(m).unwrap(), &u0, 1e-2, 9.0, quick()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (i, s) in t.states.iter().enumerate().step_by(50) {
        let exact = barenblatt_radius(n, m, c, 1.0 + t.times[i]);
        worst = worst.max((support_radius(s, 1e-3) - exact).abs() / exact);
    }
    runs.push(("barenblatt".into(), t));
    ensure(worst <= 0.05, || format!("porous medium: support radius off by {:.2}%", 100.0 * worst))?;
    Ok(format!("heat L1 error {:.2}%; support radius within {:.2}% for t in [1, 10]", 100.0 * rel, 100.0 * worst))
}

/// Two bumps, the outer one taller, so the datum is far from radially monotone.
fn two_bumps(r: f64) -> f64 {
    0.6 * (1.0 - (r / 0.5).powi(2)).max(0.0) + (1.0 - ((r - 1.4) / 0.4).powi(2)).max(0.0)
}

fn flow_concentration(
    runs: &mut Vec<(String, Trajectory)>,
    pairs: &mut Vec<(String, Trajectory, Trajectory)>,
) -> Outcome {
    let mut min_margin = f64::INFINITY;
    let manifolds =
        [("euclidean", ModelManifold::euclidean(2).unwrap()), ("hyperbolic", ModelManifold::hyperbolic(2).unwrap())];
    for (mname, m) in manifolds {
        let g = grid(m, 3.0, 300);
        let u0 = RadialFunction::from_fn(g, two_bumps).unwrap();
        let ubar0 = dominating_datum(&u0).function;
        for (pname, phi) in [("heat", Nonlinearity::linear()), ("pme", Nonlinearity::power(2.0).unwrap())] {
            let label = format!("{pname} on {mname}");
            let u = evolve(&phi, &u0, 0.01, 0.5, quick()).map_err(|e| format!("{label}: {e}"))?;
            let ubar = evolve(&phi, &ubar0, 0.01, 0.5, quick()).map_err(|e| format!("{label}: {e}"))?;
            for (i, (a, b)) in u.states.iter().zip(&ubar.states).enumerate() {
                ensure(b.is_nonincreasing(1e-12 * (1.0 + b.sup_abs())), || {
                    format!("{label}: ū not monotone at step {i}")
                })?;
                let rep = concentration_compare(a, b).map_err(|e| e.to_string())?;
                min_margin = min_margin.min(rep.min_margin);
                ensure(rep.verdict != Verdict::Fails && rep.min_margin >= -1e-7, || {
                    format!("{label}: margin {} at step {i}", rep.min_margin)
                })?;
            }
            runs.push((format!("{label} (u)"), u.clone()));
            runs.push((format!("{label} (ū)"), ubar.clone()));
            pairs.push((label, u, ubar));
        }
    }
    Ok(format!("4 flows, 51 output times each; min margin {min_margin:.3e}"))
}

fn tents() -> TentFamily {
    TentFamily { a_min: 0.2, a_max: 2.0, a_steps: 7, width_min: 0.2, width_max: 2.0, width_steps: 7, cells: 16 }
}

fn nazarov() -> Outcome {
    let mut notes = Vec::new();
    for (name, m) in
        [("ψ = r", ModelManifold::euclidean(2).unwrap()), ("ψ = sinh r", ModelManifold::hyperbolic(2).unwrap())]
    {
        let out = nazarov_check(&m, 256).map_err(|e| e.to_string())?;
        ensure(out.passes(), || format!("{name}: {out:?}"))?;
        let s = find_radial_violation(&Arc::new(m), &tents()).map_err(|e| e.to_string())?;
        ensure(s.witness.is_none(), || format!("{name}: tent witness with ratio {}", s.best.ratio))?;
        notes.push(format!("{name}: pass, best ratio {:.6}", s.best.ratio));
    }
    let m = ModelManifold::from_expression(2, "r*exp(-r^2)").unwrap();
    let out = nazarov_check(&m, 256).map_err(|e| e.to_string())?;
    ensure(!out.passes(), || "ψ = r·e^{−r²}: no Nazarov violation".into())?;
    let s = find_radial_violation(&Arc::new(m), &tents()).map_err(|e| e.to_string())?;
    ensure(s.witness.is_some() && s.best.ratio > 1.001, || format!("ψ = r·e^(−r²): best ratio {}", s.best.ratio))?;
    notes.push(format!("ψ = r·e^(−r²): violation, witness ratio {:.4} on [{}, {}]", s.best.ratio, s.best.a, s.best.b));
    Ok(notes.join("; "))
}

fn curvature_gaps() -> Outcome {
    for n in [2usize, 3, 4] {
        let g = curvature_gap(&ModelManifold::euclidean(n).unwrap(), 0.8).map_err(|e| e.to_string())?;
        ensure(g.gap == 0.0 && g.gap_series == 0.0, || format!("ℝ{n}: gap {}, series gap {}", g.gap, g.gap_series))?;
    }
    let mut closed_form = Vec::new();
    for n in [2usize, 3, 4] {
        let g = curvature_gap(&ModelManifold::hyperbolic(n).unwrap(), 1.0).map_err(|e| e.to_string())?;
        // the closed-form coefficient vanishes on constant curvature only for n = 2
        let value = if n == 2 { g.gap } else { g.gap_series };
        ensure(value.abs() <= 1e-9, || format!("ℍ{n}: gap {value}"))?;
        if n > 2 {
            closed_form.push(format!("ℍ{n} closed-form gap {:.4}", g.gap));
        }
    }
    let m = ModelManifold::from_expression(2, "r + r^3").unwrap();
    let g = curvature_gap(&m, 1.0).map_err(|e| e.to_string())?;
    ensure((g.gap - 0.125).abs() <= 1e-9, || format!("ψ = r + r³: gap {}", g.gap))?;
    Ok(format!("ψ = r + r³: gap {:.12}, series-oracle gap {:.12}; {}", g.gap, g.gap_series, closed_form.join(", ")))
}

fn flow_laws(runs: &[(String, Trajectory)], pairs: &[(String, Trajectory, Trajectory)]) -> Outcome {
    for (label, t) in runs {
        let d = &t.diagnostics;
        for w in d.windows(2) {
            for (p, a, b) in [(1, w[0].l1, w[1].l1), (2, w[0].l2, w[1].l2), (0, w[0].linf, w[1].linf)] {
                ensure(b <= a + 1e-7 * (1.0 + a), || {
                    format!(
                        "{label}: L{} norm grew at step {}: {a} → {b}",
                        if p == 0 { "∞".into() } else { p.to_string() },
                        w[1].step
                    )
                })?;
            }
        }
        let e = t.energy_inequality();
        ensure(e.holds, || format!("{label}: energy inequality {} > {} + {}", e.lhs, e.rhs, e.tol))?;
        let inc = t.energy_increase();
        let scale = 1.0 + d.get(1).map_or(0.0, |x| x.dirichlet_energy_phi_u);
        ensure(inc <= t.tol() * scale, || format!("{label}: ∫|∇φ(u)|² increased by {inc}"))?;
    }
    for (label, u, ubar) in pairs {
        let dist = |i: usize| {
            let a = &u.states[i];
            let diff = a.values().iter().zip(ubar.states[i].values()).map(|(x, y)| x - y).collect();
            lp_norm(&a.with_values(diff).unwrap(), 1.0)
        };
        let d0 = dist(0);
        for i in 1..u.states.len() {
            let di = dist(i);
            ensure(di <= d0 + 1e-7 * (1.0 + d0), || format!("{label}: ‖u − ū‖₁ grew to {di} from {d0} at step {i}"))?;
        }
    }
    let mut nested = 0;
    for m in [ModelManifold::euclidean(2).unwrap(), ModelManifold::hyperbolic(2).unwrap()] {
        let m = Arc::new(m);
        let g = RadialGrid::uniform(m.clone(), 3.0, 150).unwrap();
        let u0 = RadialFunction::from_fn(g, two_bumps).unwrap();
        for phi in [Nonlinearity::linear(), Nonlinearity::power(2.0).unwrap()] {
            let res = nested_domain_limit(m.clone(), &phi, &u0, 0.01, 30, &[2.0, 3.0, 4.0], 0.02, quick(), 3)
                .map_err(|e| e.to_string())?;
            ensure(res.monotone, || format!("nested domains: violation {}", res.max_violation))?;
            nested += 1;
        }
    }
    Ok(format!("{} trajectories, {} u/ū pairs, {nested} nested-domain runs", runs.len(), pairs.len()))
}

fn report(id: usize, name: &str, budget: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = run();
    let elapsed = start.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) if elapsed <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
        Err(e) => (false, e),
    };
    println!("{} {id} {name} [{:.2}s]: {detail}", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    ok
}

fn main() {
    let mut runs = Vec::new();
    let mut pairs = Vec::new();
    let s = Duration::from_secs;
    let results = [
        report(1, "geometry oracle", s(1), geometry),
        report(2, "rearrangement suite", s(10), rearrangement),
        report(3, "elliptic oracle", s(5), elliptic_oracle),
        report(4, "elliptic concentration", s(60), elliptic_concentration),
        report(5, "parabolic oracle", s(120), || parabolic_oracle(&mut runs)),
        report(6, "concentration along the flow", s(180), || flow_concentration(&mut runs, &mut pairs)),
        report(7, "nazarov and tent witnesses", s(30), nazarov),
        report(8, "curvature gap coefficients", s(1), curvature_gaps),
        report(9, "discrete flow laws", s(60), || flow_laws(&runs, &pairs)),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} of {} criteria hold", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
