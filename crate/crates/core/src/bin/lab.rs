use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;
use warpflow::lab::{emit_outputs, run_scenarios, Command, LabError, RunContext, Scenario};

#[derive(Parser, Debug)]
#[command(name = "lab", version, about = "Rearrangement and nonlinear diffusion experiments on model manifolds")]
struct Cli {
    /// Worker threads for independent scenarios and scans.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Seed for randomly generated data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Multiplier applied to every tolerance.
    #[arg(long, global = true, default_value_t = 1.0)]
    tol_scale: f64,
    #[command(subcommand)]
    command: Top,
}

#[derive(Args, Debug)]
struct Io {
    /// Scenario JSON files; several are run independently.
    #[arg(long, required = true, num_args = 1..)]
    config: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Top {
    /// Geometry of the model manifold.
    Manifold {
        #[command(subcommand)]
        action: ManifoldCmd,
    },
    /// Schwarz rearrangement of the datum.
    Rearrange(Io),
    /// Pólya–Szegő checks.
    Polya {
        #[command(subcommand)]
        action: PolyaCmd,
    },
    /// One implicit step of the filtration equation.
    Elliptic {
        #[command(subcommand)]
        action: EllipticCmd,
    },
    /// Implicit Euler evolution with diagnostics.
    Evolve(Io),
    /// Concentration comparison of a flow with the flow of the rearranged datum.
    Concentration(Io),
}

#[derive(Subcommand, Debug)]
enum ManifoldCmd {
    Info(Io),
}

#[derive(Subcommand, Debug)]
enum PolyaCmd {
    /// Energy ratio of the datum under rearrangement.
    Check(Io),
    /// Nazarov scan, tent violation search and curvature gap.
    Falsify(Io),
}

#[derive(Subcommand, Debug)]
enum EllipticCmd {
    Solve(Io),
}

fn split(top: Top) -> (Command, Io) {
    match top {
        Top::Manifold { action: ManifoldCmd::Info(io) } => (Command::ManifoldInfo, io),
        Top::Rearrange(io) => (Command::Rearrange, io),
        Top::Polya { action: PolyaCmd::Check(io) } => (Command::PolyaCheck, io),
        Top::Polya { action: PolyaCmd::Falsify(io) } => (Command::PolyaFalsify, io),
        Top::Elliptic { action: EllipticCmd::Solve(io) } => (Command::EllipticSolve, io),
        Top::Evolve(io) => (Command::Evolve, io),
        Top::Concentration(io) => (Command::Concentration, io),
    }
}

fn run(cli: Cli) -> Result<bool, LabError> {
    let started = Instant::now();
    if cli.tol_scale.is_nan() || cli.tol_scale <= 0.0 {
        return Err(LabError::Invalid(format!("--tol-scale must be positive, got {}", cli.tol_scale)));
    }
    let ctx = RunContext { jobs: cli.jobs.max(1), seed: cli.seed, tol_scale: cli.tol_scale };
    let (command, io) = split(cli.command);
    let scenarios = io.config.iter().map(|p| Scenario::load(p)).collect::<Result<Vec<_>, _>>()?;
    let results = run_scenarios(command, &scenarios, &ctx)?;
    let mut all = true;
    for (i, (res, path)) in results.iter().zip(&io.config).enumerate() {
        let dir = if results.len() == 1 {
            io.out.clone()
        } else {
            let stem = res.scenario.name.clone().unwrap_or_else(|| {
                path.file_stem().map_or(format!("scenario_{i}"), |s| s.to_string_lossy().into_owned())
            });
            io.out.join(stem)
        };
        emit_outputs(res, &dir, started)?;
        for c in &res.checks {
            println!("{} {}: {}", if c.holds { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        all &= res.all_hold();
    }
    Ok(all)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
