//! `slq`: command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use slq_core::coefficients::{self, DTilde1, GainMode};
use slq_core::equilibrium::Player;
use slq_core::model::validate_spec;
use slq_core::pipeline::{self, failure_outcome, verdict, write_assumptions, write_costs, ArtifactLog, RunConfig, SolveOptions, Solved};
use slq_core::suite::{self, Suite};
use slq_core::{paths, presets, riccati, FailureClass, Result, SlqError};

#[derive(Parser, Debug)]
#[command(name = "slq", version, about = "Partially observed LQ leader-follower games: solve, simulate, certify")]
struct Cli {
    /// Scenario file (JSON)
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Number of Monte Carlo paths
    #[arg(long, global = true, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    paths: u64,
    /// Time step; must divide the horizon. Overrides the scenario grid.
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = ModeArg::Rederived)]
    gain_mode: ModeArg,
    #[arg(long, global = true, value_enum, default_value_t = DTilde1Arg::Zero)]
    dtilde1: DTilde1Arg,
    /// Write every derived coefficient family to DIR
    #[arg(long, global = true, value_name = "DIR")]
    dump_coefficients: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Rederived,
    Verbatim,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DTilde1Arg {
    Zero,
    #[value(name = "minus_D1_scaled")]
    MinusD1Scaled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Stationarity,
    Deviations,
    Oracle,
    GainModes,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check dimensions, symmetry and the standing assumptions
    Validate,
    /// Solve both Riccati systems and export them
    SolveRiccati,
    /// Simulate the equilibrium and dump trajectories
    Simulate {
        /// Paths written to the long CSV (the binary dump holds all of them)
        #[arg(long, default_value_t = 20)]
        csv_paths: usize,
    },
    /// Monte Carlo cost estimates for both players
    Equilibrium,
    /// Run a verification suite
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::Stationarity)]
        suite: SuiteArg,
    },
    /// validate, solve, simulate, cost and stationarity in one run
    Pipeline,
    /// List built-in presets or emit one as a scenario file
    Scenario {
        #[arg(long, value_name = "NAME")]
        emit: Option<String>,
        /// Destination for --emit (stdout when absent)
        #[arg(long, value_name = "FILE")]
        file: Option<PathBuf>,
    },
}

impl Cli {
    fn opts(&self) -> SolveOptions {
        SolveOptions {
            mode: match self.gain_mode {
                ModeArg::Rederived => GainMode::Rederived,
                ModeArg::Verbatim => GainMode::Verbatim,
            },
            dtilde1: match self.dtilde1 {
                DTilde1Arg::Zero => DTilde1::Zero,
                DTilde1Arg::MinusD1Scaled => DTilde1::MinusD1Scaled,
            },
        }
    }

    fn config(&self) -> Result<RunConfig> {
        let path = self.scenario.as_deref().ok_or_else(|| SlqError::Config("--scenario FILE is required".into()))?;
        RunConfig::load(path, self.dt, self.seed, self.paths as usize, self.opts(), &self.out)
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("SLQ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Artifact paths outside the output directory are recorded verbatim.
fn log_external(log: &mut ArtifactLog, dir: &Path, files: Vec<String>) {
    for f in files {
        let full = dir.join(&f);
        let name = match full.strip_prefix(&log.dir) {
            Ok(rel) => rel.display().to_string(),
            Err(_) => std::fs::canonicalize(&full).unwrap_or(full).display().to_string(),
        };
        log.path(&name);
    }
}

fn solve_logged(cli: &Cli, cfg: &RunConfig, log: &mut ArtifactLog) -> Result<Solved> {
    let solved = pipeline::solve(&cfg.spec, &cfg.grid, cfg.opts)?;
    if let Some(dir) = &cli.dump_coefficients {
        let files = coefficients::dump_coefficients(dir, &solved.spec, &solved.grid, &solved.follower.p1, &solved.gains)?;
        log_external(log, dir, files);
    }
    Ok(solved)
}

/// Run one command body inside the manifest bookkeeping.
fn with_manifest(cli: &Cli, body: impl FnOnce(&RunConfig, &mut ArtifactLog) -> Result<(i32, String)>) -> Result<i32> {
    let cfg = cli.config()?;
    let started = pipeline::unix_now();
    let mut log = ArtifactLog::new(&cfg.out)?;
    let (code, summary) = match body(&cfg, &mut log) {
        Ok(r) => r,
        Err(e) => {
            let o = failure_outcome(&e);
            (o.exit_code, o.summary)
        }
    };
    print!("{summary}");
    std::fs::write(log.path("summary.txt"), &summary)?;
    cfg.manifest(started, code, &log)?.write(&cfg.out)?;
    Ok(code)
}

fn cmd_validate(cli: &Cli) -> Result<i32> {
    with_manifest(cli, |cfg, log| {
        let report = validate_spec(&cfg.spec, &cfg.grid)?;
        write_assumptions(&log.path("assumptions.json"), &report)?;
        let full = pipeline::solve(&cfg.spec, &cfg.grid, cfg.opts);
        let mut s = format!("scenario {} ({})\n", cfg.scenario.name, cfg.scenario_hash);
        match full {
            Ok(solved) => {
                write_assumptions(&log.path("assumptions.json"), &solved.report)?;
                for w in &solved.report.warnings {
                    s.push_str(&format!("warning: {w}\n"));
                }
                s.push_str("all assumptions hold on the grid\n");
                Ok((0, s))
            }
            Err(e) => {
                let o = failure_outcome(&e);
                s.push_str(&o.summary);
                Ok((o.exit_code, s))
            }
        }
    })
}

fn cmd_solve_riccati(cli: &Cli) -> Result<i32> {
    with_manifest(cli, |cfg, log| {
        let solved = solve_logged(cli, cfg, log)?;
        let files = riccati::export_csv(&cfg.out, &solved.follower, Some(&solved.leader))?;
        log_external(log, &cfg.out, files);
        write_assumptions(&log.path("assumptions.json"), &solved.report)?;
        let last = solved.grid.n_steps();
        let s = format!(
            "Riccati solved on {} steps; |P1(0)| = {:.6e}, |P1c(0)| = {:.6e}, worst cond Ntilde2 = {:.3e}\n",
            last,
            solved.follower.p1[0].norm(),
            solved.leader.p1c[0].norm(),
            solved.leader.cond_ntilde2.iter().cloned().fold(0.0, f64::max),
        );
        Ok((0, s))
    })
}

fn cmd_simulate(cli: &Cli, csv_paths: usize) -> Result<i32> {
    with_manifest(cli, |cfg, log| {
        let solved = solve_logged(cli, cfg, log)?;
        let noise = paths::generate_noise(cfg.seed, cfg.n_paths, &cfg.grid)?;
        let sim = solved.simulate(&noise)?;
        sim.traj.write_long_csv(&log.path("trajectories.csv"), csv_paths)?;
        sim.traj.write_binary(&log.path("trajectories.bin"))?;
        Ok((0, format!("simulated {} paths x {} steps\n", cfg.n_paths, cfg.grid.n_steps())))
    })
}

fn cmd_equilibrium(cli: &Cli) -> Result<i32> {
    with_manifest(cli, |cfg, log| {
        let solved = solve_logged(cli, cfg, log)?;
        let noise = paths::generate_noise(cfg.seed, cfg.n_paths, &cfg.grid)?;
        let sim = solved.simulate(&noise)?;
        let (j1, j2) = solved.costs(&sim);
        write_costs(&log.path("costs.csv"), &[j1, j2], cfg.seed, &cfg.scenario_hash)?;
        let mut s = String::new();
        for c in [j1, j2] {
            s.push_str(&format!("J{} = {:.10e} +- {:.3e} ({} paths)\n", if c.player == Player::Follower { 1 } else { 2 }, c.mean, c.std_err, c.n_paths));
        }
        Ok((0, s))
    })
}

fn cmd_verify(cli: &Cli, which: SuiteArg) -> Result<i32> {
    let which = match which {
        SuiteArg::Stationarity => Suite::Stationarity,
        SuiteArg::Deviations => Suite::Deviations,
        SuiteArg::Oracle => Suite::Oracle,
        SuiteArg::GainModes => Suite::GainModes,
        SuiteArg::All => Suite::All,
    };
    with_manifest(cli, |cfg, log| {
        let solved = solve_logged(cli, cfg, log)?;
        let noise = paths::generate_noise(cfg.seed, cfg.n_paths, &cfg.grid)?;
        let sim = solved.simulate(&noise)?;
        let r = suite::run_suite(&solved, &sim, &noise, which, cfg.seed, log)?;
        let mut s = format!("scenario {} ({}), {} paths, seed {}\n", cfg.scenario.name, cfg.scenario_hash, cfg.n_paths, cfg.seed);
        s.push_str(&r.summary);
        s.push_str(&format!("overall {}\n", verdict(r.pass)));
        Ok((if r.pass { 0 } else { FailureClass::Verification.exit_code() }, s))
    })
}

fn cmd_pipeline(cli: &Cli) -> Result<i32> {
    let cfg = cli.config()?;
    if let Some(dir) = &cli.dump_coefficients {
        let solved = pipeline::solve(&cfg.spec, &cfg.grid, cfg.opts)?;
        coefficients::dump_coefficients(dir, &solved.spec, &solved.grid, &solved.follower.p1, &solved.gains)?;
    }
    let o = pipeline::run_pipeline(&cfg)?;
    print!("{}", o.summary);
    Ok(o.exit_code)
}

fn cmd_scenario(emit: Option<&str>, file: Option<&Path>) -> Result<i32> {
    match emit {
        None => {
            for (name, desc) in presets::list() {
                println!("{name:16} {desc}");
            }
        }
        Some(name) => {
            let text = presets::scenario(name)?.to_json();
            match file {
                Some(f) => {
                    if let Some(d) = f.parent() {
                        std::fs::create_dir_all(d)?;
                    }
                    std::fs::write(f, text)?;
                }
                None => print!("{text}"),
            }
        }
    }
    Ok(0)
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Validate => cmd_validate(cli),
        Command::SolveRiccati => cmd_solve_riccati(cli),
        Command::Simulate { csv_paths } => cmd_simulate(cli, *csv_paths),
        Command::Equilibrium => cmd_equilibrium(cli),
        Command::Verify { suite } => cmd_verify(cli, *suite),
        Command::Pipeline => cmd_pipeline(cli),
        Command::Scenario { emit, file } => cmd_scenario(emit.as_deref(), file.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { FailureClass::Config.exit_code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    init_threads();
    let code = match run(&cli) {
        Ok(c) => c,
        Err(e) => {
            let o = failure_outcome(&e);
            eprint!("{}", o.summary);
            o.exit_code
        }
    };
    ExitCode::from(code as u8)
}
