//! End-to-end orchestration: validate, solve, simulate, verify, write
//! artifacts and a manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coefficients::{self, DTilde1, GainMode, GainSet};
use crate::equilibrium::{self, CostEstimate, Player};
use crate::error::{FailureClass, Result, SlqError};
use crate::io::{fmt_f, CsvWriter};
use crate::model::{validate_spec, AssumptionReport, Check, GameSpec, TimeGrid};
use crate::paths::{self, FilterPaths, NoiseBundle, P3Solution, TrajectorySet};
use crate::riccati::{self, FollowerRiccatiSolution, LeaderRiccatiSolution};
use crate::scenario::{sha256_hex, Scenario};

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub mode: GainMode,
    pub dtilde1: DTilde1,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { mode: GainMode::Rederived, dtilde1: DTilde1::Zero }
    }
}

/// Everything deterministic about an equilibrium on a grid.
#[derive(Debug, Clone)]
pub struct Solved {
    pub spec: GameSpec,
    pub grid: TimeGrid,
    pub opts: SolveOptions,
    pub report: AssumptionReport,
    pub follower: FollowerRiccatiSolution,
    pub leader: LeaderRiccatiSolution,
    pub gains: GainSet,
}

/// Validation followed by both Riccati solves and the gain tables.
/// Spec-time assumption failures are returned as errors.
pub fn solve(spec: &GameSpec, grid: &TimeGrid, opts: SolveOptions) -> Result<Solved> {
    let mut report = validate_spec(spec, grid)?;
    if !report.symmetry_errors().is_empty() {
        let names: Vec<_> = report.symmetry_errors().iter().map(|(n, _)| n.clone()).collect();
        return Err(SlqError::Config(format!("non-symmetric coefficient(s): {}", names.join(", "))));
    }
    if !report.spec_time_ok() {
        return Err(SlqError::AssumptionViolated(report.violated().join(", ")));
    }
    let follower = riccati::solve_follower_riccati(spec, grid).map_err(|e| {
        if let SlqError::AssumptionA32Violated { t, .. } = e {
            report.a32 = Check::ViolatedAt { t };
        }
        e
    })?;
    report.a32 = Check::Ok;
    report.a32_margin = Some(follower.worst_a32_margin());
    let leader = riccati::solve_leader_riccati(spec, grid, &follower)?;
    report.a35 = Check::Ok;
    report.a36 = Check::Ok;
    report.a35_margin = Some(1.0 / leader.cond_ntilde2.iter().cloned().fold(0.0, f64::max));
    report.a36_margin = Some(1.0 / leader.cond_nbar2.iter().cloned().fold(0.0, f64::max));
    let gains = coefficients::build_gains(spec, grid, &leader.p1, &leader.p1c, &leader.p2c, opts.mode, opts.dtilde1)?;
    Ok(Solved { spec: spec.clone(), grid: grid.clone(), opts, report, follower, leader, gains })
}

/// One simulated ensemble with its filters and P3 solution.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub filters: FilterPaths,
    pub p3: P3Solution,
    pub traj: TrajectorySet,
}

impl Solved {
    pub fn simulate(&self, noise: &NoiseBundle) -> Result<Simulation> {
        let filters = paths::simulate_xtilde_and_filter(&self.spec, &self.grid, noise)?;
        self.simulate_on(filters)
    }

    pub fn simulate_on(&self, filters: FilterPaths) -> Result<Simulation> {
        let p3 = paths::solve_p3_bsde(&self.spec, &self.grid, &self.gains, &self.leader, &filters, paths::P3_DEGREE)?;
        let mut traj = paths::simulate_closed_loop(&self.spec, &self.grid, &filters, &self.gains, &p3)?;
        equilibrium::recover_adjoints(&mut traj, &self.spec, &self.grid, &self.follower, &self.leader, &self.gains);
        Ok(Simulation { filters, p3, traj })
    }

    pub fn costs(&self, sim: &Simulation) -> (CostEstimate, CostEstimate) {
        (
            equilibrium::estimate_cost(&sim.traj, &self.spec, &self.grid, Player::Follower),
            equilibrium::estimate_cost(&sim.traj, &self.spec, &self.grid, Player::Leader),
        )
    }
}

/// J1 estimated under the physical measure and, with Z^-1 weights, under the
/// reference measure in which (W, Y) are independent Brownian motions.
pub fn measure_transform_check(solved: &Solved, n_paths: usize, seed: u64) -> Result<(CostEstimate, CostEstimate)> {
    let noise = paths::generate_noise(seed, n_paths, &solved.grid)?;
    let direct = solved.simulate(&noise)?;
    let ref_filters = paths::simulate_filters_under(&solved.spec, &solved.grid, &noise, paths::Measure::Reference)?;
    let weighted = solved.simulate_on(ref_filters)?;
    let tab = equilibrium::CostTables::new(&solved.spec, &solved.grid, Player::Follower);
    let a = equilibrium::per_path_costs(&direct.traj, &solved.spec, &solved.grid, Player::Follower);
    let t = &weighted.traj;
    let b: Vec<f64> = (0..t.n_paths)
        .map(|p| tab.path_cost(t.x.path(p), t.u1.path(p), Some(t.zinv_density.path(p))))
        .collect();
    Ok((CostEstimate::from_samples(&a, Player::Follower), CostEstimate::from_samples(&b, Player::Follower)))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub scenario_path: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub n_paths: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub gain_mode: String,
    pub dtilde1: String,
    pub versions: Vec<(String, String)>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub exit_code: i32,
    /// Relative paths of every artifact written, with their sha256.
    pub artifacts: Vec<(String, String)>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recompute artifact and scenario hashes; returns mismatching names.
    pub fn tampered(&self, dir: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for (name, h) in &self.artifacts {
            match std::fs::read(dir.join(name)) {
                Ok(b) if sha256_hex(&b) == *h => {}
                _ => bad.push(name.clone()),
            }
        }
        if let Ok(b) = std::fs::read(&self.scenario_path) {
            if sha256_hex(&b) != self.scenario_hash {
                bad.push(self.scenario_path.clone());
            }
        }
        bad
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Collects artifact names and hashes as they are written.
pub struct ArtifactLog {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl ArtifactLog {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(ArtifactLog { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn hashed(&self) -> Result<Vec<(String, String)>> {
        self.files
            .iter()
            .map(|f| Ok((f.clone(), sha256_hex(&std::fs::read(self.dir.join(f))?))))
            .collect()
    }
}

pub fn write_costs(path: &Path, costs: &[CostEstimate], seed: u64, scenario_hash: &str) -> Result<()> {
    let mut w = CsvWriter::create(path, &["player", "mean", "std_err", "n_paths", "seed", "scenario_hash"])?;
    for c in costs {
        w.row(&[
            c.player.name().to_string(),
            fmt_f(c.mean),
            fmt_f(c.std_err),
            c.n_paths.to_string(),
            seed.to_string(),
            scenario_hash.to_string(),
        ])?;
    }
    w.finish()
}

pub fn write_assumptions(path: &Path, r: &AssumptionReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(r)? + "\n")?;
    Ok(())
}

/// Inputs shared by every CLI command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario_path: PathBuf,
    pub scenario: Scenario,
    pub scenario_hash: String,
    pub spec: GameSpec,
    pub grid: TimeGrid,
    pub seed: u64,
    pub n_paths: usize,
    pub opts: SolveOptions,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn load(scenario_path: &Path, dt: Option<f64>, seed: u64, n_paths: usize, opts: SolveOptions, out: &Path) -> Result<Self> {
        let (scenario, scenario_hash) = Scenario::load(scenario_path)?;
        let spec = scenario.to_spec()?;
        let grid = match dt {
            None => scenario.grid()?,
            Some(dt) => {
                if !(dt > 0.0) {
                    return Err(SlqError::Config("--dt must be positive".into()));
                }
                let n = (scenario.horizon() / dt).round() as usize;
                if ((n as f64) * dt - scenario.horizon()).abs() > 1e-9 * scenario.horizon() {
                    return Err(SlqError::Config(format!("--dt {dt} does not divide the horizon {}", scenario.horizon())));
                }
                TimeGrid::new(scenario.horizon(), n)?
            }
        };
        Ok(RunConfig {
            scenario_path: scenario_path.to_path_buf(),
            scenario,
            scenario_hash,
            spec,
            grid,
            seed,
            n_paths,
            opts,
            out: out.to_path_buf(),
        })
    }

    pub fn manifest(&self, started: u64, exit_code: i32, log: &ArtifactLog) -> Result<RunManifest> {
        Ok(RunManifest {
            scenario_path: self.scenario_path.display().to_string(),
            scenario_hash: self.scenario_hash.clone(),
            seed: self.seed,
            n_paths: self.n_paths,
            horizon: self.grid.horizon(),
            n_steps: self.grid.n_steps(),
            gain_mode: format!("{:?}", self.opts.mode).to_lowercase(),
            dtilde1: match self.opts.dtilde1 {
                DTilde1::Zero => "zero".into(),
                DTilde1::MinusD1Scaled => "minus_D1_scaled".into(),
            },
            versions: vec![("slq-core".into(), env!("CARGO_PKG_VERSION").into())],
            started_unix: started,
            finished_unix: unix_now(),
            exit_code,
            artifacts: log.hashed()?,
        })
    }
}

/// Outcome of `run_pipeline`: exit code plus a human-readable summary.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub exit_code: i32,
    pub summary: String,
}

pub fn failure_outcome(e: &SlqError) -> PipelineOutcome {
    let class = e.class();
    let name = match class {
        FailureClass::Config => "configuration error",
        FailureClass::Assumption => "assumption violation",
        FailureClass::BlowUp => "Riccati blow-up",
        FailureClass::Verification => "verification failure",
    };
    PipelineOutcome { exit_code: class.exit_code(), summary: format!("{name}: {e}\n") }
}

/// validate -> follower Riccati -> leader Riccati -> gains -> simulate ->
/// costs -> stationarity; writes artifacts and the manifest.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    let started = unix_now();
    let mut log = ArtifactLog::new(&cfg.out)?;
    let outcome = match pipeline_body(cfg, &mut log) {
        Ok(o) => o,
        Err(e) => failure_outcome(&e),
    };
    std::fs::write(log.path("summary.txt"), &outcome.summary)?;
    let m = cfg.manifest(started, outcome.exit_code, &log)?;
    m.write(&cfg.out)?;
    Ok(outcome)
}

fn pipeline_body(cfg: &RunConfig, log: &mut ArtifactLog) -> Result<PipelineOutcome> {
    let report = validate_spec(&cfg.spec, &cfg.grid)?;
    write_assumptions(&log.path("assumptions.json"), &report)?;
    let solved = solve(&cfg.spec, &cfg.grid, cfg.opts)?;
    write_assumptions(&log.path("assumptions.json"), &solved.report)?;
    for f in riccati::export_csv(&cfg.out, &solved.follower, Some(&solved.leader))? {
        log.path(&f);
    }
    let noise = paths::generate_noise(cfg.seed, cfg.n_paths, &cfg.grid)?;
    let sim = solved.simulate(&noise)?;
    let (j1, j2) = solved.costs(&sim);
    write_costs(&log.path("costs.csv"), &[j1, j2], cfg.seed, &cfg.scenario_hash)?;
    let checks = crate::suite::run_suite(&solved, &sim, &noise, crate::suite::Suite::Stationarity, cfg.seed, log)?;
    let mut s = String::new();
    s.push_str(&format!("scenario {} ({})\n", cfg.scenario.name, cfg.scenario_hash));
    s.push_str(&format!("grid T={} n_steps={} paths={} seed={}\n", cfg.grid.horizon(), cfg.grid.n_steps(), cfg.n_paths, cfg.seed));
    for w in &solved.report.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s.push_str(&format!("J1 = {} +- {}\nJ2 = {} +- {}\n", fmt_f(j1.mean), fmt_f(j1.std_err), fmt_f(j2.mean), fmt_f(j2.std_err)));
    s.push_str(&checks.summary);
    s.push_str(&format!("overall {}\n", verdict(checks.pass)));
    let exit_code = if checks.pass { 0 } else { FailureClass::Verification.exit_code() };
    Ok(PipelineOutcome { exit_code, summary: s })
}

pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
