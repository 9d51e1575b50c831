//! Command-line front end: config files, run manifests and result files.
//!
//! Exit codes: 0 success, 2 config or parse error, 3 assumption violation,
//! 4 non-convergence, 5 property failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    brute_force_oracle, check_derivatives, find_budget_thresholds, sweep, verify_suite, AnalysisError,
    SweepParam, SweepResult, VerifyOptions,
};
use crate::model::{validate_assumptions, AssumptionReport, CommunityConfig};
use crate::solver::{solve_equilibrium, InitMode, SolverError, SolverOptions};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("configuration violates the standing assumptions: {}", .0.notes.join("; "))]
    Assumption(Box<AssumptionReport>),
    #[error("{0}")]
    NonConvergence(String),
    #[error("{0}")]
    PropertyFailure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Assumption(_) => 3,
            CliError::NonConvergence(_) => 4,
            CliError::PropertyFailure(_) => 5,
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Assumptions(report) => CliError::Assumption(report),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Solver(s) => s.into(),
            AnalysisError::Unconverged => CliError::NonConvergence(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cpgame", version, about = "Core-periphery community game: equilibria and structural checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    UniformFloor,
    UniformBudget,
    Random,
}

impl From<InitArg> for InitMode {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::UniformFloor => InitMode::UniformFloor,
            InitArg::UniformBudget => InitMode::UniformBudget,
            InitArg::Random => InitMode::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ParamArg {
    #[value(name = "Mc", alias = "mc")]
    Mc,
    #[value(name = "Mp", alias = "mp")]
    Mp,
    #[value(name = "K", alias = "k")]
    K,
}

impl From<ParamArg> for SweepParam {
    fn from(a: ParamArg) -> Self {
        match a {
            ParamArg::Mc => SweepParam::Mc,
            ParamArg::Mp => SweepParam::Mp,
            ParamArg::K => SweepParam::K,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the equilibrium and write it as JSON.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every structural check on the equilibrium.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep one parameter over `steps` equal intervals from `from` to `to`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: ParamArg,
        #[arg(long, allow_negative_numbers = true)]
        from: f64,
        #[arg(long, allow_negative_numbers = true)]
        to: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-connectivity grid over core and periphery budgets.
    Thresholds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        mc_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        mp_grid: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Brute-force grid maximizer for at most three agents, compared with the solver.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic derivatives against finite differences.
    Derivatives {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Solve,
    Verify,
    Sweep,
    Thresholds,
    Oracle,
    Derivatives,
}

/// On-disk configuration: a `[community]` table (with `[community.kernel]`)
/// and an optional `[solver]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub community: CommunityConfig,
    #[serde(default)]
    pub solver: SolverOptions,
}

/// Everything needed to reproduce one output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: CommandKind,
    pub config: CommunityConfig,
    pub options: SolverOptions,
    pub seed: u64,
    pub output_path: String,
    /// SHA-256 of the canonical JSON form of config and options.
    pub config_hash: String,
    pub tool_version: String,
}

impl RunManifest {
    fn new(command: CommandKind, file: &ConfigFile, seed: u64, out: &Path) -> Self {
        Self {
            command,
            config: file.community.clone(),
            options: file.solver,
            seed,
            output_path: out.display().to_string(),
            config_hash: config_hash(file),
            tool_version: TOOL_VERSION.to_string(),
        }
    }
}

pub fn config_hash(file: &ConfigFile) -> String {
    let canonical = serde_json::to_vec(file).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Parses a config file without checking the standing assumptions.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
    file.community.validate().map_err(|e| CliError::Config(e.to_string()))?;
    file.solver.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(file)
}

/// Reads, parses and fully validates a config file.
pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let file = parse_config(&text)?;
    let report = validate_assumptions(&file.community);
    if !report.passed {
        return Err(CliError::Assumption(Box::new(report)));
    }
    Ok(file)
}

#[derive(Serialize)]
struct Output<'a, T: Serialize> {
    manifest: &'a RunManifest,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, manifest: &RunManifest, body: T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&Output { manifest, body })
        .map_err(|e| CliError::Config(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("cannot write {}: {e}", path.display()))
}

/// Writes a header and rows, appending the manifest's provenance columns.
fn write_csv(path: &Path, manifest: &RunManifest, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut full: Vec<&str> = header.to_vec();
    full.extend(["config_hash", "seed", "tool_version"]);
    w.write_record(&full).map_err(|e| csv_error(path, e))?;
    for mut row in rows {
        row.extend([manifest.config_hash.clone(), manifest.seed.to_string(), manifest.tool_version.clone()]);
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| csv_error(path, e))
}

/// `steps` equal intervals from `from` to `to`, both ends included.
fn linspace(from: f64, to: f64, steps: usize) -> Vec<f64> {
    if steps == 0 {
        return vec![from];
    }
    (0..=steps)
        .map(|i| if i == steps { to } else { from + (to - from) * i as f64 / steps as f64 })
        .collect()
}

fn summarize_failure(report: &crate::analysis::PropertyReport) -> String {
    let shown: Vec<String> = report
        .witnesses
        .iter()
        .take(3)
        .map(|w| format!("agents {:?} values {:?} ({})", w.agents, w.values, w.detail))
        .collect();
    format!(
        "{:?}: {} witness(es); {}",
        report.property,
        report.witnesses.len(),
        shown.join("; ")
    )
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve { config, out, init, seed } => {
            let mut file = load_config(&config)?;
            if let Some(mode) = init {
                file.solver.init_mode = mode.into();
            }
            if let Some(seed) = seed {
                file.solver.seed = seed;
            }
            let manifest = RunManifest::new(CommandKind::Solve, &file, file.solver.seed, &out);
            let result = solve_equilibrium(&file.community, &file.solver)?;
            write_json(&out, &manifest, serde_json::json!({ "result": result }))?;
            if !result.converged {
                return Err(CliError::NonConvergence(format!(
                    "no convergence after {} iterations (last step {})",
                    result.iterations, result.final_step
                )));
            }
            Ok(())
        }
        Command::Verify { config, out, seed } => {
            let file = load_config(&config)?;
            let seed = seed.unwrap_or(file.solver.seed);
            let manifest = RunManifest::new(CommandKind::Verify, &file, seed, &out);
            let result = solve_equilibrium(&file.community, &file.solver)?;
            if !result.converged {
                write_json(&out, &manifest, serde_json::json!({ "result": result }))?;
                return Err(CliError::NonConvergence("equilibrium did not converge; nothing verified".into()));
            }
            let verify = VerifyOptions { seed, ..VerifyOptions::default() };
            let suite = verify_suite(&file.community, &result, &file.solver, &verify)?;
            write_json(&out, &manifest, serde_json::json!({ "suite": suite }))?;
            if suite.passed {
                Ok(())
            } else {
                let lines: Vec<String> = suite.reports.iter().filter(|r| !r.passed).map(summarize_failure).collect();
                Err(CliError::PropertyFailure(lines.join("\n")))
            }
        }
        Command::Sweep { config, param, from, to, steps, out } => {
            let file = load_config(&config)?;
            if !(from.is_finite() && to.is_finite()) {
                return Err(CliError::Config("sweep bounds must be finite".into()));
            }
            let param: SweepParam = param.into();
            let values = linspace(from, to, steps);
            let manifest = RunManifest::new(CommandKind::Sweep, &file, file.solver.seed, &out);
            let result = sweep(&file.community, param, &values, &file.solver)?;
            write_sweep(&out, &manifest, &result)?;
            if let Some(r) = result.records.iter().find(|r| !r.converged) {
                return Err(CliError::NonConvergence(format!("sweep value {} did not converge", r.value)));
            }
            Ok(())
        }
        Command::Thresholds { config, mc_grid, mp_grid, out } => {
            let file = load_config(&config)?;
            let manifest = RunManifest::new(CommandKind::Thresholds, &file, file.solver.seed, &out);
            let result = find_budget_thresholds(&file.community, &mc_grid, &mp_grid, &file.solver)?;
            let rows = result
                .grid
                .iter()
                .map(|c| {
                    vec![
                        c.budget_core.to_string(),
                        c.budget_periphery.to_string(),
                        c.converged.to_string(),
                        c.fully_connected.to_string(),
                        c.potential.to_string(),
                    ]
                })
                .collect();
            let header = ["budget_core", "budget_periphery", "converged", "fully_connected", "potential"];
            write_csv(&out, &manifest, &header, rows)?;
            write_json(
                &sidecar_path(&out),
                &manifest,
                serde_json::json!({
                    "m_c_hat": result.m_c_hat,
                    "m_p_hat": result.m_p_hat,
                    "frontier_monotone": result.frontier_monotone,
                    "frontier_violations": result.frontier_violations,
                }),
            )?;
            if result.grid.iter().any(|c| !c.converged) {
                return Err(CliError::NonConvergence("some grid cells did not converge".into()));
            }
            Ok(())
        }
        Command::Oracle { config, grid_steps, out } => {
            let file = load_config(&config)?;
            let manifest = RunManifest::new(CommandKind::Oracle, &file, file.solver.seed, &out);
            let oracle = brute_force_oracle(&file.community, grid_steps)?;
            let solver = solve_equilibrium(&file.community, &file.solver)?;
            let gap = solver.potential() - oracle.potential;
            let within_bound = gap.abs() <= oracle.lipschitz_bound;
            write_json(
                &out,
                &manifest,
                serde_json::json!({
                    "oracle": oracle,
                    "solver_potential": solver.potential(),
                    "solver_allocation": solver.allocation,
                    "solver_converged": solver.converged,
                    "potential_gap": gap,
                    "within_bound": within_bound,
                }),
            )?;
            if !solver.converged {
                Err(CliError::NonConvergence("solver did not converge".into()))
            } else if !within_bound {
                Err(CliError::PropertyFailure(format!(
                    "solver and oracle potentials differ by {gap}, beyond the grid bound {}",
                    oracle.lipschitz_bound
                )))
            } else {
                Ok(())
            }
        }
        Command::Derivatives { config, samples, seed, out } => {
            let file = load_config(&config)?;
            let seed = seed.unwrap_or(file.solver.seed);
            let manifest = RunManifest::new(CommandKind::Derivatives, &file, seed, &out);
            let report = check_derivatives(&file.community, samples, seed)?;
            write_json(&out, &manifest, serde_json::json!({ "report": report }))?;
            if report.passed {
                Ok(())
            } else {
                Err(CliError::PropertyFailure(format!(
                    "{} sample(s) failed the derivative check",
                    report.failures.len()
                )))
            }
        }
    }
}

fn write_sweep(out: &Path, manifest: &RunManifest, result: &SweepResult) -> Result<()> {
    let header = [
        "param",
        "value",
        "converged",
        "iterations",
        "potential",
        "fully_connected",
        "core_content_value",
        "outside",
        "participation",
        "core_utility",
        "core_rates",
        "links_to_core",
    ];
    let rows = result
        .records
        .iter()
        .map(|r| {
            vec![
                result.swept_parameter.name().to_string(),
                r.value.to_string(),
                r.converged.to_string(),
                r.iterations.to_string(),
                r.potential.to_string(),
                r.fully_connected.to_string(),
                join(&r.core_content_value),
                join(&r.outside),
                join(&r.participation),
                join(&r.core_utility),
                join(&r.core_rates),
                join(&r.links_to_core),
            ]
        })
        .collect();
    write_csv(out, manifest, &header, rows)?;
    write_json(
        &sidecar_path(out),
        manifest,
        serde_json::json!({ "swept_parameter": result.swept_parameter, "values": result.values }),
    )
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Assumption(report) = &e {
                eprintln!("{:>5} {:>12} {:>14} {:>14}", "agent", "position", "consumption", "production");
                for s in &report.per_agent {
                    eprintln!("{:>5} {:>12.6} {:>14.6} {:>14.6}", s.agent, s.position, s.consumption, s.production);
                }
            }
            e.exit_code()
        }
    }
}
