//! `swapdiff` — experiment harness for the particle / field-limit / rate
//! stack in `swapdiff-core`.
//!
//! Subcommands drive each layer independently from one scenario file (or an
//! embedded builtin): `simulate` runs the particle system, `pde` the field
//! solve, `rate` the path-space rate evaluation, and `scenario run` the full
//! comparison suite with pass/fail reporting.
//!
//! Exit codes: 0 — success (and every comparison passed); 1 — the scenario
//! ran but a comparison failed its declared tolerance; 2 — configuration
//! error (bad flags, malformed scenario, impossible request); 3 — internal
//! error (numerics, I/O). Failures print a single JSON object on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use swapdiff_core::io::{load_field_trajectory, write_rate_report, write_run_dir};
use swapdiff_core::pde::{solve_colored_system, solve_perturbed_system};
use swapdiff_core::rate::{dynamic_rate, optimal_controls};
use swapdiff_core::sim::simulate;
use swapdiff_core::{Error, Result};

mod report;
mod runner;
mod scenario;

use report::{generator, write_manifest};
use runner::run_scenario;
use scenario::{builtin, Plan, Scenario, BUILTINS};

/// Default output root when neither `--out`, the scenario, nor the
/// environment variable names one.
const DEFAULT_OUT: &str = "swapdiff-out";
/// Environment variable supplying the default output root.
const OUT_ENV: &str = "SWAPDIFF_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Plain-text summary on stdout (artifacts on disk are CSV + JSON).
    Csv,
    /// Full JSON result on stdout (artifacts are identical).
    Json,
}

#[derive(Parser)]
#[command(
    name = "swapdiff",
    version,
    about = "Interacting-particle / field-limit / rate-functional experiment harness",
    long_about = "Runs scenarios described in versioned TOML files (or embedded builtins): \
                  particle simulations, field solves, rate evaluations, and full comparison \
                  suites with declared tolerances.\n\nExit codes: 0 success, 1 comparison \
                  failed, 2 configuration error, 3 internal error."
)]
struct Cli {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root directory (overrides the scenario and SWAPDIFF_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 keeps the default pool. Results never depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Stdout format; on-disk artifacts are always CSV tables + JSON
    /// manifests with bit-exact floats.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle system once, per the scenario's [sim] section.
    Simulate {
        /// Scenario file path or builtin name.
        scenario: String,
    },
    /// Solve the field equations, per the scenario's [pde] section (driven
    /// when a [perturbation] is declared).
    Pde {
        /// Scenario file path or builtin name.
        scenario: String,
    },
    /// Evaluate the dynamic rate of the [pde] solve or of a trajectory CSV.
    Rate {
        /// Scenario file path or builtin name.
        scenario: String,
        /// Rate an existing `time,color,cell,value` trajectory instead of
        /// solving.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Scenario suite operations.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Execute every comparison in a scenario and write its report.
    Run {
        /// Scenario file path or builtin name.
        scenario: String,
    },
    /// List the embedded scenarios.
    ListBuiltin,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            let code = if err.is_config_like() { 2 } else { 3 };
            let payload = serde_json::json!({
                "error": {
                    "exit_code": code,
                    "kind": error_kind(&err),
                    "message": err.to_string(),
                }
            });
            eprintln!("{payload}");
            std::process::exit(code);
        }
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Domain(_) => "domain",
        Error::Mass { .. } => "mass",
        Error::SingularSusceptibility { .. } => "singular_susceptibility",
        Error::Cfl { .. } => "cfl",
        Error::Numerics(_) => "numerics",
        Error::Io(_) => "io",
        Error::Serde(_) => "serde",
    }
}

fn run(cli: Cli) -> Result<i32> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Numerics(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate { scenario } => cmd_simulate(&cli, scenario),
        Command::Pde { scenario } => cmd_pde(&cli, scenario),
        Command::Rate {
            scenario,
            trajectory,
        } => cmd_rate(&cli, scenario, trajectory.as_deref()),
        Command::Scenario(ScenarioCommand::Run { scenario }) => cmd_scenario_run(&cli, scenario),
        Command::Scenario(ScenarioCommand::ListBuiltin) => cmd_list_builtin(&cli),
    }
}

/// Scenario source text: an existing file wins; otherwise a builtin name.
fn load_scenario_text(input: &str) -> Result<String> {
    let path = Path::new(input);
    if path.is_file() {
        return Ok(fs::read_to_string(path)?);
    }
    if let Some(text) = builtin(input) {
        return Ok(text.to_string());
    }
    Err(Error::Config(format!(
        "'{input}' is neither a scenario file nor a builtin (see `swapdiff scenario list-builtin`)"
    )))
}

fn load_plan(cli: &Cli, input: &str) -> Result<Plan> {
    let mut scenario = Scenario::from_toml_str(&load_scenario_text(input)?)?;
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
    }
    scenario.resolve()
}

/// Output root: `--out` flag, then the scenario's own `output_dir`, then the
/// environment, then `./swapdiff-out`.
fn out_root(cli: &Cli, plan: &Plan) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| plan.scenario.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// `key,value` lines for the plain-text stdout mode.
fn print_kv(pairs: &[(&str, String)]) {
    println!("key,value");
    for (k, v) in pairs {
        println!("{k},{v}");
    }
}

#[derive(Serialize)]
struct CommandSummary {
    command: &'static str,
    generator: String,
    out_dir: PathBuf,
    scenario_fingerprint: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
    #[serde(flatten)]
    values: serde_json::Map<String, serde_json::Value>,
}

impl CommandSummary {
    fn new(command: &'static str, out_dir: &Path, fingerprint: String) -> CommandSummary {
        CommandSummary {
            command,
            generator: generator(),
            out_dir: out_dir.to_path_buf(),
            scenario_fingerprint: fingerprint,
            warnings: Vec::new(),
            values: serde_json::Map::new(),
        }
    }

    fn put(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.values.insert(key.to_string(), value.into());
    }

    fn emit(&self, format: Format) -> Result<()> {
        match format {
            Format::Json => {
                println!(
                    "{}",
                    serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?
                );
            }
            Format::Csv => {
                let mut pairs = vec![
                    ("command", self.command.to_string()),
                    ("out_dir", self.out_dir.display().to_string()),
                    ("scenario_fingerprint", self.scenario_fingerprint.clone()),
                ];
                for (k, v) in &self.values {
                    let text = match v {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    pairs.push((k.as_str(), text));
                }
                for w in &self.warnings {
                    pairs.push(("warning", w.clone()));
                }
                print_kv(&pairs);
            }
        }
        Ok(())
    }
}

fn cmd_simulate(cli: &Cli, input: &str) -> Result<i32> {
    let plan = load_plan(cli, input)?;
    let cfg = plan
        .sim
        .as_ref()
        .ok_or_else(|| Error::Config("this scenario has no [sim] section to simulate".into()))?;
    let record = simulate(cfg)?;
    let dir = out_root(cli, &plan).join(&plan.scenario.name).join("sim");
    fs::create_dir_all(&dir)?;
    let (_, fingerprint) = write_manifest(&dir, &plan.scenario)?;
    let files = write_run_dir(&dir, &record)?;

    let mut summary = CommandSummary::new("simulate", &dir, fingerprint);
    summary.put("n", cfg.n as u64);
    summary.put("effective_dt", record.effective_dt);
    summary.put(
        "final_time",
        *record.times.last().expect("runs record at least one frame"),
    );
    summary.put("swap_total", record.swaps.total());
    summary.put(
        "total_pair_local_time",
        record.ledger.total_pair_local_time(),
    );
    summary.put("files", files.len() as u64);
    summary.warnings = record.warnings.clone();
    summary.emit(cli.format)?;
    Ok(0)
}

/// Solve the `[pde]` section; with a `[perturbation]`, iterate the optimal
/// controls against their own driven solve so the pair is self-consistent.
fn solve_plan_pde(plan: &Plan) -> Result<(swapdiff_core::FieldTrajectory, bool)> {
    let cfg = plan
        .pde
        .as_ref()
        .ok_or_else(|| Error::Config("this scenario has no [pde] section to solve".into()))?;
    let initial = plan
        .pde_initial
        .as_ref()
        .ok_or_else(|| Error::Numerics("missing initial data for the [pde] solve".into()))?;
    let mut traj = solve_colored_system(initial, cfg)?;
    let Some(controls) = plan.gradient_controls() else {
        return Ok((traj, false));
    };
    let mut pert = optimal_controls(&traj, &controls, &plan.params)?;
    for _ in 0..3 {
        traj = solve_perturbed_system(initial, &pert, cfg)?;
        pert = optimal_controls(&traj, &controls, &plan.params)?;
    }
    Ok((traj, true))
}

fn cmd_pde(cli: &Cli, input: &str) -> Result<i32> {
    let plan = load_plan(cli, input)?;
    let (traj, driven) = solve_plan_pde(&plan)?;
    let dir = out_root(cli, &plan).join(&plan.scenario.name).join("pde");
    fs::create_dir_all(&dir)?;
    let (_, fingerprint) = write_manifest(&dir, &plan.scenario)?;
    swapdiff_core::io::save_field_trajectory(&dir.join("solution.csv"), &traj)?;

    let mut summary = CommandSummary::new("pde", &dir, fingerprint);
    summary.put("grid", traj.grid().cells() as u64);
    summary.put("colors", traj.colors() as u64);
    summary.put("frames", traj.times().len() as u64);
    summary.put("t_end", *traj.times().last().expect("nonempty trajectory"));
    summary.put("driven", driven);
    summary.put("final_total_mass", traj.frames().last().expect("nonempty").total_mass());
    summary.emit(cli.format)?;
    Ok(0)
}

fn cmd_rate(cli: &Cli, input: &str, trajectory: Option<&Path>) -> Result<i32> {
    let plan = load_plan(cli, input)?;
    let (traj, source) = match trajectory {
        Some(path) => (load_field_trajectory(path)?, "file"),
        None => (solve_plan_pde(&plan)?.0, "solve"),
    };
    let rate = dynamic_rate(&traj, &plan.params)?;
    let dir = out_root(cli, &plan).join(&plan.scenario.name).join("rate");
    fs::create_dir_all(&dir)?;
    let (_, fingerprint) = write_manifest(&dir, &plan.scenario)?;
    write_rate_report(&dir, &rate)?;

    let mut summary = CommandSummary::new("rate", &dir, fingerprint);
    summary.put("trajectory_source", source);
    summary.put("frames", traj.times().len() as u64);
    summary.put("i_dyn", rate.i_dyn);
    if let Some(refined) = rate.i_dyn_refined {
        summary.put("i_dyn_richardson", refined);
    }
    summary.warnings = rate.warnings.clone();
    summary.emit(cli.format)?;
    Ok(0)
}

fn cmd_scenario_run(cli: &Cli, input: &str) -> Result<i32> {
    let plan = load_plan(cli, input)?;
    let dir = out_root(cli, &plan).join(&plan.scenario.name);
    let report = run_scenario(&plan, &dir, rayon::current_num_threads())?;
    match cli.format {
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?
        ),
        Format::Csv => {
            for comparison in &report.comparisons {
                println!(
                    "comparison {} ({}): {}",
                    comparison.index,
                    comparison.kind,
                    if comparison.passed { "PASS" } else { "FAIL" }
                );
                for metric in &comparison.metrics {
                    match (metric.tolerance, metric.op) {
                        (Some(tol), Some(op)) => println!(
                            "  {} = {:.6e} {} {:.6e} [{}] -> {}",
                            metric.name,
                            metric.value,
                            op,
                            tol,
                            metric.units,
                            if metric.passed == Some(true) { "ok" } else { "FAIL" }
                        ),
                        _ => println!(
                            "  {} = {:.6e} [{}]",
                            metric.name, metric.value, metric.units
                        ),
                    }
                }
            }
            for warning in &report.warnings {
                println!("warning: {warning}");
            }
            println!(
                "scenario {}: {} ({})",
                report.name,
                if report.passed { "PASS" } else { "FAIL" },
                dir.join("report.json").display()
            );
        }
    }
    Ok(if report.passed { 0 } else { 1 })
}

fn cmd_list_builtin(cli: &Cli) -> Result<i32> {
    let mut rows = Vec::new();
    for (name, text) in BUILTINS {
        let parsed = Scenario::from_toml_str(text)
            .map_err(|e| Error::Numerics(format!("embedded scenario '{name}' is broken: {e}")))?;
        rows.push((name, parsed.description.unwrap_or_default()));
    }
    match cli.format {
        Format::Json => {
            let items: Vec<serde_json::Value> = rows
                .iter()
                .map(|(name, description)| {
                    serde_json::json!({"name": name, "description": description})
                })
                .collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&items).map_err(|e| Error::Serde(e.to_string()))?
            );
        }
        Format::Csv => {
            for (name, description) in &rows {
                println!("{name}: {description}");
            }
        }
    }
    Ok(0)
}
