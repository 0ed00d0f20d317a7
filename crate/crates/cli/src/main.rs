//! `coplan`: validate, run and sweep scenario files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use coplan::sim::{self, fixtures, PathTimeDiagram, RunLog, ScenarioSpec, Termination};

#[derive(Parser)]
#[command(
    name = "coplan",
    version,
    about = "Cooperative planning scenario simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its logs.
    Run {
        /// Scenario file, or the name of a shipped fixture.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "COPLAN_OUT_DIR", default_value = ".")]
        out_dir: PathBuf,
        /// Path-time diagram export: data (csv), vector graphic (diagram), or both.
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Validate a scenario and report its zones and marginal-case verdict.
    Check { scenario: String },
    /// Run once per parameter value and print a comparison table.
    Sweep {
        scenario: String,
        /// `seed`, `end_time`, `route_probability:<route>` or `agents.<id>.<s0|v0|a0>`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the shipped fixtures.
    Fixtures,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Diagram,
    Both,
}

/// Process outcome; the discriminant is the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Success = 0,
    Validation = 2,
    Deadlock = 3,
    Collision = 4,
    Internal = 5,
}

impl From<Termination> for Outcome {
    fn from(t: Termination) -> Self {
        match t {
            Termination::GoalReached | Termination::Horizon => Outcome::Success,
            Termination::Deadlock => Outcome::Deadlock,
            Termination::Collision => Outcome::Collision,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Core(#[from] coplan::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn outcome(&self) -> Outcome {
        match self {
            CliError::Core(coplan::Error::Contract(_) | coplan::Error::Domain(_)) => {
                Outcome::Internal
            }
            CliError::Core(_) | CliError::Usage(_) => Outcome::Validation,
            CliError::Io { .. } => Outcome::Internal,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a scenario file, falling back to fixture names.
fn load(scenario: &str) -> Result<ScenarioSpec, CliError> {
    let path = Path::new(scenario);
    if path.exists() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{scenario}: {e}")))?;
        return sim::parse_scenario(&text).map_err(|e| match e {
            coplan::Error::Parse(msg) => {
                CliError::Core(coplan::Error::Parse(format!("{scenario}: {msg}")))
            }
            other => CliError::Core(other),
        });
    }
    match fixtures::source(scenario) {
        Some(text) => Ok(sim::parse_scenario(text)?),
        None => Err(CliError::Usage(format!(
            "{scenario}: no such file or fixture (fixtures: {})",
            fixtures::names().collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn write(path: PathBuf, contents: &str) -> Result<(), CliError> {
    std::fs::write(&path, contents).map_err(io_err(&path))
}

/// Writes the run log, the event sidecar and the requested diagram exports;
/// returns the written paths.
fn write_outputs(log: &RunLog, out_dir: &Path, format: Format) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let stem = &log.scenario;
    let mut files = vec![
        (out_dir.join(format!("{stem}.csv")), log.to_csv()),
        (
            out_dir.join(format!("{stem}.events.json")),
            log.events_json(),
        ),
    ];
    let diagram = PathTimeDiagram::from_log(log);
    if matches!(format, Format::Csv | Format::Both) {
        files.push((
            out_dir.join(format!("{stem}.diagram.csv")),
            diagram.to_csv(),
        ));
    }
    if matches!(format, Format::Diagram | Format::Both) {
        files.push((out_dir.join(format!("{stem}.svg")), diagram.to_svg()));
    }
    let mut written = Vec::new();
    for (path, text) in files {
        write(path.clone(), &text)?;
        written.push(path);
    }
    Ok(written)
}

fn cmd_run(
    scenario: &str,
    seed: Option<u64>,
    out_dir: &Path,
    format: Format,
) -> Result<Outcome, CliError> {
    let mut spec = load(scenario)?;
    if let Some(seed) = seed {
        spec.sim.seed = seed;
    }
    let log = sim::run_scenario(&spec)?;
    for path in write_outputs(&log, out_dir, format)? {
        println!("wrote {}", path.display());
    }
    println!(
        "termination: {} at t = {:.6}",
        log.termination.as_str(),
        log.end_time
    );
    Ok(log.termination.into())
}

fn cmd_check(scenario: &str) -> Result<Outcome, CliError> {
    let spec = load(scenario)?;
    let report = sim::check_scenario(&spec)?;
    println!("scenario: {}", spec.name);
    for route in &report.routes {
        println!(
            "route {} (p = {:.6}): {} zone(s)",
            route.id,
            route.probability,
            route.zones.len()
        );
        for z in &route.zones {
            let priority = z.priority.as_deref().unwrap_or("-");
            println!(
                "  {} [{:.6}, {:.6}] / {} [{:.6}, {:.6}] priority {priority}",
                z.agent_a,
                z.interval_a.s_in,
                z.interval_a.s_out,
                z.agent_b,
                z.interval_b.s_in,
                z.interval_b.s_out
            );
        }
    }
    println!("horizon ({}): {:.6} s", report.ego, report.horizon);
    println!("{}", report.verdict());
    Ok(Outcome::Success)
}

fn cmd_sweep(
    scenario: &str,
    param: &str,
    values: &[f64],
    seed: Option<u64>,
) -> Result<Outcome, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let mut base = load(scenario)?;
    if let Some(seed) = seed {
        base.sim.seed = seed;
    }
    let ego = base.agents[0].id.clone();
    let mut table =
        String::from("value,termination,max_decel,braking_onset,clearance,deadlock,overrides\n");
    for &value in values {
        let spec = base.with_param(param, value)?;
        let log = sim::run_scenario(&spec)?;
        let s = log.summary(&ego).expect("first agent is logged");
        let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            table,
            "{value:.6},{},{:.6},{},{},{},{}",
            s.termination.as_str(),
            s.max_decel,
            opt(s.braking_onset),
            opt(s.clearance),
            if s.deadlock { "yes" } else { "no" },
            s.overrides
        );
    }
    print!("{table}");
    Ok(Outcome::Success)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            seed,
            out_dir,
            format,
        } => cmd_run(scenario, *seed, out_dir, *format),
        Command::Check { scenario } => cmd_check(scenario),
        Command::Sweep {
            scenario,
            param,
            values,
            seed,
        } => cmd_sweep(scenario, param, values, *seed),
        Command::Fixtures => {
            fixtures::names().for_each(|n| println!("{n}"));
            Ok(Outcome::Success)
        }
    };
    let outcome = result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.outcome()
    });
    ExitCode::from(outcome as u8)
}
