//! `cesim` — command-line runner for the coverage-enhancement simulator.
//!
//! Exit codes: 0 on success, 2 on scenario validation failure, 3 on runtime
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cesim::report::{self, RunReport};
use cesim::scenario::{demos, Diagnostic, Scenario, ScenarioFile};
use cesim::sim::Simulation;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cesim",
    version,
    about = "Deterministic simulator of dynamic Coverage Enhancement (CE mode A) for connected vehicles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Human,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its report to stdout.
    Run {
        /// Path to the scenario JSON document.
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event log as CSV to this path.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "human")]
        report: ReportFormat,
    },
    /// Validate a scenario file; prints diagnostics to stderr.
    Validate {
        scenario: PathBuf,
    },
    /// Run a bundled demo: garage-parked, emergency, roaming or restricted.
    Demo {
        name: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Write event logs as CSV; multi-variant demos get one file per
        /// variant (`<path>.<variant>.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "human")]
        report: ReportFormat,
    },
}

fn print_diagnostics(diags: &[Diagnostic]) {
    for d in diags {
        eprintln!("{d}");
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, ExitCode> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return Err(ExitCode::from(EXIT_VALIDATION));
        }
    };
    let file = ScenarioFile::from_json(&text).map_err(|d| {
        print_diagnostics(std::slice::from_ref(&d));
        ExitCode::from(EXIT_VALIDATION)
    })?;
    file.build().map_err(|diags| {
        print_diagnostics(&diags);
        ExitCode::from(EXIT_VALIDATION)
    })
}

struct RunOutput {
    report: RunReport,
    log_csv: String,
}

fn execute(scenario: &Scenario, label: &str, seed: Option<u64>) -> Result<RunOutput, ExitCode> {
    let seed = seed.unwrap_or(scenario.sim.seed);
    let sim = Simulation::with_seed(scenario, seed);
    match sim.run() {
        Ok((log, metrics)) => Ok(RunOutput {
            report: RunReport {
                scenario: label.to_string(),
                seed,
                duration_ms: scenario.sim.duration_ms,
                metrics,
            },
            log_csv: log.to_csv(),
        }),
        Err(e) => {
            eprintln!("{label}: {e}");
            Err(ExitCode::from(EXIT_RUNTIME))
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExitCode> {
    fs::write(path, contents).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_RUNTIME)
    })
}

fn emit_reports(reports: &[RunReport], format: ReportFormat) {
    match format {
        ReportFormat::Human => {
            for (i, r) in reports.iter().enumerate() {
                if i > 0 {
                    println!();
                }
                print!("{}", report::to_human(r));
            }
        }
        ReportFormat::Json => println!("{}", report::to_json(reports)),
        ReportFormat::Csv => {
            for r in reports {
                print!("{}", report::to_csv(r));
            }
        }
    }
}

fn run_command(
    path: &Path,
    seed: Option<u64>,
    log: Option<&Path>,
    format: ReportFormat,
) -> Result<(), ExitCode> {
    let scenario = load_scenario(path)?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let out = execute(&scenario, &label, seed)?;
    if let Some(log_path) = log {
        write_file(log_path, &out.log_csv)?;
    }
    emit_reports(std::slice::from_ref(&out.report), format);
    Ok(())
}

fn demo_command(
    name: &str,
    seed: Option<u64>,
    log: Option<&Path>,
    format: ReportFormat,
) -> Result<(), ExitCode> {
    let Some(variants) = demos::by_name(name) else {
        eprintln!(
            "unknown demo '{name}'; available: {}",
            demos::NAMES.join(", ")
        );
        return Err(ExitCode::from(EXIT_VALIDATION));
    };
    let multi = variants.len() > 1;
    let mut reports = Vec::new();
    for (variant, json) in variants {
        let file = ScenarioFile::from_json(json).expect("bundled demo parses");
        let scenario = file.build().expect("bundled demo is valid");
        let label = format!("{name}/{variant}");
        let out = execute(&scenario, &label, seed)?;
        if let Some(log_path) = log {
            if multi {
                let mut p = log_path.as_os_str().to_owned();
                p.push(format!(".{variant}.csv"));
                write_file(Path::new(&p), &out.log_csv)?;
            } else {
                write_file(log_path, &out.log_csv)?;
            }
        }
        reports.push(out.report);
    }
    emit_reports(&reports, format);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            seed,
            log,
            report,
        } => run_command(scenario, *seed, log.as_deref(), *report),
        Command::Validate { scenario } => {
            let text = match fs::read_to_string(scenario) {
                Ok(text) => text,
                Err(e) => {
                    eprintln!("{}: {e}", scenario.display());
                    return ExitCode::from(EXIT_VALIDATION);
                }
            };
            let diags = cesim::scenario::validate_json(&text);
            if diags.is_empty() {
                println!("{}: ok", scenario.display());
                Ok(())
            } else {
                print_diagnostics(&diags);
                Err(ExitCode::from(EXIT_VALIDATION))
            }
        }
        Command::Demo {
            name,
            seed,
            log,
            report,
        } => demo_command(name, *seed, log.as_deref(), *report),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
