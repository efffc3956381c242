//! Command-line front end: validate scenarios, run them, sweep one
//! parameter, and diff run logs.
//!
//! Exit codes: 0 success, 1 bad input (arguments or scenario), 2 runtime
//! failure (I/O), 3 trace mismatch from `diff`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ruralsense::scenario::check_case;
use ruralsense::{format_trace, load_scenario_with, simulate, Metrics, Overrides, Scenario};

const SEED_ENV: &str = "RURALSENSE_SEED";

#[derive(Parser)]
#[command(name = "ruralsense", version, about = "Delay-tolerant agro-advisory simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a scenario file, check its invariants, and report its shape.
    Validate {
        /// Scenario TOML file.
        scenario: PathBuf,
    },
    /// Run one scenario and report metrics.
    Run {
        /// Scenario TOML file.
        scenario: PathBuf,
        /// Override the scenario seed (beats the RURALSENSE_SEED variable).
        #[arg(long)]
        seed: Option<u64>,
        /// Stop the clock at this horizon instead of the scenario's.
        #[arg(long)]
        until: Option<u64>,
        /// Write the run log (one event per line) to this file.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// Write metrics to this file instead of stdout.
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
        /// Metrics rendering.
        #[arg(long, value_enum, default_value_t = Format::Lines)]
        format: Format,
    },
    /// Re-run one scenario once per value of a single parameter.
    Sweep {
        /// Scenario TOML file.
        scenario: PathBuf,
        /// Parameter to vary (e.g. relay_capacity, t_d, scan_period).
        #[arg(long)]
        param: String,
        /// Comma-separated values, one run per value, rows in this order.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
        /// Seed override applied to every run in the sweep.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare two run logs byte for byte.
    Diff {
        /// Baseline trace file.
        a: PathBuf,
        /// Candidate trace file.
        b: PathBuf,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    /// `key=value` per line, fixed order.
    Lines,
    /// Aligned human-readable table.
    Table,
}

fn render(metrics: &Metrics, format: Format) -> String {
    match format {
        Format::Lines => metrics.to_lines(),
        Format::Table => metrics.to_table(),
    }
}

/// Flag beats environment beats the scenario file.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| format!("{SEED_ENV} must be an unsigned integer, got {raw:?}")),
        Err(_) => Ok(None),
    }
}

fn load(path: &PathBuf, overrides: &Overrides) -> Result<Scenario, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(2)
    })?;
    load_scenario_with(&text, overrides).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(1)
    })
}

fn write_or_die(path: &PathBuf, content: &str) -> Result<(), ExitCode> {
    std::fs::write(path, content).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // bad input.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(code) => code,
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, ExitCode> {
    match cli.command {
        Command::Validate { scenario } => {
            let s = load(&scenario, &Overrides::default())?;
            let case = match s.case {
                Some(label) => {
                    // The loader already cross-checked the label; re-deriving
                    // here keeps `validate` honest about what it claims.
                    check_case(&s, label).map_err(|e| {
                        eprintln!("error: {}: {e}", scenario.display());
                        ExitCode::from(1)
                    })?;
                    format!("case {label:?}")
                }
                None => "no case label".to_string(),
            };
            println!(
                "ok: {} ({case}, {} farmers, {} relays, {} queries, horizon {})",
                s.name,
                s.farmers.len(),
                s.relays.len(),
                s.workload.len(),
                s.horizon
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { scenario, seed, until, trace, metrics, format } => {
            let seed = resolve_seed(seed).map_err(|msg| {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            })?;
            let overrides = Overrides { seed, until, param: None };
            let s = load(&scenario, &overrides)?;
            let out = simulate(&s);
            if let Some(path) = trace {
                write_or_die(&path, &format_trace(&out.trace))?;
            }
            let rendered = render(&out.metrics, format);
            match metrics {
                Some(path) => write_or_die(&path, &rendered)?,
                None => print!("{rendered}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { scenario, param, values, seed } => {
            let seed = resolve_seed(seed).map_err(|msg| {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            })?;
            for value in values {
                let overrides =
                    Overrides { seed, until: None, param: Some((param.clone(), value)) };
                let s = load(&scenario, &overrides)?;
                let out = simulate(&s);
                let row: Vec<String> = out
                    .metrics
                    .to_pairs()
                    .into_iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                println!("{param}={value} {}", row.join(" "));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Diff { a, b } => {
            let read = |path: &PathBuf| {
                std::fs::read_to_string(path).map_err(|e| {
                    eprintln!("error: cannot read {}: {e}", path.display());
                    ExitCode::from(2)
                })
            };
            let left = read(&a)?;
            let right = read(&b)?;
            if left == right {
                println!("identical ({} lines)", left.lines().count());
                return Ok(ExitCode::SUCCESS);
            }
            let mut l = left.lines();
            let mut r = right.lines();
            let mut line_no = 1u64;
            loop {
                match (l.next(), r.next()) {
                    (Some(x), Some(y)) if x == y => line_no += 1,
                    (Some(x), Some(y)) => {
                        println!("differ at line {line_no}:");
                        println!("- {x}");
                        println!("+ {y}");
                        break;
                    }
                    (Some(x), None) => {
                        println!("differ at line {line_no}: left continues");
                        println!("- {x}");
                        break;
                    }
                    (None, Some(y)) => {
                        println!("differ at line {line_no}: right continues");
                        println!("+ {y}");
                        break;
                    }
                    (None, None) => {
                        // Same lines, different bytes (e.g. trailing newline).
                        println!("differ in whitespace only");
                        break;
                    }
                }
            }
            Ok(ExitCode::from(3))
        }
    }
}
