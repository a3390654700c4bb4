//! `rho-lab`: run verification suites and experiment files, render reports.
//!
//! Exit status is 0 when every report passes, 1 when any check fails and 2
//! for usage, IO or schema errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rho_lab::experiments::ExperimentReport;
use rho_lab::manifest::{parse_manifest, Manifest};
use rho_lab::suites::{SuiteConfig, SuiteRegistry, ALL};

#[derive(Parser)]
#[command(name = "rho-lab", version, about = "Deterministic verification runner for the measurement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named suite (or `all`) over seeded random trials.
    Verify {
        #[arg(long, default_value = ALL)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        trials: u64,
        /// Override every suite's default tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 4)]
        dim_system: usize,
        #[arg(long, default_value_t = 3)]
        dim_ancilla: usize,
        /// Write the report here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Run the experiment(s) described by a JSON file.
    Run {
        file: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Summarize a JSON report produced by `verify` or `run`.
    Report {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// List the registered suites.
    Suites,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether everything passed.
fn execute(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Verify { suite, seed, trials, tol, dim_system, dim_ancilla, output, format } => {
            let registry = SuiteRegistry::builtin();
            if suite != ALL && registry.get(&suite).is_none() {
                bail!("unknown suite `{suite}` (expected one of: {}, {ALL})", registry.names().join(", "));
            }
            let config = SuiteConfig { seed, trials, tol, dim_system, dim_ancilla };
            config.validate().context("invalid configuration")?;
            let reports = registry.run(&suite, &config)?;
            emit(&render_reports(&reports, format, true)?, output.as_deref())?;
            if output.is_some() {
                let failed = reports.iter().filter(|r| !r.pass).count();
                println!("{} reports, {failed} failures", reports.len());
            }
            Ok(reports.iter().all(|r| r.pass))
        }
        Command::Run { file, output, format } => {
            let text = read(&file)?;
            let manifest = parse_manifest(&text).with_context(|| format!("{}", file.display()))?;
            let reports = manifest.run()?;
            let as_list = matches!(manifest, Manifest::Many(_));
            emit(&render_reports(&reports, format, as_list)?, output.as_deref())?;
            Ok(reports.iter().all(|r| r.pass))
        }
        Command::Report { input, format } => {
            let text = read(&input)?;
            let reports = parse_reports(&text).with_context(|| format!("{} is not a report", input.display()))?;
            let out = render_summary(&reports, format)?;
            emit(&out, None)?;
            Ok(reports.iter().all(|r| r.pass))
        }
        Command::Suites => {
            let registry = SuiteRegistry::builtin();
            let mut out = String::new();
            for s in registry.suites() {
                out.push_str(&format!("{:<12} {}\n", s.name(), s.description()));
            }
            emit(&out, None)?;
            Ok(true)
        }
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn emit(text: &str, output: Option<&Path>) -> anyhow::Result<()> {
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).context("cannot write to standard output")
        }
    }
}

fn parse_reports(text: &str) -> anyhow::Result<Vec<ExperimentReport>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    Ok(if value.is_array() { serde_json::from_value(value)? } else { vec![serde_json::from_value(value)?] })
}

fn render_reports(reports: &[ExperimentReport], format: Format, as_list: bool) -> anyhow::Result<String> {
    Ok(match format {
        Format::Json => {
            let mut s = if as_list || reports.len() != 1 {
                serde_json::to_string_pretty(reports)?
            } else {
                serde_json::to_string_pretty(&reports[0])?
            };
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "label",
                "suite",
                "expectation",
                "reference_value",
                "branch_probability",
                "residual",
                "tolerance",
                "pass",
            ])?;
            for r in reports {
                w.write_record([
                    r.label.clone(),
                    r.suite.clone(),
                    num(r.expectation),
                    num(r.reference_value),
                    r.branch_probability.map(num).unwrap_or_default(),
                    num(r.residual),
                    num(r.tolerance),
                    r.pass.to_string(),
                ])?;
            }
            String::from_utf8(w.into_inner()?)?
        }
        Format::Text => {
            let mut s = String::new();
            for r in reports {
                let verdict = if r.pass { "PASS" } else { "FAIL" };
                s.push_str(&format!(
                    "{verdict} {:<24} E={:<22} residual={:.3e} tol={:.1e}\n",
                    r.label, r.expectation, r.residual, r.tolerance
                ));
                if !r.pass {
                    for c in r.checks.iter().filter(|c| c.residual.is_nan() || c.residual.abs() > r.tolerance) {
                        s.push_str(&format!("     {}: {:.3e}\n", c.name, c.residual));
                    }
                }
            }
            let failed = reports.iter().filter(|r| !r.pass).count();
            s.push_str(&format!("{} reports, {failed} failures\n", reports.len()));
            s
        }
    })
}

/// Shortest round-trip text, switching to exponent notation for tiny or huge magnitudes.
fn num(x: f64) -> String {
    if x != 0.0 && x.is_finite() && !(1e-4..1e15).contains(&x.abs()) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

#[derive(Default)]
struct Tally {
    pass: usize,
    fail: usize,
    max_residual: f64,
}

fn render_summary(reports: &[ExperimentReport], format: Format) -> anyhow::Result<String> {
    let mut table: BTreeMap<&str, Tally> = BTreeMap::new();
    for r in reports {
        let t = table.entry(r.suite.as_str()).or_default();
        if r.pass {
            t.pass += 1;
        } else {
            t.fail += 1;
        }
        t.max_residual = t.max_residual.max(r.residual.abs());
    }
    let failing: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.label.as_str()).collect();
    Ok(match format {
        Format::Json => {
            let suites: Vec<serde_json::Value> = table
                .iter()
                .map(|(name, t)| {
                    serde_json::json!({
                        "suite": name,
                        "pass": t.pass,
                        "fail": t.fail,
                        "max_residual": t.max_residual,
                    })
                })
                .collect();
            let doc = serde_json::json!({ "suites": suites, "failures": failing.len(), "failing": failing });
            let mut s = serde_json::to_string_pretty(&doc)?;
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["suite", "pass", "fail", "max_residual"])?;
            for (name, t) in &table {
                w.write_record([name.to_string(), t.pass.to_string(), t.fail.to_string(), num(t.max_residual)])?;
            }
            String::from_utf8(w.into_inner()?)?
        }
        Format::Text => {
            let mut s = format!("{:<12} {:>6} {:>6} {:>14}\n", "suite", "pass", "fail", "max_residual");
            for (name, t) in &table {
                s.push_str(&format!("{:<12} {:>6} {:>6} {:>14.3e}\n", name, t.pass, t.fail, t.max_residual));
            }
            s.push_str(&format!("{} failures\n", failing.len()));
            for label in &failing {
                s.push_str(&format!("FAIL {label}\n"));
            }
            s
        }
    })
}
