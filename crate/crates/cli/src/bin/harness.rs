//! Direct-versus-gateway experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use pvgate::harness::{emit_csv, inject_gateway_failure, render_chart, run_topology, ScenarioSpec};

#[derive(Parser)]
#[command(
    version,
    about = "Run topology experiments in virtual time and chart the results"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario; exits 0 only when every check passes
    Run {
        /// `key = value` scenario file; the standard scenario when omitted
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Directory for results.csv, report.json and chart.svg
        #[arg(long)]
        out: PathBuf,
    },
    /// Chart columns of a results CSV as SVG
    Chart {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated column names
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { scenario, out } => {
            let spec = match &scenario {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    ScenarioSpec::parse(&text)?
                }
                None => ScenarioSpec::standard(),
            };
            let report = match spec.kill_at_secs {
                Some(k) => {
                    inject_gateway_failure(&spec, k * 1000, spec.restart_at_secs.map(|r| r * 1000))?
                }
                None => run_topology(&spec)?,
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let csv = out.join("results.csv");
            emit_csv(&report, &csv)?;
            std::fs::write(
                out.join("report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            render_chart(&csv, &out.join("chart.svg"), &["alive_pvs", "active_pvs"])?;
            println!("fd reduction   {:.1}%", report.fd_reduction_pct);
            println!("cpu reduction  {:.1}%", report.cpu_reduction_pct);
            println!("interruption   {:.1} s", report.interruption_seconds);
            let mut ok = true;
            for (name, pass) in report.checks() {
                println!("{} {name}", if pass { "PASS" } else { "FAIL" });
                ok &= pass;
            }
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Chart {
            input,
            out,
            columns,
        } => {
            let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
            render_chart(&input, &out, &cols)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    pvgate_cli::init_logging();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
