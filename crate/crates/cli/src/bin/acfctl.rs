//! Access-security file tool.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use pvgate::acf::{
    augment_for_gateway, merge_acf, parse_acf, AccessSecurityConfig, Level, MergeMode,
};
use pvgate::proto::Identity;

#[derive(Parser)]
#[command(version, about = "Merge, check and query access-security files")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Merge files into one, optionally granting the gateway write access
    Merge {
        /// Fail on conflicting group definitions instead of taking the union
        #[arg(long)]
        strict: bool,
        /// Add this identity wherever a WRITE rule names a group
        #[arg(long, value_name = "USER@HOST")]
        gateway_user: Option<Identity>,
        /// Output file; stdout when omitted
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Decide one access; exits 0 when allowed and 3 when denied
    Check {
        #[arg(long)]
        acf: PathBuf,
        #[arg(long, default_value = "DEFAULT")]
        asg: String,
        #[arg(long)]
        user: String,
        #[arg(long, default_value = "")]
        host: String,
        #[arg(long, default_value = "READ")]
        level: Level,
    },
    /// Parse and print in canonical form
    Fmt { file: PathBuf },
}

fn load(path: &PathBuf) -> anyhow::Result<AccessSecurityConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_acf(&text).with_context(|| path.display().to_string())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Merge {
            strict,
            gateway_user,
            out,
            inputs,
        } => {
            let configs = inputs
                .iter()
                .map(load)
                .collect::<anyhow::Result<Vec<_>>>()?;
            let mode = if strict {
                MergeMode::Strict
            } else {
                MergeMode::Union
            };
            let mut merged = merge_acf(&configs, mode)?;
            if let Some(id) = gateway_user {
                merged = augment_for_gateway(&merged, &id);
            }
            let text = merged.render();
            match out {
                Some(p) => {
                    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check {
            acf,
            asg,
            user,
            host,
            level,
        } => {
            let config = load(&acf)?;
            let d = config.evaluate(&asg, &Identity::new(user, host), level);
            match d.matched_rule {
                Some((group, i)) => println!("allow (ASG {group}, rule {})", i + 1),
                None => println!("deny"),
            }
            Ok(if d.allow {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }
        Cmd::Fmt { file } => {
            print!("{}", load(&file)?.render());
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
            ExitCode::FAILURE
        }
    }
}
