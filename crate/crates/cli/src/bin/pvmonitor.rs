//! Prints PV updates as they arrive.

use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use pvgate::tcp::Client;
use pvgate_cli::{fail, format_value, init_logging, ClientArgs};

#[derive(Parser)]
#[command(version, about = "Subscribe to a PV and print each update")]
struct Cli {
    #[command(flatten)]
    client: ClientArgs,
    /// Stop after this many updates
    #[arg(long)]
    count: Option<u64>,
    /// Give up after this many seconds without an update
    #[arg(long, default_value_t = 86_400.0)]
    idle: f64,
    pv: String,
}

#[tokio::main]
async fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let list = match cli.client.address_list() {
        Ok(l) => l,
        Err(e) => return ExitCode::from(fail("address list", &e) as u8),
    };
    let client = Client::new(list, cli.client.identity());
    let mut seen = 0u64;
    let limit = cli.count.unwrap_or(u64::MAX);
    if limit == 0 {
        return ExitCode::SUCCESS;
    }
    let idle = Duration::from_secs_f64(cli.idle.max(0.0));
    let pv = cli.pv.clone();
    let run = client.monitor(&cli.pv, idle, |v| {
        println!("{}", format_value(&pv, v));
        seen += 1;
        seen < limit
    });
    tokio::select! {
        r = run => match r {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => ExitCode::from(fail(&cli.pv, &e) as u8),
        },
        _ = tokio::signal::ctrl_c() => ExitCode::SUCCESS,
    }
}
