//! Reads PV values once.

use std::process::ExitCode;

use clap::Parser;
use pvgate::tcp::Client;
use pvgate_cli::{fail, format_value, init_logging, ClientArgs};

#[derive(Parser)]
#[command(version, about = "Read the current value of one or more PVs")]
struct Cli {
    #[command(flatten)]
    client: ClientArgs,
    #[arg(required = true)]
    pvs: Vec<String>,
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
    let mut code = 0;
    for pv in &cli.pvs {
        match client.get(pv, cli.client.timeout()).await {
            Ok(v) => println!("{}", format_value(pv, &v)),
            Err(e) => code = code.max(fail(pv, &e)),
        }
    }
    ExitCode::from(code as u8)
}
