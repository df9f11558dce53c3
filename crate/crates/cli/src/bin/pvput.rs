//! Writes one PV.

use std::process::ExitCode;

use clap::Parser;
use pvgate::proto::{ChannelValue, Severity, Value};
use pvgate::tcp::Client;
use pvgate_cli::{fail, format_value, init_logging, ClientArgs};

#[derive(Parser)]
#[command(version, about = "Write a value to a PV")]
struct Cli {
    #[command(flatten)]
    client: ClientArgs,
    pv: String,
    /// Numbers are sent as doubles, anything else as a string
    value: String,
}

#[tokio::main]
async fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let list = match cli.client.address_list() {
        Ok(l) => l,
        Err(e) => return ExitCode::from(fail("address list", &e) as u8),
    };
    let value = match cli.value.parse::<f64>() {
        Ok(d) => Value::Double(d),
        Err(_) => Value::Str(cli.value.clone()),
    };
    let client = Client::new(list, cli.client.identity());
    let t = cli.client.timeout();
    if let Err(e) = client
        .put(&cli.pv, ChannelValue::new(value, Severity::None, 0), t)
        .await
    {
        return ExitCode::from(fail(&cli.pv, &e) as u8);
    }
    // echo back what the server now holds
    match client.get(&cli.pv, t).await {
        Ok(v) => println!("{}", format_value(&cli.pv, &v)),
        Err(e) => return ExitCode::from(fail(&cli.pv, &e) as u8),
    }
    ExitCode::SUCCESS
}
