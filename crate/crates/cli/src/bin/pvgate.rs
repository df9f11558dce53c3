//! Runs the caching gateway.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use pvgate::config::parse_key_values;
use pvgate::gateway::GatewayConfig;
use pvgate::node::Endpoint;
use pvgate::proto::Identity;
use pvgate::tcp::{gateway_stats, start_gateway};

#[derive(Parser)]
#[command(version, about = "Caching gateway between clients and upstream IOCs")]
struct Cli {
    /// `key = value` file; flags given on the command line override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<Endpoint>,
    /// Upstream IOC, repeatable or comma-separated; searched in order
    #[arg(long)]
    upstream: Vec<String>,
    /// Access-security file, repeatable; several files are merged
    #[arg(long)]
    acf: Vec<PathBuf>,
    /// Refuse to start when the ACF files disagree
    #[arg(long)]
    strict_merge: bool,
    /// Seconds an unused PV stays cached
    #[arg(long)]
    hold_seconds: Option<u64>,
    #[arg(long)]
    stats_prefix: Option<String>,
    /// Poll upstream every N ms instead of subscribing
    #[arg(long)]
    poll_ms: Option<u64>,
    /// Identity used on upstream channels
    #[arg(long = "as", value_name = "USER@HOST")]
    identity: Option<Identity>,
    /// Log stats every N seconds (0 disables)
    #[arg(long, default_value_t = 10)]
    stats_every: u64,
}

fn config(cli: &Cli) -> anyhow::Result<GatewayConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            GatewayConfig::from_key_values(&parse_key_values(&text)?)?
        }
        None => GatewayConfig::default(),
    };
    if let Some(l) = &cli.listen {
        cfg.listen = l.clone();
    }
    if !cli.upstream.is_empty() {
        cfg.upstreams = pvgate_cli::endpoints(&cli.upstream);
    }
    if !cli.acf.is_empty() {
        cfg.acf_paths = cli.acf.clone();
    }
    cfg.strict_merge |= cli.strict_merge;
    if let Some(h) = cli.hold_seconds {
        cfg.hold_seconds = h;
    }
    if let Some(p) = &cli.stats_prefix {
        cfg.stats_prefix = p.clone();
    }
    if cli.poll_ms.is_some() {
        cfg.poll_ms = cli.poll_ms;
    }
    if let Some(id) = &cli.identity {
        cfg.identity = id.clone();
    }
    Ok(cfg)
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    pvgate_cli::init_logging();
    let cli = Cli::parse();
    let cfg = config(&cli)?;
    let handle = start_gateway(&cfg).await?;
    let mut usr1 = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::user_defined1())?;
    let addr = handle
        .local_addr()
        .map(|a| a.to_string())
        .unwrap_or_default();
    eprintln!("gateway on {addr}, {} upstream(s)", cfg.upstreams.len());

    let mut ticker = tokio::time::interval(Duration::from_secs(cli.stats_every.max(1)));
    ticker.tick().await;
    loop {
        tokio::select! {
            _ = usr1.recv() => println!("{}", serde_json::to_string(&gateway_stats(&handle))?),
            _ = ticker.tick(), if cli.stats_every > 0 => {
                let s = gateway_stats(&handle);
                log::info!(
                    "alive={} active={} clients={} servers={} events/s={:.1} posts/s={:.1} fds={}",
                    s.alive_pvs, s.active_pvs, s.client_count, s.server_count, s.event_rate, s.post_rate, s.fd_count
                );
            }
            _ = tokio::signal::ctrl_c() => return Ok(()),
        }
    }
}
