//! Serves a PV database over TCP.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use pvgate::acf::parse_acf;
use pvgate::iocsim::{load_database, IocConfig, DEFAULT_FD_LIMIT};
use pvgate::node::Endpoint;
use pvgate::tcp::{ioc_stats, run_ioc, wall_clock_ns};

#[derive(Parser)]
#[command(version, about = "Simulated IOC serving generated PVs")]
struct Cli {
    /// Database file, one `pv NAME DTYPE ASG GENERATOR PERIOD_MS AMPLITUDE` per line
    #[arg(long)]
    db: PathBuf,
    /// Access-security file; without one everyone may read and nobody may write
    #[arg(long)]
    acf: Option<PathBuf>,
    #[arg(long, default_value = "0.0.0.0:5064")]
    listen: Endpoint,
    /// Name used for the `<name>:stats:*` PVs
    #[arg(long, default_value = "ioc")]
    name: String,
    /// Messages per second that saturate the CPU proxy
    #[arg(long, default_value_t = 10_000.0)]
    capacity: f64,
    #[arg(long, default_value_t = DEFAULT_FD_LIMIT)]
    fd_limit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Timestamps count from zero at startup instead of the wall clock
    #[arg(long)]
    virtual_time: bool,
    /// Log stats every N seconds (0 disables)
    #[arg(long, default_value_t = 10)]
    stats_every: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    pvgate_cli::init_logging();
    let cli = Cli::parse();
    let db = std::fs::read_to_string(&cli.db)
        .with_context(|| format!("reading {}", cli.db.display()))?;
    let records = load_database(&db)?;
    let acf_text = match &cli.acf {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => "ASG(DEFAULT){RULE(1,READ)}".into(),
    };
    let acf = parse_acf(&acf_text)?;
    let cfg = IocConfig {
        name: cli.name.clone(),
        capacity: cli.capacity,
        fd_limit: cli.fd_limit,
        epoch_ns: if cli.virtual_time { 0 } else { wall_clock_ns() },
        seed: cli.seed,
        ..IocConfig::default()
    };
    let n = records.len();
    let handle = run_ioc(records, acf, &cli.listen, cfg).await?;
    let mut usr1 = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::user_defined1())?;
    let addr = handle
        .local_addr()
        .map(|a| a.to_string())
        .unwrap_or_default();
    eprintln!("{}: serving {n} PVs on {addr}", cli.name);

    let every = Duration::from_secs(cli.stats_every.max(1));
    let mut ticker = tokio::time::interval(every);
    ticker.tick().await;
    loop {
        tokio::select! {
            _ = usr1.recv() => println!("{}", serde_json::to_string(&ioc_stats(&handle))?),
            _ = ticker.tick(), if cli.stats_every > 0 => {
                let s = ioc_stats(&handle);
                log::info!(
                    "{}: fds={} connections={} cpu_proxy={:.3} posts/s={:.1} refused={}",
                    cli.name, s.fds, s.connections, s.cpu_proxy, s.event_posts_per_sec, s.refused_connections
                );
            }
            _ = tokio::signal::ctrl_c() => return Ok(()),
        }
    }
}
