//! Shared plumbing for the command-line tools.

use std::time::Duration;

use clap::Args;
use pvgate::client::{AddressList, ClientError};
use pvgate::node::Endpoint;
use pvgate::proto::{ChannelValue, Identity, Severity};

/// Used when neither `--addr-list` nor `PVGATE_ADDR_LIST` is given.
pub const DEFAULT_ADDR_LIST: &str = "127.0.0.1:5064";

#[derive(Debug, Args)]
pub struct ClientArgs {
    /// Comma-separated servers to search, in order [env: PVGATE_ADDR_LIST]
    #[arg(long)]
    pub addr_list: Option<String>,
    /// Fail when more than one server answers for a PV
    #[arg(long)]
    pub strict_duplicates: bool,
    /// Identity presented to servers [default: $USER@$HOSTNAME]
    #[arg(long = "as", value_name = "USER@HOST")]
    pub identity: Option<Identity>,
    /// Seconds to wait for a reply
    #[arg(long, default_value_t = 5.0)]
    pub timeout: f64,
}

impl ClientArgs {
    pub fn address_list(&self) -> Result<AddressList, ClientError> {
        let text = self
            .addr_list
            .clone()
            .or_else(|| std::env::var("PVGATE_ADDR_LIST").ok())
            .unwrap_or_else(|| DEFAULT_ADDR_LIST.to_string());
        let mut list: AddressList = text.parse()?;
        list.strict_duplicates = self.strict_duplicates;
        Ok(list)
    }

    pub fn identity(&self) -> Identity {
        self.identity.clone().unwrap_or_else(|| {
            let user = std::env::var("USER").unwrap_or_else(|_| "anonymous".into());
            let host = std::env::var("HOSTNAME").unwrap_or_else(|_| "localhost".into());
            Identity::new(user, host)
        })
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout.max(0.0))
    }
}

/// `name  timestamp  value  severity`, timestamp in seconds.
pub fn format_value(pv: &str, v: &ChannelValue) -> String {
    let secs = v.timestamp / 1_000_000_000;
    let nanos = v.timestamp % 1_000_000_000;
    format!(
        "{pv} {secs}.{nanos:09} {} {}",
        v.value,
        severity_name(v.severity)
    )
}

pub fn severity_name(s: Severity) -> &'static str {
    match s {
        Severity::None => "NO_ALARM",
        Severity::Minor => "MINOR",
        Severity::Major => "MAJOR",
        Severity::Invalid => "INVALID",
    }
}

pub fn endpoints(list: &[String]) -> Vec<Endpoint> {
    list.iter()
        .flat_map(|s| s.split(','))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Endpoint::new)
        .collect()
}

/// Reports a client failure on stderr and returns its exit code.
pub fn fail(pv: &str, e: &ClientError) -> i32 {
    eprintln!("{pv}: {e}");
    e.exit_code()
}

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
}
