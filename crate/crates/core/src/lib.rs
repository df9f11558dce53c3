//! A caching process-variable gateway with simulated IOCs.
//!
//! * [`proto`]: the binary wire format.
//! * [`acf`]: access-security files: parsing, merging, evaluation.
//! * [`iocsim`]: simulated IOC servers with a file-descriptor and CPU model.
//! * [`gateway`]: the caching gateway.
//! * [`client`]: name resolution, get, put and monitor.
//! * [`harness`]: direct-versus-gateway experiments in virtual time.
//!
//! Every server and client is a sans-IO [`node::Node`]; [`sim`] runs them in
//! virtual time and [`tcp`] on real sockets.

pub mod acf;
pub mod client;
pub mod config;
pub mod gateway;
pub mod harness;
pub mod iocsim;
pub mod node;
pub mod proto;
pub mod rate;
pub mod sim;
pub mod tcp;
