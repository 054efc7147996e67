//! Discrete-event simulator for proxy-assisted video-on-demand with
//! client-side chaining.

pub mod client;
pub mod config;
pub mod error;
pub mod ids;
pub mod kernel;
pub mod metrics;
pub mod proxy;
pub mod scenario;
pub mod sim;
pub mod workload;
