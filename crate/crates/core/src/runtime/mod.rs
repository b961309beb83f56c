//! Networked deployment: an aggregator process and one agent per prosumer
//! exchanging [`wire`] frames over UDP with a thin reliability layer.

mod agent;
mod aggregator;
mod transport;
pub mod wire;

use std::io;
use std::time::Duration;

use thiserror::Error;

use crate::admm::AdmmError;

pub use agent::{agent_run, AgentConfig, AgentExit, AgentReport};
pub use aggregator::{aggregator_serve, AggregatorConfig, AggregatorHandle};
pub use transport::{with_link_model, Latency, LinkModel, LinkTransport, Transport, UdpTransport};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("invalid link model: {0}")]
    InvalidLink(String),
    #[error("agents {missing:?} did not register in time")]
    Registration { missing: Vec<u16> },
    #[error("agent id {id} out of range for {n} prosumers")]
    UnknownAgent { id: u16, n: usize },
    #[error("no aggregator reachable")]
    NoAggregator,
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error("aggregator thread panicked")]
    Panicked,
}

/// Duration from a millisecond environment variable, if set and valid.
fn env_ms(name: &str) -> Option<Duration> {
    let raw = std::env::var(name).ok()?;
    match raw.trim().parse::<u64>() {
        Ok(ms) => Some(Duration::from_millis(ms)),
        Err(_) => {
            log::warn!("ignoring {name}={raw:?}: not a whole number of milliseconds");
            None
        }
    }
}
