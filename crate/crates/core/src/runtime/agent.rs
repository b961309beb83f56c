use std::net::SocketAddr;
use std::time::{Duration, Instant};

use super::transport::{with_link_model, LinkModel, Transport, UdpTransport};
use super::wire::{self, Frame, Kind};
use super::{env_ms, RuntimeError};
use crate::admm::solve_prosumer;
use crate::kernel::SolveOptions;
use crate::model::Case;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Tolerance of the local subproblem solver.
    pub tol: f64,
    /// Interval between HELLO attempts.
    pub hello_interval: Duration,
    /// Give up registering after this long.
    pub registration_timeout: Duration,
    /// Exit when the aggregator stays silent this long.
    pub idle_timeout: Duration,
    pub link: Option<LinkModel>,
}

impl Default for AgentConfig {
    /// Defaults, overridden by `DOPF_INITIAL_RTO_MS`,
    /// `DOPF_REGISTRATION_TIMEOUT_MS` and `DOPF_AGENT_IDLE_MS` when set.
    fn default() -> Self {
        AgentConfig {
            tol: 1e-9,
            hello_interval: env_ms("DOPF_INITIAL_RTO_MS").unwrap_or(Duration::from_millis(250)),
            registration_timeout: env_ms("DOPF_REGISTRATION_TIMEOUT_MS")
                .unwrap_or(Duration::from_secs(30)),
            idle_timeout: env_ms("DOPF_AGENT_IDLE_MS").unwrap_or(Duration::from_secs(60)),
            link: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentExit {
    /// The aggregator ended the run.
    Done,
    /// The aggregator went silent.
    Idle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentReport {
    pub run_id: u64,
    pub exit: AgentExit,
    /// Subproblems solved; repeated requests are answered from cache.
    pub solves: u32,
    pub failed_solves: u32,
    /// Last iteration answered.
    pub last_iteration: Option<u32>,
}

/// Registers with `server` as prosumer `agent_id` of `case` and answers
/// TARGETS frames until the run ends.
pub fn agent_run(
    server: SocketAddr,
    agent_id: u16,
    case: &Case,
    cfg: &AgentConfig,
) -> Result<AgentReport, RuntimeError> {
    let h = agent_id as usize;
    if h >= case.n_prosumers() {
        return Err(RuntimeError::UnknownAgent {
            id: agent_id,
            n: case.n_prosumers(),
        });
    }
    let local: SocketAddr = if server.is_ipv4() {
        "0.0.0.0:0".parse().expect("literal")
    } else {
        "[::]:0".parse().expect("literal")
    };
    let udp = UdpTransport::bind(local)?;
    let transport: Box<dyn Transport> = match cfg.link {
        Some(model) => Box::new(with_link_model(udp, model)?),
        None => Box::new(udp),
    };
    let opts = SolveOptions::with_tol(cfg.tol);
    let send = |frame: &Frame| {
        let bytes = wire::encode(frame).expect("agent frames are well formed");
        if let Err(e) = transport.send_to(&bytes, server) {
            log::warn!("send to {server} failed: {e}");
        }
    };

    let mut report = AgentReport {
        run_id: 0,
        exit: AgentExit::Idle,
        solves: 0,
        failed_solves: 0,
        last_iteration: None,
    };
    // A TARGETS frame doubles as the assignment when ASSIGN was lost.
    let mut first: Option<Frame> = None;
    let mut joined = false;
    let give_up = Instant::now() + cfg.registration_timeout;
    'hello: while Instant::now() < give_up {
        send(&Frame::control(Kind::Hello, 0, agent_id, 0));
        let wait_until = Instant::now() + cfg.hello_interval;
        while let Some(left) = wait_until.checked_duration_since(Instant::now()) {
            let Some((bytes, from)) = transport.recv_from(left)? else {
                break;
            };
            match wire::decode(&bytes) {
                Ok(f) if from == server && f.agent_id == agent_id => match f.kind {
                    Kind::Assign => {
                        report.run_id = f.run_id;
                        joined = true;
                        break 'hello;
                    }
                    Kind::Targets => {
                        report.run_id = f.run_id;
                        first = Some(f);
                        joined = true;
                        break 'hello;
                    }
                    _ => {}
                },
                Ok(_) => {}
                Err(e) => log::debug!("dropping malformed frame: {e}"),
            }
        }
    }
    if !joined {
        return Err(RuntimeError::NoAggregator);
    }
    log::info!("agent {agent_id} joined run {:016x}", report.run_id);

    let mut cached: Option<(u32, Frame)> = None;
    loop {
        let f = match first.take() {
            Some(f) => f,
            None => match transport.recv_from(cfg.idle_timeout)? {
                None => {
                    log::warn!(
                        "agent {agent_id}: aggregator silent for {:?}",
                        cfg.idle_timeout
                    );
                    report.exit = AgentExit::Idle;
                    return Ok(report);
                }
                Some((bytes, from)) => match wire::decode(&bytes) {
                    Ok(f)
                        if from == server
                            && f.agent_id == agent_id
                            && f.run_id == report.run_id =>
                    {
                        f
                    }
                    Ok(_) => continue,
                    Err(e) => {
                        log::debug!("dropping malformed frame: {e}");
                        continue;
                    }
                },
            },
        };
        match f.kind {
            Kind::Targets => {
                let k = f.iteration;
                match &cached {
                    Some((ck, reply)) if *ck == k => {
                        send(reply);
                        continue;
                    }
                    Some((ck, _)) if *ck > k => continue,
                    _ => {}
                }
                let Some((rho, lambda, p_hat)) = f.as_targets() else {
                    continue;
                };
                if p_hat.len() != case.horizon.steps {
                    log::warn!(
                        "agent {agent_id}: TARGETS with {} steps, expected {}",
                        p_hat.len(),
                        case.horizon.steps
                    );
                    continue;
                }
                let start = Instant::now();
                let reply = match solve_prosumer(case, h, rho, &p_hat, &lambda, &opts) {
                    Ok(p) => {
                        report.solves += 1;
                        Frame::profile(report.run_id, agent_id, k, &p, start.elapsed())
                    }
                    Err(reason) => {
                        log::error!("agent {agent_id}: solve failed at iteration {k}: {reason}");
                        report.failed_solves += 1;
                        Frame::control(Kind::Error, report.run_id, agent_id, k)
                    }
                };
                send(&reply);
                report.last_iteration = Some(k);
                cached = Some((k, reply));
            }
            Kind::Done => {
                send(&Frame::control(
                    Kind::Done,
                    report.run_id,
                    agent_id,
                    f.iteration,
                ));
                report.exit = AgentExit::Done;
                return Ok(report);
            }
            Kind::Assign | Kind::Hello | Kind::Profile | Kind::Error => {}
        }
    }
}
