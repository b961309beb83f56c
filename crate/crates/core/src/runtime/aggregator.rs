use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError};

use super::transport::{with_link_model, LinkModel, Transport, UdpTransport};
use super::wire::{self, decode_duration, Frame, Kind};
use super::{env_ms, RuntimeError};
use crate::admm::{run_admm, AdmmConfig, AdmmResult, BackendError, ProsumerBackend, RoundReport};
use crate::model::Case;

/// Poll interval of the receive thread, bounding shutdown latency.
const RECV_POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorConfig {
    pub admm: AdmmConfig,
    /// How long to wait for every agent's HELLO.
    pub registration_timeout: Duration,
    /// Retransmission timeout before any round trip has been measured.
    pub initial_rto: Duration,
    /// Lower bound on the adaptive retransmission timeout.
    pub min_rto: Duration,
    /// Transmissions of one TARGETS frame before the agent is declared lost.
    pub max_attempts: u32,
    /// Impairment of outgoing frames, for experiments.
    pub link: Option<LinkModel>,
}

impl AggregatorConfig {
    /// Defaults, overridden by `DOPF_REGISTRATION_TIMEOUT_MS` and
    /// `DOPF_INITIAL_RTO_MS` when set.
    pub fn new(admm: AdmmConfig) -> Self {
        AggregatorConfig {
            admm,
            registration_timeout: env_ms("DOPF_REGISTRATION_TIMEOUT_MS")
                .unwrap_or(Duration::from_secs(30)),
            initial_rto: env_ms("DOPF_INITIAL_RTO_MS").unwrap_or(Duration::from_secs(1)),
            min_rto: Duration::from_millis(50),
            max_attempts: 5,
            link: None,
        }
    }
}

/// A running aggregator. [`AggregatorHandle::join`] waits for the ADMM run.
pub struct AggregatorHandle {
    local_addr: SocketAddr,
    thread: thread::JoinHandle<Result<AdmmResult, RuntimeError>>,
}

impl AggregatorHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn join(self) -> Result<AdmmResult, RuntimeError> {
        self.thread.join().map_err(|_| RuntimeError::Panicked)?
    }
}

/// Binds `bind`, waits for one agent per prosumer of `case`, then runs ADMM
/// with the prosumer subproblems solved remotely.
pub fn aggregator_serve(
    bind: SocketAddr,
    case: &Case,
    cfg: AggregatorConfig,
) -> Result<AggregatorHandle, RuntimeError> {
    cfg.admm.validate()?;
    let udp = UdpTransport::bind(bind)?;
    let local_addr = udp.local_addr()?;
    let transport: Arc<dyn Transport> = match cfg.link {
        Some(model) => Arc::new(with_link_model(udp, model)?),
        None => Arc::new(udp),
    };
    let case = case.clone();
    let thread = thread::Builder::new()
        .name("aggregator".into())
        .spawn(move || serve(transport, case, cfg))?;
    Ok(AggregatorHandle { local_addr, thread })
}

struct Incoming {
    frame: Frame,
    from: SocketAddr,
    len: usize,
}

fn spawn_receiver(
    transport: Arc<dyn Transport>,
    stop: Arc<AtomicBool>,
) -> Result<(Receiver<Incoming>, thread::JoinHandle<()>), RuntimeError> {
    let (tx, rx) = crossbeam_channel::unbounded();
    let handle = thread::Builder::new()
        .name("aggregator-recv".into())
        .spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match transport.recv_from(RECV_POLL) {
                    Ok(Some((bytes, from))) => match wire::decode(&bytes) {
                        Ok(frame) => {
                            let len = bytes.len();
                            if tx.send(Incoming { frame, from, len }).is_err() {
                                return;
                            }
                        }
                        Err(e) => log::debug!("dropping malformed frame from {from}: {e}"),
                    },
                    Ok(None) => {}
                    Err(e) => {
                        log::error!("receive failed: {e}");
                        return;
                    }
                }
            }
        })?;
    Ok((rx, handle))
}

fn serve(
    transport: Arc<dyn Transport>,
    case: Case,
    cfg: AggregatorConfig,
) -> Result<AdmmResult, RuntimeError> {
    let stop = Arc::new(AtomicBool::new(false));
    let (rx, receiver) = spawn_receiver(Arc::clone(&transport), Arc::clone(&stop))?;
    let mut backend = RemoteBackend {
        transport,
        rx,
        run_id: rand::random(),
        addrs: vec![None; case.n_prosumers()],
        srtt: None,
        initial_rto: cfg.initial_rto,
        min_rto: cfg.min_rto,
        max_attempts: cfg.max_attempts,
    };
    let result = backend
        .register(cfg.registration_timeout)
        .and_then(|()| run_admm(&case, &cfg.admm, &mut backend).map_err(RuntimeError::from));
    stop.store(true, Ordering::Relaxed);
    let _ = receiver.join();
    result
}

/// Per-agent retransmission state within one round.
struct Pending {
    bytes: Vec<u8>,
    sent_at: Instant,
    attempts: u32,
    deadline: Instant,
}

struct RemoteBackend {
    transport: Arc<dyn Transport>,
    rx: Receiver<Incoming>,
    run_id: u64,
    addrs: Vec<Option<SocketAddr>>,
    /// Smoothed round-trip time including the agent's solve.
    srtt: Option<Duration>,
    initial_rto: Duration,
    min_rto: Duration,
    max_attempts: u32,
}

impl RemoteBackend {
    fn n(&self) -> usize {
        self.addrs.len()
    }

    fn rto(&self) -> Duration {
        match self.srtt {
            Some(s) => (2 * s).max(self.min_rto),
            None => self.initial_rto,
        }
    }

    fn send(&self, bytes: &[u8], to: SocketAddr) {
        if let Err(e) = self.transport.send_to(bytes, to) {
            log::warn!("send to {to} failed: {e}");
        }
    }

    fn encode(frame: &Frame) -> Vec<u8> {
        wire::encode(frame).expect("aggregator frames are well formed")
    }

    /// Answers HELLO with ASSIGN and remembers where the agent lives.
    fn on_hello(&mut self, frame: &Frame, from: SocketAddr) {
        let id = frame.agent_id as usize;
        if id >= self.n() {
            log::warn!("HELLO from unknown agent {id} at {from}");
            return;
        }
        if self.addrs[id] != Some(from) {
            log::info!("agent {id} registered from {from}");
        }
        self.addrs[id] = Some(from);
        let assign = Frame::control(Kind::Assign, self.run_id, frame.agent_id, 0);
        self.send(&Self::encode(&assign), from);
    }

    fn register(&mut self, timeout: Duration) -> Result<(), RuntimeError> {
        let deadline = Instant::now() + timeout;
        while self.addrs.iter().any(Option::is_none) {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(msg) if msg.frame.kind == Kind::Hello => self.on_hello(&msg.frame, msg.from),
                Ok(_) => {}
                Err(RecvTimeoutError::Timeout) => {
                    let missing = (0..self.n() as u16)
                        .filter(|&h| self.addrs[h as usize].is_none())
                        .collect();
                    return Err(RuntimeError::Registration { missing });
                }
                Err(RecvTimeoutError::Disconnected) => return Err(RuntimeError::NoAggregator),
            }
        }
        Ok(())
    }

    fn observe_rtt(&mut self, sample: Duration) {
        self.srtt = Some(match self.srtt {
            Some(s) => s.mul_f64(0.875) + sample.mul_f64(0.125),
            None => sample,
        });
    }
}

impl ProsumerBackend for RemoteBackend {
    fn solve_round(
        &mut self,
        k: u32,
        rho: f64,
        p_hat: &[Vec<f64>],
        lambda: &[Vec<f64>],
    ) -> Result<RoundReport, BackendError> {
        let start = Instant::now();
        let n = self.n();
        let rto = self.rto();
        let mut bytes_down = 0u64;
        let mut bytes_up = 0u64;
        let mut pending: Vec<Option<Pending>> = Vec::with_capacity(n);
        for h in 0..n {
            let frame = Frame::targets(self.run_id, h as u16, k, rho, &lambda[h], &p_hat[h]);
            let bytes = Self::encode(&frame);
            self.send(&bytes, self.addrs[h].expect("registered"));
            bytes_down += bytes.len() as u64;
            let now = Instant::now();
            pending.push(Some(Pending {
                bytes,
                sent_at: now,
                attempts: 1,
                deadline: now + rto,
            }));
        }
        let mut p: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut solve_max = Duration::ZERO;
        let mut open = n;
        while open > 0 {
            let next = pending
                .iter()
                .flatten()
                .map(|q| q.deadline)
                .min()
                .expect("open rounds");
            match self
                .rx
                .recv_timeout(next.saturating_duration_since(Instant::now()))
            {
                Ok(msg) => {
                    let f = &msg.frame;
                    if f.kind == Kind::Hello {
                        self.on_hello(f, msg.from);
                        continue;
                    }
                    let h = f.agent_id as usize;
                    if f.run_id != self.run_id || h >= n {
                        continue;
                    }
                    bytes_up += msg.len as u64;
                    if f.iteration != k {
                        continue;
                    }
                    match f.kind {
                        Kind::Profile if p[h].is_none() => {
                            if f.payload.len() != p_hat[h].len() {
                                log::warn!(
                                    "agent {h} sent {} values, expected {}",
                                    f.payload.len(),
                                    p_hat[h].len()
                                );
                                continue;
                            }
                            let q = pending[h].take().expect("pending until answered");
                            // Karn: only unambiguous samples update the estimate.
                            if q.attempts == 1 {
                                self.observe_rtt(q.sent_at.elapsed());
                            }
                            solve_max = solve_max.max(decode_duration(f.aux));
                            p[h] = Some(f.values());
                            open -= 1;
                        }
                        Kind::Error => {
                            return Err(BackendError::Solver {
                                agent: f.agent_id,
                                reason: format!("agent reported a failed solve at iteration {k}"),
                            })
                        }
                        _ => {}
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    let now = Instant::now();
                    for h in 0..n {
                        let Some(q) = pending[h].as_mut() else {
                            continue;
                        };
                        if q.deadline > now {
                            continue;
                        }
                        if q.attempts >= self.max_attempts {
                            return Err(BackendError::Transport {
                                agent: h as u16,
                                reason: format!("no reply after {} attempts", q.attempts),
                            });
                        }
                        q.attempts += 1;
                        // Exponential backoff on repeated loss.
                        q.deadline = now + rto * (1 << (q.attempts - 1).min(4));
                        log::debug!(
                            "retransmitting TARGETS k={k} to agent {h} (attempt {})",
                            q.attempts
                        );
                        let (bytes, to) = (q.bytes.clone(), self.addrs[h].expect("registered"));
                        self.send(&bytes, to);
                        bytes_down += bytes.len() as u64;
                    }
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(BackendError::Transport {
                        agent: pending.iter().position(Option::is_some).unwrap_or(0) as u16,
                        reason: "receiver stopped".into(),
                    })
                }
            }
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let solve_ms = solve_max.as_secs_f64() * 1e3;
        Ok(RoundReport {
            p: p.into_iter()
                .map(|row| row.expect("all answered"))
                .collect(),
            solve_ms,
            transport_ms: (wall_ms - solve_ms).max(0.0),
            bytes_up,
            bytes_down,
        })
    }

    /// Sends DONE and waits for the echoes. Missing echoes are logged only:
    /// the result is already final.
    fn finish(&mut self, k: u32) -> Result<(), BackendError> {
        let n = self.n();
        let mut waiting: Vec<bool> = vec![true; n];
        let rto = self.rto();
        for attempt in 0..self.max_attempts {
            for h in (0..n).filter(|&h| waiting[h]) {
                let done = Frame::control(Kind::Done, self.run_id, h as u16, k);
                self.send(&Self::encode(&done), self.addrs[h].expect("registered"));
            }
            let deadline = Instant::now() + rto * (1 << attempt.min(4));
            while waiting.iter().any(|&w| w) {
                match self
                    .rx
                    .recv_timeout(deadline.saturating_duration_since(Instant::now()))
                {
                    Ok(msg) if msg.frame.kind == Kind::Done && msg.frame.run_id == self.run_id => {
                        if let Some(w) = waiting.get_mut(msg.frame.agent_id as usize) {
                            *w = false;
                        }
                    }
                    Ok(_) => {}
                    Err(_) => break,
                }
            }
            if !waiting.iter().any(|&w| w) {
                return Ok(());
            }
        }
        let missing: Vec<usize> = (0..n).filter(|&h| waiting[h]).collect();
        log::warn!("no DONE echo from agents {missing:?}");
        Ok(())
    }
}
