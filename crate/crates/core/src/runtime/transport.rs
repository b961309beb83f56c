//! Datagram transports and link impairment.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RuntimeError;

/// Largest datagram read.
const MAX_DATAGRAM: usize = 65_536;

pub trait Transport: Send + Sync {
    fn send_to(&self, bytes: &[u8], to: SocketAddr) -> io::Result<()>;
    /// Waits up to `timeout` for one datagram.
    fn recv_from(&self, timeout: Duration) -> io::Result<Option<(Vec<u8>, SocketAddr)>>;
    fn local_addr(&self) -> io::Result<SocketAddr>;
}

pub struct UdpTransport {
    socket: UdpSocket,
}

impl UdpTransport {
    pub fn bind(addr: SocketAddr) -> io::Result<Self> {
        Ok(UdpTransport {
            socket: UdpSocket::bind(addr)?,
        })
    }
}

impl Transport for UdpTransport {
    fn send_to(&self, bytes: &[u8], to: SocketAddr) -> io::Result<()> {
        self.socket.send_to(bytes, to).map(|_| ())
    }

    fn recv_from(&self, timeout: Duration) -> io::Result<Option<(Vec<u8>, SocketAddr)>> {
        self.socket
            .set_read_timeout(Some(timeout.max(Duration::from_micros(100))))?;
        let mut buf = vec![0u8; MAX_DATAGRAM];
        match self.socket.recv_from(&mut buf) {
            Ok((n, from)) => {
                buf.truncate(n);
                Ok(Some((buf, from)))
            }
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                Ok(None)
            }
            // A previous send to a closed port surfaces here on some platforms.
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Latency {
    Fixed { ms: f64 },
    Uniform { lo_ms: f64, hi_ms: f64 },
}

/// Impairment applied to frames leaving one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub latency: Latency,
    pub loss: f64,
    pub seed: u64,
}

impl LinkModel {
    pub fn fixed(ms: f64) -> Self {
        LinkModel {
            latency: Latency::Fixed { ms },
            loss: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |m: String| Err(RuntimeError::InvalidLink(m));
        if !(0.0..1.0).contains(&self.loss) {
            return bad(format!("loss {} outside [0, 1)", self.loss));
        }
        match self.latency {
            Latency::Fixed { ms } if !(ms >= 0.0 && ms.is_finite()) => {
                bad(format!("latency {ms} ms"))
            }
            Latency::Uniform { lo_ms, hi_ms }
                if !(lo_ms >= 0.0 && hi_ms >= lo_ms && hi_ms.is_finite()) =>
            {
                bad(format!("latency range [{lo_ms}, {hi_ms}] ms"))
            }
            _ => Ok(()),
        }
    }
}

struct Scheduled {
    due: Instant,
    seq: u64,
    bytes: Vec<u8>,
    to: SocketAddr,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due, self.seq).cmp(&(other.due, other.seq))
    }
}

/// A transport whose outgoing frames are delayed and dropped per a
/// [`LinkModel`]. Delayed frames are released by a background thread.
pub struct LinkTransport<T: Transport + 'static> {
    inner: Arc<T>,
    model: LinkModel,
    rng: std::sync::Mutex<(ChaCha8Rng, u64)>,
    queue: Option<Sender<Scheduled>>,
    worker: Option<thread::JoinHandle<()>>,
}

pub fn with_link_model<T: Transport + 'static>(
    inner: T,
    model: LinkModel,
) -> Result<LinkTransport<T>, RuntimeError> {
    model.validate()?;
    let inner = Arc::new(inner);
    let (tx, rx) = crossbeam_channel::unbounded();
    let sender = Arc::clone(&inner);
    let worker = thread::Builder::new()
        .name("link-delay".into())
        .spawn(move || release_loop(sender, rx))
        .map_err(RuntimeError::Io)?;
    Ok(LinkTransport {
        inner,
        model,
        rng: std::sync::Mutex::new((ChaCha8Rng::seed_from_u64(model.seed), 0)),
        queue: Some(tx),
        worker: Some(worker),
    })
}

fn release_loop<T: Transport>(inner: Arc<T>, rx: Receiver<Scheduled>) {
    let mut heap: BinaryHeap<Reverse<Scheduled>> = BinaryHeap::new();
    loop {
        let now = Instant::now();
        while heap.peek().is_some_and(|Reverse(s)| s.due <= now) {
            let Reverse(s) = heap.pop().expect("peeked");
            if let Err(e) = inner.send_to(&s.bytes, s.to) {
                log::warn!("delayed send to {} failed: {e}", s.to);
            }
        }
        let next = match heap.peek() {
            Some(Reverse(s)) => rx.recv_timeout(s.due.saturating_duration_since(now)),
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        match next {
            Ok(s) => heap.push(Reverse(s)),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => {
                // Flush what is still in flight, on schedule.
                while let Some(Reverse(s)) = heap.pop() {
                    thread::sleep(s.due.saturating_duration_since(Instant::now()));
                    let _ = inner.send_to(&s.bytes, s.to);
                }
                return;
            }
        }
    }
}

impl<T: Transport + 'static> Transport for LinkTransport<T> {
    fn send_to(&self, bytes: &[u8], to: SocketAddr) -> io::Result<()> {
        let (drop, delay, seq) = {
            let mut g = self.rng.lock().expect("rng lock");
            let (rng, seq) = &mut *g;
            *seq += 1;
            let drop = self.model.loss > 0.0 && rng.gen::<f64>() < self.model.loss;
            let delay_ms = match self.model.latency {
                Latency::Fixed { ms } => ms,
                Latency::Uniform { lo_ms, hi_ms } if hi_ms > lo_ms => rng.gen_range(lo_ms..hi_ms),
                Latency::Uniform { lo_ms, .. } => lo_ms,
            };
            (drop, Duration::from_secs_f64(delay_ms / 1e3), *seq)
        };
        if drop {
            return Ok(());
        }
        if delay.is_zero() {
            return self.inner.send_to(bytes, to);
        }
        let item = Scheduled {
            due: Instant::now() + delay,
            seq,
            bytes: bytes.to_vec(),
            to,
        };
        self.queue
            .as_ref()
            .expect("queue lives until drop")
            .send(item)
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "link worker stopped"))
    }

    fn recv_from(&self, timeout: Duration) -> io::Result<Option<(Vec<u8>, SocketAddr)>> {
        self.inner.recv_from(timeout)
    }

    fn local_addr(&self) -> io::Result<SocketAddr> {
        self.inner.local_addr()
    }
}

impl<T: Transport + 'static> Drop for LinkTransport<T> {
    fn drop(&mut self) {
        self.queue.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loopback() -> UdpTransport {
        UdpTransport::bind("127.0.0.1:0".parse().unwrap()).unwrap()
    }

    fn drain(t: &UdpTransport, wait: Duration) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        while let Some((b, _)) = t.recv_from(wait).unwrap() {
            out.push(b);
        }
        out
    }

    #[test]
    fn rejects_invalid_models() {
        let mut m = LinkModel::fixed(10.0);
        m.loss = 1.0;
        assert!(matches!(
            with_link_model(loopback(), m),
            Err(RuntimeError::InvalidLink(_))
        ));
        let m = LinkModel::fixed(-1.0);
        assert!(with_link_model(loopback(), m).is_err());
        let m = LinkModel {
            latency: Latency::Uniform {
                lo_ms: 5.0,
                hi_ms: 1.0,
            },
            loss: 0.0,
            seed: 0,
        };
        assert!(with_link_model(loopback(), m).is_err());
    }

    #[test]
    fn lossless_link_delivers_identical_stream() {
        let rx = loopback();
        let to = rx.local_addr().unwrap();
        let plain = loopback();
        let frames: Vec<Vec<u8>> = (0..20u8).map(|i| vec![i; 1 + i as usize]).collect();
        for f in &frames {
            plain.send_to(f, to).unwrap();
        }
        let direct = drain(&rx, Duration::from_millis(50));
        let link = with_link_model(loopback(), LinkModel::fixed(0.0)).unwrap();
        for f in &frames {
            link.send_to(f, to).unwrap();
        }
        assert_eq!(drain(&rx, Duration::from_millis(50)), direct);
        assert_eq!(direct, frames);
    }

    #[test]
    fn fixed_delay_is_applied() {
        let rx = loopback();
        let to = rx.local_addr().unwrap();
        let link = with_link_model(loopback(), LinkModel::fixed(80.0)).unwrap();
        let start = Instant::now();
        link.send_to(b"x", to).unwrap();
        let (b, _) = rx.recv_from(Duration::from_secs(2)).unwrap().unwrap();
        let elapsed = start.elapsed();
        assert_eq!(b, b"x");
        assert!(elapsed >= Duration::from_millis(80), "{elapsed:?}");
        assert!(elapsed < Duration::from_millis(300), "{elapsed:?}");
    }

    #[test]
    fn loss_is_seeded() {
        let model = LinkModel {
            latency: Latency::Fixed { ms: 0.0 },
            loss: 0.3,
            seed: 11,
        };
        let count = || {
            let rx = loopback();
            let to = rx.local_addr().unwrap();
            let link = with_link_model(loopback(), model).unwrap();
            for i in 0..200u8 {
                link.send_to(&[i], to).unwrap();
            }
            drain(&rx, Duration::from_millis(50))
        };
        let (a, b) = (count(), count());
        assert_eq!(a, b);
        assert!(a.len() > 100 && a.len() < 180, "{}", a.len());
    }
}
