//! Binary framing of aggregator/agent messages.
//!
//! Layout, little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 1    | version                                 |
//! | 1      | 1    | kind                                    |
//! | 2      | 2    | agent id                                |
//! | 4      | 8    | run id                                  |
//! | 12     | 4    | iteration                               |
//! | 16     | 2    | payload value count `n`                 |
//! | 18     | 2    | aux (kind specific)                     |
//! | 20     | 4n   | payload, `f32`                          |
//! | 20+4n  | 4    | CRC-32 (IEEE) of bytes `0..20+4n`       |

use std::time::Duration;

use thiserror::Error;

pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
pub const CRC_LEN: usize = 4;
/// Largest payload accepted, in values.
pub const MAX_VALUES: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    /// Agent registers with the aggregator.
    Hello = 1,
    /// Aggregator confirms a registration and announces the run id.
    Assign = 2,
    /// `[rho, lambda[T], p_hat[T]]` for one prosumer.
    Targets = 3,
    /// `p[T]`; aux carries the solve time in 100 us units.
    Profile = 4,
    /// End of run, sent by the aggregator and echoed by the agent.
    Done = 5,
    /// Agent-side solver failure at the given iteration.
    Error = 6,
}

impl Kind {
    fn from_u8(b: u8) -> Option<Kind> {
        Some(match b {
            1 => Kind::Hello,
            2 => Kind::Assign,
            3 => Kind::Targets,
            4 => Kind::Profile,
            5 => Kind::Done,
            6 => Kind::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("frame too short ({0} bytes)")]
    Truncated(usize),
    #[error("frame length {got} does not match header ({expected})")]
    Length { expected: usize, got: usize },
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown kind {0}")]
    UnknownKind(u8),
    #[error("checksum mismatch")]
    Checksum,
    #[error("payload of {0} values exceeds the limit")]
    Oversize(usize),
    #[error("payload of {count} values invalid for {kind:?}")]
    Payload { kind: Kind, count: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: Kind,
    pub agent_id: u16,
    pub run_id: u64,
    pub iteration: u32,
    pub aux: u16,
    pub payload: Vec<f32>,
}

impl Frame {
    pub fn control(kind: Kind, run_id: u64, agent_id: u16, iteration: u32) -> Frame {
        Frame {
            kind,
            agent_id,
            run_id,
            iteration,
            aux: 0,
            payload: Vec::new(),
        }
    }

    pub fn targets(
        run_id: u64,
        agent_id: u16,
        k: u32,
        rho: f64,
        lambda: &[f64],
        p_hat: &[f64],
    ) -> Frame {
        let payload = std::iter::once(rho)
            .chain(lambda.iter().copied())
            .chain(p_hat.iter().copied())
            .map(|v| v as f32)
            .collect();
        Frame {
            kind: Kind::Targets,
            agent_id,
            run_id,
            iteration: k,
            aux: 0,
            payload,
        }
    }

    /// `(rho, lambda, p_hat)` of a TARGETS frame.
    pub fn as_targets(&self) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        if self.kind != Kind::Targets || self.payload.len().is_multiple_of(2) {
            return None;
        }
        let t = self.payload.len() / 2;
        let v: Vec<f64> = self.payload.iter().map(|&x| x as f64).collect();
        Some((v[0], v[1..=t].to_vec(), v[t + 1..].to_vec()))
    }

    pub fn profile(run_id: u64, agent_id: u16, k: u32, p: &[f64], solve_time: Duration) -> Frame {
        Frame {
            kind: Kind::Profile,
            agent_id,
            run_id,
            iteration: k,
            aux: encode_duration(solve_time),
            payload: p.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.payload.iter().map(|&x| x as f64).collect()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 4 * self.payload.len() + CRC_LEN
    }

    fn check_payload(&self) -> Result<(), WireError> {
        let n = self.payload.len();
        if n > MAX_VALUES {
            return Err(WireError::Oversize(n));
        }
        let ok = match self.kind {
            Kind::Targets => n >= 3 && n % 2 == 1,
            Kind::Profile => n >= 1,
            Kind::Hello | Kind::Assign | Kind::Done | Kind::Error => n == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(WireError::Payload {
                kind: self.kind,
                count: n,
            })
        }
    }
}

/// Solve time in the PROFILE aux field, 100 us units, saturating.
pub fn encode_duration(d: Duration) -> u16 {
    (d.as_micros() / 100).min(u16::MAX as u128) as u16
}

pub fn decode_duration(aux: u16) -> Duration {
    Duration::from_micros(aux as u64 * 100)
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, WireError> {
    frame.check_payload()?;
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.push(WIRE_VERSION);
    out.push(frame.kind as u8);
    out.extend_from_slice(&frame.agent_id.to_le_bytes());
    out.extend_from_slice(&frame.run_id.to_le_bytes());
    out.extend_from_slice(&frame.iteration.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u16).to_le_bytes());
    out.extend_from_slice(&frame.aux.to_le_bytes());
    for v in &frame.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(WireError::Truncated(bytes.len()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let count = u16_at(16) as usize;
    let expected = HEADER_LEN + 4 * count + CRC_LEN;
    if bytes.len() != expected {
        return Err(WireError::Length {
            expected,
            got: bytes.len(),
        });
    }
    let body = &bytes[..expected - CRC_LEN];
    let crc = u32::from_le_bytes(bytes[expected - CRC_LEN..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != crc {
        return Err(WireError::Checksum);
    }
    if bytes[0] != WIRE_VERSION {
        return Err(WireError::Version(bytes[0]));
    }
    let kind = Kind::from_u8(bytes[1]).ok_or(WireError::UnknownKind(bytes[1]))?;
    let payload = body[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let frame = Frame {
        kind,
        agent_id: u16_at(2),
        run_id: u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")),
        iteration: u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")),
        aux: u16_at(18),
        payload,
    };
    frame.check_payload()?;
    Ok(frame)
}
