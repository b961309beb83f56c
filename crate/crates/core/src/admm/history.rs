use std::io::{Read, Write};

use super::IterationRecord;

/// Writes the history with a header row:
/// `k,r_norm,s_norm,eps_pri,eps_dual,rho,objective,t_9a_ms,t_9b_ms,t_9c_ms,bytes_up,bytes_down,t_comm_ms`.
pub fn write_history_csv<W: Write>(history: &[IterationRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if history.is_empty() {
        w.write_record(HEADER)?;
    }
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv<R: Read>(input: R) -> csv::Result<Vec<IterationRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

const HEADER: [&str; 13] = [
    "k",
    "r_norm",
    "s_norm",
    "eps_pri",
    "eps_dual",
    "rho",
    "objective",
    "t_9a_ms",
    "t_9b_ms",
    "t_9c_ms",
    "bytes_up",
    "bytes_down",
    "t_comm_ms",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_header() {
        let rec = IterationRecord {
            k: 3,
            r_norm: 0.125,
            s_norm: 1.0 / 3.0,
            eps_pri: 1e-3,
            eps_dual: 2e-3,
            rho: 4.0,
            objective: 27.038805,
            t_9a_ms: 1.5,
            t_9b_ms: 0.25,
            t_9c_ms: 0.001,
            bytes_up: 824,
            bytes_down: 412,
            t_comm_ms: 0.0,
        };
        let mut buf = Vec::new();
        write_history_csv(std::slice::from_ref(&rec), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&HEADER.join(",")));
        assert_eq!(read_history_csv(&buf[..]).unwrap(), vec![rec]);

        let mut empty = Vec::new();
        write_history_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim(), HEADER.join(","));
    }
}
