//! Trace serialization.
//!
//! Binary framing, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "SADT"
//! version u8       1
//! nodes   u32
//! rounds  u64
//! then rounds * nodes records of 14 bytes, round-major:
//!   action   u8   0 = listen, 1 = transmit
//!   obs      u8   0 = idle, 1 = busy, 2 = sent, 3 = received
//!   sender   u32  sender id when obs = 3, else 0
//!   noise    f64  ADV(v)
//! ```
//!
//! The trace hash is SHA-256 over exactly these bytes.

use std::io::{self, Write};

use sha2::{Digest, Sha256};

use crate::engine::{RoundObserver, RoundRecord, StoredRound, Trace};
use crate::error::DecodeError;
use crate::protocol::Action;
use crate::sinr::Observation;
use crate::NodeId;

pub const MAGIC: &[u8; 4] = b"SADT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;
pub const RECORD_LEN: usize = 14;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn header(nodes: usize, rounds: u64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(MAGIC);
    h[4] = VERSION;
    h[5..9].copy_from_slice(&(nodes as u32).to_le_bytes());
    h[9..17].copy_from_slice(&rounds.to_le_bytes());
    h
}

fn encode_round(buf: &mut Vec<u8>, actions: &[Action], observations: &[Observation], noise: &[f64]) {
    for ((a, o), x) in actions.iter().zip(observations).zip(noise) {
        buf.push(match a {
            Action::Listen => 0,
            Action::Transmit => 1,
        });
        let (tag, sender) = match o {
            Observation::Idle => (0u8, 0u32),
            Observation::Busy => (1, 0),
            Observation::Sent => (2, 0),
            Observation::Received(u) => (3, u.0),
        };
        buf.push(tag);
        buf.extend_from_slice(&sender.to_le_bytes());
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_trace(trace: &Trace) -> Vec<u8> {
    let n = trace.nodes();
    let mut buf = Vec::with_capacity(HEADER_LEN + trace.records.len() * n * RECORD_LEN);
    buf.extend_from_slice(&header(n, trace.records.len() as u64));
    for r in &trace.records {
        encode_round(&mut buf, &r.actions, &r.observations, &r.noise);
    }
    buf
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTrace {
    pub nodes: usize,
    pub records: Vec<StoredRound>,
}

/// Decodes and validates a binary trace. Never allocates more than the
/// input length justifies.
pub fn decode_trace(bytes: &[u8]) -> Result<DecodedTrace, DecodeError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(DecodeError::BadMagic);
        }
        return Err(DecodeError::Truncated { need: HEADER_LEN, have: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(DecodeError::Version(bytes[4]));
    }
    let nodes = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let rounds = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
    if nodes == 0 {
        return Err(DecodeError::Header("zero nodes".into()));
    }
    let body = &bytes[HEADER_LEN..];
    let need = usize::try_from(rounds)
        .ok()
        .and_then(|r| r.checked_mul(nodes))
        .and_then(|c| c.checked_mul(RECORD_LEN))
        .ok_or_else(|| DecodeError::Header("record count overflows".into()))?;
    if body.len() < need {
        return Err(DecodeError::Truncated { need: HEADER_LEN + need, have: bytes.len() });
    }
    if body.len() > need {
        return Err(DecodeError::Trailing(body.len() - need));
    }

    let mut records = Vec::with_capacity(rounds as usize);
    for (round, chunk) in body.chunks_exact(nodes * RECORD_LEN).enumerate() {
        let mut actions = Vec::with_capacity(nodes);
        let mut observations = Vec::with_capacity(nodes);
        let mut noise = Vec::with_capacity(nodes);
        for (node, rec) in chunk.chunks_exact(RECORD_LEN).enumerate() {
            let bad = |message: String| DecodeError::Record { round, node, message };
            let action = match rec[0] {
                0 => Action::Listen,
                1 => Action::Transmit,
                other => return Err(bad(format!("action byte {other}"))),
            };
            let sender = u32::from_le_bytes(rec[2..6].try_into().unwrap());
            let obs = match (rec[1], sender) {
                (0, 0) => Observation::Idle,
                (1, 0) => Observation::Busy,
                (2, 0) => Observation::Sent,
                (3, s) if (s as usize) < nodes && s as usize != node => Observation::Received(NodeId(s)),
                (3, s) => return Err(bad(format!("sender {s} invalid"))),
                (tag, s) => return Err(bad(format!("observation tag {tag} with sender {s}"))),
            };
            if (action == Action::Transmit) != (obs == Observation::Sent) {
                return Err(bad("a node observes `sent` iff it transmits".into()));
            }
            let level = f64::from_le_bytes(rec[6..14].try_into().unwrap());
            if !(level.is_finite() && level >= 0.0) {
                return Err(bad(format!("noise {level}")));
            }
            actions.push(action);
            observations.push(obs);
            noise.push(level);
        }
        records.push(StoredRound { actions, observations, noise });
    }
    Ok(DecodedTrace { nodes, records })
}

/// Streams the binary encoding into SHA-256.
pub struct TraceHasher {
    digest: Sha256,
    buf: Vec<u8>,
}

impl TraceHasher {
    pub fn new(nodes: usize, rounds: u64) -> Self {
        let mut digest = Sha256::new();
        digest.update(header(nodes, rounds));
        Self { digest, buf: Vec::with_capacity(nodes * RECORD_LEN) }
    }

    pub fn finish(self) -> [u8; 32] {
        self.digest.finalize().into()
    }
}

impl RoundObserver for TraceHasher {
    fn on_round(&mut self, r: &RoundRecord<'_>) {
        self.buf.clear();
        encode_round(&mut self.buf, r.actions, r.observations, r.noise);
        self.digest.update(&self.buf);
    }
}

pub fn trace_hash(trace: &Trace) -> String {
    hex(&Sha256::digest(encode_trace(trace)))
}

/// SHA-256 over the noise levels alone, for checking that paired runs saw
/// the same jam schedule.
#[derive(Default)]
pub struct NoiseHasher {
    digest: Sha256,
}

impl NoiseHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> [u8; 32] {
        self.digest.finalize().into()
    }
}

impl RoundObserver for NoiseHasher {
    fn on_round(&mut self, r: &RoundRecord<'_>) {
        for x in r.noise {
            self.digest.update(x.to_le_bytes());
        }
    }
}

fn observation_label(o: &Observation) -> String {
    match o {
        Observation::Idle => "idle".into(),
        Observation::Busy => "busy".into(),
        Observation::Sent => "sent".into(),
        Observation::Received(u) => format!("received:{u}"),
    }
}

/// Writes `round,node,action,observation,noise` rows.
pub fn write_trace_csv<W: Write>(trace: &Trace, mut out: W) -> io::Result<()> {
    writeln!(out, "round,node,action,observation,noise")?;
    for (round, r) in trace.records.iter().enumerate() {
        for (v, ((a, o), x)) in r.actions.iter().zip(&r.observations).zip(&r.noise).enumerate() {
            let action = match a {
                Action::Listen => "listen",
                Action::Transmit => "transmit",
            };
            writeln!(out, "{round},{v},{action},{},{x}", observation_label(o))?;
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, JammerKind, SimConfig, TopologySpec};
    use proptest::prelude::*;

    fn small_trace() -> Trace {
        run(&SimConfig {
            topology: TopologySpec::Uniform { n: 12, width: 4.0, height: 4.0 },
            rounds: 40,
            ..SimConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn binary_round_trip_and_hash() {
        let trace = small_trace();
        let bytes = encode_trace(&trace);
        assert_eq!(bytes.len(), HEADER_LEN + 40 * 12 * RECORD_LEN);
        let decoded = decode_trace(&bytes).unwrap();
        assert_eq!(decoded.nodes, 12);
        assert_eq!(decoded.records, trace.records);
        // The streaming hash inside the engine matches the offline one.
        assert_eq!(trace_hash(&trace), trace.summary.trace_hash);
    }

    #[test]
    fn decode_rejects_damage() {
        let bytes = encode_trace(&small_trace());
        assert!(matches!(decode_trace(b"XXXX"), Err(DecodeError::BadMagic)));
        assert!(matches!(decode_trace(&bytes[..10]), Err(DecodeError::Truncated { .. })));
        assert!(matches!(decode_trace(&bytes[..bytes.len() - 1]), Err(DecodeError::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_trace(&extra), Err(DecodeError::Trailing(1))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_trace(&v), Err(DecodeError::Version(9))));
        let mut a = bytes.clone();
        a[HEADER_LEN] = 7;
        assert!(matches!(decode_trace(&a), Err(DecodeError::Record { .. })));
        // Claim a colossal round count on a tiny body.
        let mut huge = bytes[..HEADER_LEN].to_vec();
        huge[9..17].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_trace(&huge).is_err());
    }

    #[test]
    fn jammed_trace_csv() {
        let cfg = SimConfig {
            topology: TopologySpec::Uniform { n: 3, width: 4.0, height: 4.0 },
            jammer: JammerKind::Bur,
            rounds: 2,
            ..SimConfig::default()
        };
        let trace = run(&cfg).unwrap();
        let mut out = Vec::new();
        write_trace_csv(&trace, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "round,node,action,observation,noise");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[1].ends_with(&format!(",{}", cfg.adversary.jam_level())));
    }

    proptest! {
        #[test]
        fn decode_never_panics(data in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode_trace(&data);
        }

        #[test]
        fn decode_inverts_encode(seed in 0u64..1000) {
            let trace = run(&SimConfig {
                topology: TopologySpec::Uniform { n: 5, width: 3.0, height: 3.0 },
                rounds: 10,
                seed,
                ..SimConfig::default()
            }).unwrap();
            let decoded = decode_trace(&encode_trace(&trace)).unwrap();
            prop_assert_eq!(decoded.records, trace.records);
        }
    }
}
