//! Framed party-to-party channel and the per-protocol round/byte meter.
//!
//! Wire format of a frame, all little-endian:
//!
//! ```text
//! session_id u64 | protocol_tag u16 | round_index u32 | len u32 | payload[len]
//! ```
//!
//! Round accounting: a symmetric [`Session::exchange`] is one round for both
//! parties; a one-directional flight ([`Session::send_only`] /
//! [`Session::recv_only`]) is one round on each side.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use serde::Serialize;

use crate::error::{Error, Result};

pub const FRAME_HEADER_BYTES: usize = 8 + 2 + 4 + 4;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub session_id: u64,
    pub protocol_tag: u16,
    pub round_index: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + self.payload.len());
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&self.protocol_tag.to_le_bytes());
        out.extend_from_slice(&self.round_index.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < FRAME_HEADER_BYTES {
            return Err(Error::ProtocolViolation("short frame".into()));
        }
        let (session_id, protocol_tag, round_index, len) = parse_header(&bytes[..FRAME_HEADER_BYTES]);
        let payload = &bytes[FRAME_HEADER_BYTES..];
        if payload.len() != len as usize {
            return Err(Error::ProtocolViolation(format!(
                "length prefix {} but payload has {} bytes",
                len,
                payload.len()
            )));
        }
        Ok(Frame {
            session_id,
            protocol_tag,
            round_index,
            payload: payload.to_vec(),
        })
    }

    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_BYTES + self.payload.len()
    }
}

fn parse_header(h: &[u8]) -> (u64, u16, u32, u32) {
    (
        u64::from_le_bytes(h[0..8].try_into().unwrap()),
        u16::from_le_bytes(h[8..10].try_into().unwrap()),
        u32::from_le_bytes(h[10..14].try_into().unwrap()),
        u32::from_le_bytes(h[14..18].try_into().unwrap()),
    )
}

pub trait Channel: Send {
    fn send(&mut self, frame: &Frame) -> Result<()>;
    fn recv(&mut self) -> Result<Frame>;
}

/// Paired FIFO queues between two threads of one process.
pub struct InProcChannel {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

impl InProcChannel {
    pub fn pair(timeout: Duration) -> (InProcChannel, InProcChannel) {
        let (tx_a, rx_a) = crossbeam_channel::unbounded();
        let (tx_b, rx_b) = crossbeam_channel::unbounded();
        (
            InProcChannel {
                tx: tx_a,
                rx: rx_b,
                timeout,
            },
            InProcChannel {
                tx: tx_b,
                rx: rx_a,
                timeout,
            },
        )
    }
}

impl Channel for InProcChannel {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.tx.send(frame.encode()).map_err(|_| Error::PeerClosed)
    }

    fn recv(&mut self) -> Result<Frame> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(bytes) => Frame::decode(&bytes),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(Error::PeerClosed),
        }
    }
}

/// Plain TCP stream carrying the same frames.
pub struct TcpChannel {
    stream: TcpStream,
}

impl TcpChannel {
    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<TcpChannel> {
        let stream = TcpStream::connect(addr)?;
        Self::from_stream(stream, timeout)
    }

    pub fn accept(listener: &TcpListener, timeout: Duration) -> Result<TcpChannel> {
        let (stream, _) = listener.accept()?;
        Self::from_stream(stream, timeout)
    }

    fn from_stream(stream: TcpStream, timeout: Duration) -> Result<TcpChannel> {
        stream.set_read_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(TcpChannel { stream })
    }
}

fn map_io(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => Error::Timeout,
        std::io::ErrorKind::UnexpectedEof
        | std::io::ErrorKind::ConnectionReset
        | std::io::ErrorKind::BrokenPipe => Error::PeerClosed,
        _ => Error::Io(e),
    }
}

impl Channel for TcpChannel {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.stream.write_all(&frame.encode()).map_err(map_io)
    }

    fn recv(&mut self) -> Result<Frame> {
        let mut header = [0u8; FRAME_HEADER_BYTES];
        self.stream.read_exact(&mut header).map_err(map_io)?;
        let (session_id, protocol_tag, round_index, len) = parse_header(&header);
        let mut payload = vec![0u8; len as usize];
        self.stream.read_exact(&mut payload).map_err(map_io)?;
        Ok(Frame {
            session_id,
            protocol_tag,
            round_index,
            payload,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MeterEntry {
    pub rounds: u64,
    pub bytes: u64,
}

impl MeterEntry {
    /// Bytes expressed in `l`-bit carrier words, `l = CARRIER_WORD_BITS`.
    pub fn words(&self) -> f64 {
        (self.bytes * 8) as f64 / CARRIER_WORD_BITS as f64
    }
}

/// Rounds and bytes sent, keyed by (stage, protocol tag).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionMeter {
    entries: BTreeMap<(String, u16), MeterEntry>,
}

/// Bit width used when expressing byte counts in carrier words.
pub const CARRIER_WORD_BITS: u64 = 64;

impl SessionMeter {
    fn record(&mut self, stage: &str, tag: u16, rounds: u64, bytes: u64) {
        let e = self.entries.entry((stage.to_string(), tag)).or_default();
        e.rounds += rounds;
        e.bytes += bytes;
    }

    pub fn total(&self) -> MeterEntry {
        self.entries.values().fold(MeterEntry::default(), |a, e| MeterEntry {
            rounds: a.rounds + e.rounds,
            bytes: a.bytes + e.bytes,
        })
    }

    pub fn by_tag(&self, tag: u16) -> MeterEntry {
        self.entries
            .iter()
            .filter(|((_, t), _)| *t == tag)
            .fold(MeterEntry::default(), |a, (_, e)| MeterEntry {
                rounds: a.rounds + e.rounds,
                bytes: a.bytes + e.bytes,
            })
    }

    pub fn by_stage(&self, stage: &str) -> MeterEntry {
        self.entries
            .iter()
            .filter(|((s, _), _)| s == stage)
            .fold(MeterEntry::default(), |a, (_, e)| MeterEntry {
                rounds: a.rounds + e.rounds,
                bytes: a.bytes + e.bytes,
            })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u16, MeterEntry)> {
        self.entries.iter().map(|((s, t), e)| (s.as_str(), *t, *e))
    }

    pub fn merge(&mut self, other: &SessionMeter) {
        for (s, t, e) in other.entries() {
            self.record(s, t, e.rounds, e.bytes);
        }
    }

    /// Parse the output of [`SessionMeter::to_csv`].
    pub fn from_csv(text: &str) -> Result<SessionMeter> {
        let mut m = SessionMeter::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("meter.csv line {}", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let tag = f[1].parse().map_err(|_| bad())?;
            let rounds = f[2].parse().map_err(|_| bad())?;
            let bytes = f[3].parse().map_err(|_| bad())?;
            m.record(f[0], tag, rounds, bytes);
        }
        Ok(m)
    }

    /// `stage,protocol_tag,rounds,bytes` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,protocol_tag,rounds,bytes\n");
        for (s, t, e) in self.entries() {
            out.push_str(&format!("{s},{t},{},{}\n", e.rounds, e.bytes));
        }
        out
    }
}

/// One party's end of a session.
pub struct Session {
    session_id: u64,
    channel: Box<dyn Channel>,
    round: u32,
    tags: Vec<u16>,
    stage: String,
    meter: SessionMeter,
    transcript: Option<Vec<u8>>,
}

impl Session {
    pub fn new(session_id: u64, channel: Box<dyn Channel>) -> Session {
        Session {
            session_id,
            channel,
            round: 0,
            tags: Vec::new(),
            stage: "default".into(),
            meter: SessionMeter::default(),
            transcript: None,
        }
    }

    pub fn pair_in_process(session_id: u64) -> (Session, Session) {
        let (a, b) = InProcChannel::pair(DEFAULT_TIMEOUT);
        (
            Session::new(session_id, Box::new(a)),
            Session::new(session_id, Box::new(b)),
        )
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn meter(&self) -> &SessionMeter {
        &self.meter
    }

    pub fn take_meter(&mut self) -> SessionMeter {
        std::mem::take(&mut self.meter)
    }

    pub fn rounds_so_far(&self) -> u32 {
        self.round
    }

    pub fn set_stage(&mut self, stage: &str) {
        self.stage = stage.to_string();
    }

    pub fn stage(&self) -> &str {
        &self.stage
    }

    /// Keep a copy of every byte this party sends.
    pub fn record_transcript(&mut self) {
        self.transcript = Some(Vec::new());
    }

    pub fn transcript(&self) -> Option<&[u8]> {
        self.transcript.as_deref()
    }

    /// Enter a protocol. Frames are attributed to the outermost active tag.
    pub fn push_tag(&mut self, tag: u16) {
        self.tags.push(tag);
    }

    pub fn pop_tag(&mut self) {
        self.tags.pop();
    }

    pub fn current_tag(&self) -> u16 {
        self.tags.first().copied().unwrap_or(0)
    }

    fn outgoing(&mut self, payload: Vec<u8>) -> Result<()> {
        let frame = Frame {
            session_id: self.session_id,
            protocol_tag: self.current_tag(),
            round_index: self.round,
            payload,
        };
        let tag = frame.protocol_tag;
        let stage = self.stage.clone();
        self.meter.record(&stage, tag, 0, frame.wire_len() as u64);
        if let Some(t) = self.transcript.as_mut() {
            t.extend_from_slice(&frame.encode());
        }
        self.channel.send(&frame)
    }

    fn incoming(&mut self) -> Result<Vec<u8>> {
        let frame = self.channel.recv()?;
        if frame.session_id != self.session_id {
            return Err(Error::ProtocolViolation(format!(
                "frame for session {} on session {}",
                frame.session_id, self.session_id
            )));
        }
        if frame.round_index != self.round {
            return Err(Error::ProtocolViolation(format!(
                "expected round {} but got {}",
                self.round, frame.round_index
            )));
        }
        if frame.protocol_tag != self.current_tag() {
            return Err(Error::ProtocolViolation(format!(
                "expected protocol {} but got {}",
                self.current_tag(),
                frame.protocol_tag
            )));
        }
        Ok(frame.payload)
    }

    fn count_round(&mut self) {
        let tag = self.current_tag();
        let stage = self.stage.clone();
        self.meter.record(&stage, tag, 1, 0);
        self.round += 1;
    }

    /// Symmetric swap: both parties send, then both receive. One round.
    pub fn exchange(&mut self, payload: Vec<u8>) -> Result<Vec<u8>> {
        self.outgoing(payload)?;
        let got = self.incoming()?;
        self.count_round();
        Ok(got)
    }

    /// One-directional flight, sending side.
    pub fn send_only(&mut self, payload: Vec<u8>) -> Result<()> {
        self.outgoing(payload)?;
        self.count_round();
        Ok(())
    }

    /// One-directional flight, receiving side.
    pub fn recv_only(&mut self) -> Result<Vec<u8>> {
        let got = self.incoming()?;
        self.count_round();
        Ok(got)
    }
}

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::ProtocolViolation("payload is not a whole number of f64".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn frame_round_trip_and_length_check() {
        let f = Frame {
            session_id: 7,
            protocol_tag: 3,
            round_index: 9,
            payload: vec![1, 2, 3],
        };
        let bytes = f.encode();
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Frame::decode(&bad), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn echo_round_trip() {
        let (mut a, mut b) = Session::pair_in_process(1);
        let h = thread::spawn(move || {
            let p = b.recv_only().unwrap();
            b.send_only(p).unwrap();
        });
        a.send_only(b"hello".to_vec()).unwrap();
        assert_eq!(a.recv_only().unwrap(), b"hello");
        h.join().unwrap();
    }

    #[test]
    fn out_of_order_round_is_a_violation() {
        let (mut ca, cb) = InProcChannel::pair(DEFAULT_TIMEOUT);
        let mut b = Session::new(1, Box::new(cb));
        ca.send(&Frame {
            session_id: 1,
            protocol_tag: 0,
            round_index: 5,
            payload: vec![],
        })
        .unwrap();
        assert!(matches!(b.recv_only(), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn closed_peer_and_timeout() {
        let (ca, cb) = InProcChannel::pair(Duration::from_millis(20));
        let mut b = Session::new(1, Box::new(cb));
        assert!(matches!(b.recv_only(), Err(Error::Timeout)));
        drop(ca);
        assert!(matches!(b.recv_only(), Err(Error::PeerClosed)));
    }

    #[test]
    fn exchange_counts_one_round() {
        let (mut a, mut b) = Session::pair_in_process(2);
        let h = thread::spawn(move || {
            let got = b.exchange(b"x".to_vec()).unwrap();
            assert_eq!(got, b"x");
            let got = b.exchange(Vec::new()).unwrap();
            assert!(got.is_empty());
            b.take_meter()
        });
        assert_eq!(a.exchange(b"x".to_vec()).unwrap(), b"x");
        assert_eq!(a.meter().total().rounds, 1);
        assert_eq!(a.meter().total().bytes, (FRAME_HEADER_BYTES + 1) as u64);
        a.exchange(Vec::new()).unwrap();
        assert_eq!(a.meter().total().rounds, 2);
        assert_eq!(a.meter().total().bytes, (2 * FRAME_HEADER_BYTES + 1) as u64);
        let mb = h.join().unwrap();
        assert_eq!(&mb, a.meter());
    }

    #[test]
    fn meter_bytes_match_payload_sum() {
        let (mut a, mut b) = Session::pair_in_process(3);
        let lens: Vec<usize> = (0..10_000).map(|i| (i * 7919) % 61).collect();
        let l2 = lens.clone();
        let h = thread::spawn(move || {
            for n in l2 {
                b.recv_only().unwrap();
                let _ = n;
            }
        });
        for &n in &lens {
            a.send_only(vec![0u8; n]).unwrap();
        }
        h.join().unwrap();
        let want: usize = lens.iter().map(|n| n + FRAME_HEADER_BYTES).sum();
        assert_eq!(a.meter().total().bytes, want as u64);
        assert_eq!(a.meter().total().rounds, 10_000);
    }

    #[test]
    fn words_count_carrier_values() {
        let e = MeterEntry { rounds: 1, bytes: 80 };
        assert_eq!(e.words(), 10.0);
    }

    #[test]
    fn tcp_and_in_process_transcripts_match() {
        fn drive(s: &mut Session, first: bool) {
            s.record_transcript();
            s.push_tag(4);
            for i in 0..20u32 {
                let p = encode_f64s(&[i as f64, if first { 1.0 } else { 2.0 }]);
                s.exchange(p).unwrap();
            }
            s.pop_tag();
        }
        let (mut a, mut b) = Session::pair_in_process(9);
        let h = thread::spawn(move || {
            drive(&mut b, false);
            b.transcript().unwrap().to_vec()
        });
        drive(&mut a, true);
        let ta = a.transcript().unwrap().to_vec();
        let tb = h.join().unwrap();

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = thread::spawn(move || {
            let ch = TcpChannel::accept(&listener, DEFAULT_TIMEOUT).unwrap();
            let mut s = Session::new(9, Box::new(ch));
            drive(&mut s, false);
            s.transcript().unwrap().to_vec()
        });
        let ch = TcpChannel::connect(addr, DEFAULT_TIMEOUT).unwrap();
        let mut s = Session::new(9, Box::new(ch));
        drive(&mut s, true);
        assert_eq!(s.transcript().unwrap(), &ta[..]);
        assert_eq!(h.join().unwrap(), tb);
    }
}
