//! Tunnels a guest node's request/response traffic through a job network.
//!
//! Client side, the local guest server ([`Lgs`]) accepts node connections,
//! numbers each inbound body as a [`GuestMessage`] and later hands the
//! matching reply back. Server side, the local guest client ([`Lgc`]) feeds
//! each forwarded body to the guest link and wraps its reply. Bodies are
//! opaque here; nothing in this module parses them.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{frame_body, FrameReader, WireError};

/// Guest link target meaning "the link runs in the server worker".
pub const INPROC_TARGET: &str = "inproc";

const HEADER_LEN: usize = 17;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BridgeError {
    #[error("connection refused: job is not running")]
    Refused,
    #[error("unknown stream {0}")]
    UnknownStream(u64),
    #[error("stream {0} is closed")]
    StreamClosed(u64),
    #[error("stream {0} already has a request in flight")]
    Busy(u64),
    #[error("stream {stream}: expected seq {expected}, got {got}")]
    OutOfOrder { stream: u64, expected: u64, got: u64 },
    #[error("message travels the wrong way")]
    WrongDirection,
    #[error("malformed guest message: {0}")]
    Malformed(String),
    #[error("PeerFault: {0}")]
    PeerFault(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    ToLink,
    ToNode,
}

/// One guest-protocol message in transit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuestMessage {
    pub stream_id: u64,
    pub seq: u64,
    pub direction: Direction,
    pub body: Vec<u8>,
}

impl GuestMessage {
    /// `stream_id` (u64 BE), `seq` (u64 BE), direction byte (0 to link,
    /// 1 to node), then the body.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.extend_from_slice(&self.stream_id.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.push(match self.direction {
            Direction::ToLink => 0,
            Direction::ToNode => 1,
        });
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, BridgeError> {
        if bytes.len() < HEADER_LEN {
            return Err(BridgeError::Malformed(format!("{} byte header", bytes.len())));
        }
        let stream_id = u64::from_be_bytes(bytes[0..8].try_into().expect("8 bytes"));
        let seq = u64::from_be_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let direction = match bytes[16] {
            0 => Direction::ToLink,
            1 => Direction::ToNode,
            b => return Err(BridgeError::Malformed(format!("direction byte {b}"))),
        };
        if seq == 0 {
            return Err(BridgeError::Malformed("seq 0".into()));
        }
        Ok(GuestMessage { stream_id, seq, direction, body: bytes[HEADER_LEN..].to_vec() })
    }
}

/// What the guest link did with one request body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LinkOutcome {
    Reply(Vec<u8>),
    /// No reply (yet); the exchange stays open.
    Pending,
}

/// The server-side guest endpoint the LGC talks to.
pub trait GuestLinkService {
    fn handle(&mut self, stream_id: u64, body: &[u8]) -> LinkOutcome;
}

/// Replies with the request bytes.
#[derive(Debug, Default)]
pub struct EchoLink;

impl GuestLinkService for EchoLink {
    fn handle(&mut self, _stream_id: u64, body: &[u8]) -> LinkOutcome {
        LinkOutcome::Reply(body.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub t_ms: u64,
    pub stream_id: u64,
    pub seq: u64,
    pub direction: Direction,
    pub body_b64: String,
}

impl TranscriptEntry {
    fn new(t_ms: u64, msg: &GuestMessage) -> Self {
        TranscriptEntry {
            t_ms,
            stream_id: msg.stream_id,
            seq: msg.seq,
            direction: msg.direction,
            body_b64: base64::engine::general_purpose::STANDARD.encode(&msg.body),
        }
    }
}

pub fn write_transcript(path: &Path, entries: &[TranscriptEntry]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[derive(Debug)]
struct LgsStream {
    open: bool,
    next_seq: u64,
    in_flight: Option<u64>,
    replies: VecDeque<Vec<u8>>,
}

/// Local guest server: one per client worker, loopback only.
#[derive(Debug, Default)]
pub struct Lgs {
    running: bool,
    next_stream: u64,
    streams: BTreeMap<u64, LgsStream>,
    transcript: Vec<TranscriptEntry>,
    dropped: u64,
}

impl Lgs {
    pub fn new() -> Self {
        Lgs { next_stream: 1, ..Default::default() }
    }

    pub fn set_running(&mut self, running: bool) {
        self.running = running;
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    /// Accepts a node connection and returns its stream id.
    pub fn accept(&mut self) -> Result<u64, BridgeError> {
        if !self.running {
            return Err(BridgeError::Refused);
        }
        let id = self.next_stream;
        self.next_stream += 1;
        self.streams.insert(id, LgsStream { open: true, next_seq: 1, in_flight: None, replies: VecDeque::new() });
        Ok(id)
    }

    /// A complete body from the node becomes the next TO_LINK message.
    pub fn ingress(&mut self, now: u64, stream_id: u64, body: Vec<u8>) -> Result<GuestMessage, BridgeError> {
        if !self.running {
            return Err(BridgeError::Refused);
        }
        let s = self.streams.get_mut(&stream_id).ok_or(BridgeError::UnknownStream(stream_id))?;
        if !s.open {
            return Err(BridgeError::StreamClosed(stream_id));
        }
        if s.in_flight.is_some() {
            return Err(BridgeError::Busy(stream_id));
        }
        let seq = s.next_seq;
        s.next_seq += 1;
        s.in_flight = Some(seq);
        let msg = GuestMessage { stream_id, seq, direction: Direction::ToLink, body };
        self.transcript.push(TranscriptEntry::new(now, &msg));
        Ok(msg)
    }

    /// Hands a TO_NODE reply to its stream. Replies for closed streams are
    /// dropped and counted.
    pub fn deliver(&mut self, now: u64, msg: GuestMessage) -> Result<(), BridgeError> {
        if msg.direction != Direction::ToNode {
            return Err(BridgeError::WrongDirection);
        }
        let s = self.streams.get_mut(&msg.stream_id).ok_or(BridgeError::UnknownStream(msg.stream_id))?;
        if !s.open {
            self.dropped += 1;
            log::info!("reply for closed stream {} dropped", msg.stream_id);
            return Err(BridgeError::StreamClosed(msg.stream_id));
        }
        match s.in_flight {
            Some(seq) if seq == msg.seq => {}
            Some(seq) => return Err(BridgeError::OutOfOrder { stream: msg.stream_id, expected: seq, got: msg.seq }),
            None => return Err(BridgeError::OutOfOrder { stream: msg.stream_id, expected: s.next_seq, got: msg.seq }),
        }
        s.in_flight = None;
        self.transcript.push(TranscriptEntry::new(now, &msg));
        s.replies.push_back(msg.body);
        Ok(())
    }

    /// The next reply ready for the node on `stream_id`.
    pub fn take_reply(&mut self, stream_id: u64) -> Option<Vec<u8>> {
        self.streams.get_mut(&stream_id)?.replies.pop_front()
    }

    /// The node hung up; an in-flight reply will be dropped.
    pub fn close(&mut self, stream_id: u64) {
        if let Some(s) = self.streams.get_mut(&stream_id) {
            s.open = false;
            s.replies.clear();
        }
    }

    pub fn in_flight(&self, stream_id: u64) -> Option<u64> {
        self.streams.get(&stream_id).and_then(|s| s.in_flight)
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[derive(Debug, Default)]
struct LgcStream {
    last_seq: u64,
    pending: Option<u64>,
}

/// Local guest client inside the server worker: one logical connection to
/// the guest link per stream.
pub struct Lgc<S> {
    target: String,
    service: Option<S>,
    streams: BTreeMap<(String, u64), LgcStream>,
}

impl<S: GuestLinkService> Lgc<S> {
    /// Only [`INPROC_TARGET`] is reachable; any other target makes every
    /// forward fail with a peer fault.
    pub fn new(target: &str, service: S) -> Self {
        let service = (target == INPROC_TARGET).then_some(service);
        Lgc { target: target.to_string(), service, streams: BTreeMap::new() }
    }

    pub fn service(&self) -> Option<&S> {
        self.service.as_ref()
    }

    pub fn service_mut(&mut self) -> Option<&mut S> {
        self.service.as_mut()
    }

    /// Writes the body to the link; `Ok(None)` while the link withholds
    /// its reply. Stream ids are only unique per `peer` (the sending site).
    pub fn forward(&mut self, peer: &str, msg: &GuestMessage) -> Result<Option<GuestMessage>, BridgeError> {
        if msg.direction != Direction::ToLink {
            return Err(BridgeError::WrongDirection);
        }
        let Some(service) = self.service.as_mut() else {
            return Err(BridgeError::PeerFault(format!("guest link {:?} unreachable", self.target)));
        };
        let s = self.streams.entry((peer.to_string(), msg.stream_id)).or_default();
        if msg.seq != s.last_seq + 1 {
            return Err(BridgeError::OutOfOrder { stream: msg.stream_id, expected: s.last_seq + 1, got: msg.seq });
        }
        s.last_seq = msg.seq;
        match service.handle(msg.stream_id, &msg.body) {
            LinkOutcome::Reply(body) => {
                Ok(Some(GuestMessage { stream_id: msg.stream_id, seq: msg.seq, direction: Direction::ToNode, body }))
            }
            LinkOutcome::Pending => {
                s.pending = Some(msg.seq);
                Ok(None)
            }
        }
    }

    pub fn pending(&self) -> usize {
        self.streams.values().filter(|s| s.pending.is_some()).count()
    }
}

/// How a guest node reaches the LGS.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConnMode {
    /// Same process: whole bodies are handed over.
    InProc,
    /// Separate process: bodies are length-prefixed and the byte stream
    /// arrives in chunks of at most this many bytes.
    Stream(usize),
}

/// Byte pipe between a guest node and the LGS in [`ConnMode::Stream`].
/// Reassembles frames from arbitrarily split writes.
#[derive(Debug)]
pub struct StreamPipe {
    chunk: usize,
    reader: FrameReader,
}

impl StreamPipe {
    pub fn new(chunk: usize) -> Self {
        StreamPipe { chunk: chunk.max(1), reader: FrameReader::new() }
    }

    /// Sends `body` through the pipe and returns the bodies that came out
    /// the other end.
    pub fn transfer(&mut self, body: &[u8]) -> Result<Vec<Vec<u8>>, WireError> {
        let framed = frame_body(body)?;
        let mut out = Vec::new();
        for piece in framed.chunks(self.chunk) {
            self.reader.push(piece);
            while let Some(b) = self.reader.next_body()? {
                out.push(b);
            }
        }
        Ok(out)
    }

    /// Feeds raw bytes (possibly garbage) into the receiving end.
    pub fn push_raw(&mut self, bytes: &[u8]) -> Result<Vec<Vec<u8>>, WireError> {
        self.reader.push(bytes);
        let mut out = Vec::new();
        while let Some(b) = self.reader.next_body()? {
            out.push(b);
        }
        Ok(out)
    }
}

/// A guest node's connection to the LGS in either deployment mode.
#[derive(Debug)]
pub struct GuestConn {
    pub stream_id: u64,
    up: Option<StreamPipe>,
    down: Option<StreamPipe>,
}

impl GuestConn {
    pub fn open(lgs: &mut Lgs, mode: ConnMode) -> Result<Self, BridgeError> {
        let stream_id = lgs.accept()?;
        let (up, down) = match mode {
            ConnMode::InProc => (None, None),
            ConnMode::Stream(chunk) => (Some(StreamPipe::new(chunk)), Some(StreamPipe::new(chunk))),
        };
        Ok(GuestConn { stream_id, up, down })
    }

    /// Node → LGS. A broken frame resets the stream.
    pub fn send(&mut self, lgs: &mut Lgs, now: u64, body: &[u8]) -> Result<GuestMessage, BridgeError> {
        let body = match &mut self.up {
            None => body.to_vec(),
            Some(pipe) => match pipe.transfer(body) {
                Ok(mut bodies) if bodies.len() == 1 => bodies.pop().expect("one body"),
                Ok(_) => return Err(BridgeError::Malformed("partial frame".into())),
                Err(e) => {
                    lgs.close(self.stream_id);
                    return Err(BridgeError::Malformed(e.to_string()));
                }
            },
        };
        lgs.ingress(now, self.stream_id, body)
    }

    /// LGS → node: the next reply, if one is ready.
    pub fn recv(&mut self, lgs: &mut Lgs) -> Result<Option<Vec<u8>>, BridgeError> {
        let Some(body) = lgs.take_reply(self.stream_id) else {
            return Ok(None);
        };
        match &mut self.down {
            None => Ok(Some(body)),
            Some(pipe) => {
                let mut bodies = pipe.transfer(&body).map_err(|e| BridgeError::Malformed(e.to_string()))?;
                Ok(bodies.pop())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_codec() {
        let m = GuestMessage { stream_id: 7, seq: 1, direction: Direction::ToNode, body: b"abc".to_vec() };
        let bytes = m.encode();
        assert_eq!(&bytes[..17], &[0, 0, 0, 0, 0, 0, 0, 7, 0, 0, 0, 0, 0, 0, 0, 1, 1]);
        assert_eq!(GuestMessage::decode(&bytes).unwrap(), m);
        assert!(GuestMessage::decode(&bytes[..16]).is_err());
        let mut bad = bytes.clone();
        bad[16] = 2;
        assert!(GuestMessage::decode(&bad).is_err());
    }

    #[test]
    fn refused_until_running() {
        let mut lgs = Lgs::new();
        assert_eq!(lgs.accept(), Err(BridgeError::Refused));
        lgs.set_running(true);
        assert_eq!(lgs.accept(), Ok(1));
        assert_eq!(lgs.accept(), Ok(2));
    }

    #[test]
    fn one_request_in_flight_per_stream() {
        let mut lgs = Lgs::new();
        lgs.set_running(true);
        let s = lgs.accept().unwrap();
        let m = lgs.ingress(0, s, b"a".to_vec()).unwrap();
        assert_eq!(m.seq, 1);
        assert_eq!(lgs.ingress(0, s, b"b".to_vec()), Err(BridgeError::Busy(s)));
        let reply = GuestMessage { direction: Direction::ToNode, ..m };
        lgs.deliver(1, reply).unwrap();
        assert_eq!(lgs.take_reply(s).unwrap(), b"a");
        assert_eq!(lgs.ingress(2, s, b"c".to_vec()).unwrap().seq, 2);
    }

    #[test]
    fn reply_for_closed_stream_is_dropped() {
        let mut lgs = Lgs::new();
        lgs.set_running(true);
        let s = lgs.accept().unwrap();
        let m = lgs.ingress(0, s, b"a".to_vec()).unwrap();
        lgs.close(s);
        let r = lgs.deliver(1, GuestMessage { direction: Direction::ToNode, ..m });
        assert_eq!(r, Err(BridgeError::StreamClosed(s)));
        assert_eq!(lgs.dropped(), 1);
    }

    #[test]
    fn unreachable_target_is_peer_fault() {
        let mut lgc = Lgc::new("tcp://nowhere", EchoLink);
        let m = GuestMessage { stream_id: 1, seq: 1, direction: Direction::ToLink, body: vec![1] };
        assert!(matches!(lgc.forward("site-1", &m), Err(BridgeError::PeerFault(_))));
    }

    #[test]
    fn lgc_checks_seq() {
        let mut lgc = Lgc::new(INPROC_TARGET, EchoLink);
        let m = GuestMessage { stream_id: 1, seq: 2, direction: Direction::ToLink, body: vec![] };
        assert!(matches!(lgc.forward("site-1", &m), Err(BridgeError::OutOfOrder { expected: 1, .. })));
    }

    #[test]
    fn stream_mode_reassembles_chunks() {
        let mut lgs = Lgs::new();
        lgs.set_running(true);
        let mut conn = GuestConn::open(&mut lgs, ConnMode::Stream(3)).unwrap();
        let body: Vec<u8> = (0..=255).collect();
        let m = conn.send(&mut lgs, 0, &body).unwrap();
        assert_eq!(m.body, body);
        lgs.deliver(0, GuestMessage { direction: Direction::ToNode, ..m }).unwrap();
        assert_eq!(conn.recv(&mut lgs).unwrap().unwrap(), body);
    }

    #[test]
    fn oversized_frame_resets_stream() {
        let mut pipe = StreamPipe::new(4);
        assert!(pipe.push_raw(&[0xff, 0xff, 0xff, 0xff]).is_err());
    }
}
