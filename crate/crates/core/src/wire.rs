//! Envelope data model and the length-prefixed JSON frame used on every hop.
//!
//! A frame is a 4-byte big-endian length `L` followed by `L` bytes of a
//! compact UTF-8 JSON object. Keys appear in a fixed order with no
//! insignificant whitespace, so encoding is a pure function of the envelope.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest JSON body a frame may carry.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

pub const SERVER_SITE: &str = "server";

const MAX_SITE_LEN: usize = 32;
const MAX_JOB_ID_LEN: usize = 64;
const MAX_WORKER_LEN: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("frame body of {0} bytes exceeds the 64 MiB cap")]
    FrameTooLarge(usize),
    #[error("invalid envelope: {0}")]
    Invalid(String),
}

/// 128-bit message identifier, rendered as 32 lowercase hex digits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MsgId(pub u128);

impl MsgId {
    pub const ZERO: MsgId = MsgId(0);

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for MsgId {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let canonical = s.len() == 32 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !canonical {
            return Err(WireError::Malformed(format!("bad message id {s:?}")));
        }
        u128::from_str_radix(s, 16).map(MsgId).map_err(|e| WireError::Malformed(e.to_string()))
    }
}

/// Deterministic id source: a per-process prefix in the high 64 bits and a
/// counter in the low 64 bits.
#[derive(Clone, Debug)]
pub struct MsgIdGen {
    prefix: u64,
    counter: u64,
}

impl MsgIdGen {
    pub fn new(prefix: u64) -> Self {
        MsgIdGen { prefix, counter: 0 }
    }

    /// Prefix derived from a stable hash of `label`, e.g. a process address.
    pub fn for_label(label: &str) -> Self {
        Self::new(fnv1a64(label.as_bytes()) | 1)
    }

    pub fn next_id(&mut self) -> MsgId {
        self.counter += 1;
        MsgId(((self.prefix as u128) << 64) | self.counter as u128)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Process address: a site plus an optional worker label (empty for the
/// site's control process).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteAddress {
    pub site: String,
    pub worker: String,
}

impl SiteAddress {
    pub fn new(site: impl Into<String>, worker: impl Into<String>) -> Self {
        SiteAddress { site: site.into(), worker: worker.into() }
    }

    pub fn control(site: impl Into<String>) -> Self {
        Self::new(site, "")
    }

    pub fn server() -> Self {
        Self::control(SERVER_SITE)
    }

    pub fn is_server_site(&self) -> bool {
        self.site == SERVER_SITE
    }

    pub fn is_control(&self) -> bool {
        self.worker.is_empty()
    }

    pub fn validate(&self) -> Result<(), WireError> {
        validate_site_name(&self.site)?;
        if self.worker.len() > MAX_WORKER_LEN {
            return Err(WireError::Invalid(format!("worker label longer than {MAX_WORKER_LEN} bytes")));
        }
        Ok(())
    }
}

impl fmt::Display for SiteAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.worker.is_empty() {
            f.write_str(&self.site)
        } else {
            write!(f, "{}/{}", self.site, self.worker)
        }
    }
}

pub fn validate_site_name(site: &str) -> Result<(), WireError> {
    if site.is_empty() || site.len() > MAX_SITE_LEN {
        return Err(WireError::Invalid(format!("site name {site:?} must be 1..={MAX_SITE_LEN} bytes")));
    }
    if !site.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-') {
        return Err(WireError::Invalid(format!("site name {site:?} must match [a-z0-9_-]+")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Request,
    Response,
    Query,
    QueryResponse,
    Ack,
    Submit,
    Deploy,
    Status,
    Abort,
    Heartbeat,
    Metric,
    GuestFwd,
    GuestRet,
}

impl MessageKind {
    pub const ALL: [MessageKind; 13] = [
        MessageKind::Request,
        MessageKind::Response,
        MessageKind::Query,
        MessageKind::QueryResponse,
        MessageKind::Ack,
        MessageKind::Submit,
        MessageKind::Deploy,
        MessageKind::Status,
        MessageKind::Abort,
        MessageKind::Heartbeat,
        MessageKind::Metric,
        MessageKind::GuestFwd,
        MessageKind::GuestRet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Request => "REQUEST",
            MessageKind::Response => "RESPONSE",
            MessageKind::Query => "QUERY",
            MessageKind::QueryResponse => "QUERY_RESPONSE",
            MessageKind::Ack => "ACK",
            MessageKind::Submit => "SUBMIT",
            MessageKind::Deploy => "DEPLOY",
            MessageKind::Status => "STATUS",
            MessageKind::Abort => "ABORT",
            MessageKind::Heartbeat => "HEARTBEAT",
            MessageKind::Metric => "METRIC",
            MessageKind::GuestFwd => "GUEST_FWD",
            MessageKind::GuestRet => "GUEST_RET",
        }
    }

    /// Control-plane kinds may travel without a job id.
    pub fn is_control_plane(self) -> bool {
        matches!(self, MessageKind::Submit | MessageKind::Status | MessageKind::Abort | MessageKind::Heartbeat)
    }

    /// Kinds that answer an earlier message and therefore carry its id in
    /// `correlation_id`. Their job scope mirrors the message they answer.
    pub fn is_reply(self) -> bool {
        matches!(
            self,
            MessageKind::Response
                | MessageKind::Query
                | MessageKind::QueryResponse
                | MessageKind::Ack
                | MessageKind::GuestRet
        )
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub msg_id: MsgId,
    pub correlation_id: MsgId,
    pub job_id: String,
    pub src: SiteAddress,
    pub dst: SiteAddress,
    pub kind: MessageKind,
    pub attempt: u32,
    pub payload: Vec<u8>,
}

impl Envelope {
    /// A first-attempt request-class envelope.
    pub fn request(
        msg_id: MsgId,
        kind: MessageKind,
        job_id: impl Into<String>,
        src: SiteAddress,
        dst: SiteAddress,
        payload: Vec<u8>,
    ) -> Self {
        Envelope { msg_id, correlation_id: MsgId::ZERO, job_id: job_id.into(), src, dst, kind, attempt: 1, payload }
    }

    /// A reply to `self`, addressed back to its sender.
    pub fn reply(&self, msg_id: MsgId, kind: MessageKind, payload: Vec<u8>) -> Envelope {
        Envelope {
            msg_id,
            correlation_id: self.msg_id,
            job_id: self.job_id.clone(),
            src: self.dst.clone(),
            dst: self.src.clone(),
            kind,
            attempt: 1,
            payload,
        }
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if self.msg_id.is_zero() {
            return Err(WireError::Invalid("msg_id must be nonzero".into()));
        }
        if self.attempt == 0 {
            return Err(WireError::Invalid("attempt starts at 1".into()));
        }
        if self.job_id.len() > MAX_JOB_ID_LEN {
            return Err(WireError::Invalid(format!("job_id longer than {MAX_JOB_ID_LEN} bytes")));
        }
        self.src.validate()?;
        self.dst.validate()?;
        if self.kind.is_reply() {
            if self.correlation_id.is_zero() {
                return Err(WireError::Invalid(format!("{} requires a correlation_id", self.kind)));
            }
        } else {
            if !self.correlation_id.is_zero() {
                return Err(WireError::Invalid(format!("{} must not carry a correlation_id", self.kind)));
            }
            if self.job_id.is_empty() && !self.kind.is_control_plane() {
                return Err(WireError::Invalid(format!("{} requires a job_id", self.kind)));
            }
        }
        if matches!(self.kind, MessageKind::GuestFwd | MessageKind::GuestRet) && self.job_id.is_empty() {
            return Err(WireError::Invalid(format!("{} requires a job_id", self.kind)));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    msg_id: String,
    correlation_id: String,
    job_id: &'a str,
    src_site: &'a str,
    src_worker: &'a str,
    dst_site: &'a str,
    dst_worker: &'a str,
    kind: MessageKind,
    attempt: u32,
    payload_b64: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvelopeIn {
    msg_id: String,
    correlation_id: String,
    job_id: String,
    src_site: String,
    src_worker: String,
    dst_site: String,
    dst_worker: String,
    kind: MessageKind,
    attempt: u32,
    payload_b64: String,
}

/// Encodes `env` as one self-delimiting frame.
pub fn encode_envelope(env: &Envelope) -> Result<Vec<u8>, WireError> {
    env.validate()?;
    let body = serde_json::to_vec(&EnvelopeOut {
        msg_id: env.msg_id.to_string(),
        correlation_id: env.correlation_id.to_string(),
        job_id: &env.job_id,
        src_site: &env.src.site,
        src_worker: &env.src.worker,
        dst_site: &env.dst.site,
        dst_worker: &env.dst.worker,
        kind: env.kind,
        attempt: env.attempt,
        payload_b64: STANDARD.encode(&env.payload),
    })
    .map_err(|e| WireError::Malformed(e.to_string()))?;
    frame_body(&body)
}

/// Decodes exactly one frame; trailing bytes are an error.
pub fn decode_envelope(frame: &[u8]) -> Result<Envelope, WireError> {
    let len = frame_len(frame)?;
    if frame.len() > 4 + len {
        return Err(WireError::Malformed(format!("length prefix says {len} bytes but {} follow", frame.len() - 4)));
    }
    decode_body(&frame[4..])
}

fn decode_body(body: &[u8]) -> Result<Envelope, WireError> {
    let raw: EnvelopeIn = serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))?;
    let payload =
        STANDARD.decode(raw.payload_b64.as_bytes()).map_err(|e| WireError::Malformed(format!("payload_b64: {e}")))?;
    let env = Envelope {
        msg_id: raw.msg_id.parse()?,
        correlation_id: raw.correlation_id.parse()?,
        job_id: raw.job_id,
        src: SiteAddress::new(raw.src_site, raw.src_worker),
        dst: SiteAddress::new(raw.dst_site, raw.dst_worker),
        kind: raw.kind,
        attempt: raw.attempt,
        payload,
    };
    env.validate().map_err(|e| WireError::Malformed(e.to_string()))?;
    Ok(env)
}

/// Prefixes `body` with its big-endian u32 length.
pub fn frame_body(body: &[u8]) -> Result<Vec<u8>, WireError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

/// Reads the length prefix and checks the whole body is present.
fn frame_len(buf: &[u8]) -> Result<usize, WireError> {
    if buf.len() < 4 {
        return Err(WireError::Truncated { needed: 4, have: buf.len() });
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    if buf.len() < 4 + len {
        return Err(WireError::Truncated { needed: 4 + len, have: buf.len() });
    }
    Ok(len)
}

/// Incremental reassembly of frames from a byte stream. Yields raw bodies
/// (without the length prefix); the caller decides how to parse them.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete body, `Ok(None)` if more bytes are needed.
    pub fn next_body(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        match frame_len(&self.buf) {
            Ok(len) => {
                let body = self.buf[4..4 + len].to_vec();
                self.buf.drain(..4 + len);
                Ok(Some(body))
            }
            Err(WireError::Truncated { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn next_envelope(&mut self) -> Result<Option<Envelope>, WireError> {
        match self.next_body()? {
            Some(body) => decode_body(&body).map(Some),
            None => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heartbeat() -> Envelope {
        Envelope::request(
            MsgId(7),
            MessageKind::Heartbeat,
            "",
            SiteAddress::control("site-1"),
            SiteAddress::server(),
            Vec::new(),
        )
    }

    #[test]
    fn empty_payload_heartbeat() {
        let frame = encode_envelope(&heartbeat()).unwrap();
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(len, frame.len() - 4);
        let json = std::str::from_utf8(&frame[4..]).unwrap();
        assert!(json.contains(r#""payload_b64":"""#));
        assert!(json.contains(r#""kind":"HEARTBEAT""#));
    }

    #[test]
    fn short_input_is_truncated() {
        assert!(matches!(decode_envelope(&[0, 0, 1]), Err(WireError::Truncated { .. })));
        let frame = encode_envelope(&heartbeat()).unwrap();
        assert!(matches!(decode_envelope(&frame[..frame.len() - 1]), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut frame = encode_envelope(&heartbeat()).unwrap();
        frame.push(b' ');
        assert!(matches!(decode_envelope(&frame), Err(WireError::Malformed(_))));
    }

    #[test]
    fn oversized_prefix_rejected() {
        let mut frame = vec![0u8; 8];
        frame[..4].copy_from_slice(&((MAX_FRAME_LEN as u32) + 1).to_be_bytes());
        assert_eq!(decode_envelope(&frame), Err(WireError::FrameTooLarge(MAX_FRAME_LEN + 1)));
    }

    #[test]
    fn oversized_payload_refused_on_encode() {
        let mut env = heartbeat();
        env.payload = vec![0u8; MAX_FRAME_LEN];
        assert!(matches!(encode_envelope(&env), Err(WireError::FrameTooLarge(_))));
    }

    #[test]
    fn msg_id_is_canonical_hex() {
        assert_eq!(MsgId(0xab).to_string(), "000000000000000000000000000000ab");
        assert!("000000000000000000000000000000AB".parse::<MsgId>().is_err());
        assert!("ab".parse::<MsgId>().is_err());
    }

    #[test]
    fn job_scoped_kinds_need_job_id() {
        let mut env = heartbeat();
        env.kind = MessageKind::GuestFwd;
        assert!(env.validate().is_err());
        env.job_id = "j1".into();
        assert!(env.validate().is_ok());
    }

    #[test]
    fn query_needs_correlation() {
        let mut env = heartbeat();
        env.kind = MessageKind::Query;
        env.job_id = "j".into();
        assert!(env.validate().is_err());
        env.correlation_id = MsgId(3);
        assert!(env.validate().is_ok());
    }

    #[test]
    fn reader_handles_split_frames() {
        let a = encode_envelope(&heartbeat()).unwrap();
        let mut b_env = heartbeat();
        b_env.msg_id = MsgId(8);
        let b = encode_envelope(&b_env).unwrap();
        let stream: Vec<u8> = a.iter().chain(b.iter()).copied().collect();
        let mut reader = FrameReader::new();
        let mut out = Vec::new();
        for chunk in stream.chunks(5) {
            reader.push(chunk);
            while let Some(env) = reader.next_envelope().unwrap() {
                out.push(env);
            }
        }
        assert_eq!(out, vec![heartbeat(), b_env]);
        assert_eq!(reader.buffered(), 0);
    }
}
