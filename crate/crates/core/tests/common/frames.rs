//! The frozen reference frame and ways of breaking it.

use fedrelay::wire::{Envelope, MessageKind, MsgId, SiteAddress};

/// Length prefix 0x00000107 (263) followed by the JSON body below.
pub const REFERENCE_PREFIX: [u8; 4] = [0x00, 0x00, 0x01, 0x07];
pub const REFERENCE_BODY: &str = concat!(
    r#"{"msg_id":"0123456789abcdef0011223344556677","#,
    r#""correlation_id":"fedcba98765432100000000000000001","#,
    r#""job_id":"job-7","src_site":"site-1","src_worker":"job-7","dst_site":"server","dst_worker":"job-7","#,
    r#""kind":"RESPONSE","attempt":3,"payload_b64":"eyJsb3NzIjowLjI1ff8="}"#,
);

pub fn reference() -> Envelope {
    Envelope {
        msg_id: MsgId(0x0123456789abcdef0011223344556677),
        correlation_id: MsgId(0xfedcba98765432100000000000000001),
        job_id: "job-7".into(),
        src: SiteAddress::new("site-1", "job-7"),
        dst: SiteAddress::new("server", "job-7"),
        kind: MessageKind::Response,
        attempt: 3,
        payload: b"{\"loss\":0.25}\xff".to_vec(),
    }
}

pub fn reference_frame() -> Vec<u8> {
    let mut f = REFERENCE_PREFIX.to_vec();
    f.extend_from_slice(REFERENCE_BODY.as_bytes());
    f
}

pub fn b64(bytes: &[u8]) -> String {
    const ALPHABET: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::new();
    for chunk in bytes.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = (b[0] as u32) << 16 | (b[1] as u32) << 8 | b[2] as u32;
        for i in 0..4 {
            if i <= chunk.len() {
                out.push(ALPHABET[(n >> (18 - 6 * i) & 63) as usize] as char);
            } else {
                out.push('=');
            }
        }
    }
    out
}

/// Independent encoder: string concatenation in the fixed key order. Only
/// valid for strings that need no JSON escaping.
pub fn hand_encode(e: &Envelope) -> Vec<u8> {
    let body = String::new()
        + "{\"msg_id\":\""
        + &format!("{:032x}", e.msg_id.0)
        + "\",\"correlation_id\":\""
        + &format!("{:032x}", e.correlation_id.0)
        + "\",\"job_id\":\""
        + &e.job_id
        + "\",\"src_site\":\""
        + &e.src.site
        + "\",\"src_worker\":\""
        + &e.src.worker
        + "\",\"dst_site\":\""
        + &e.dst.site
        + "\",\"dst_worker\":\""
        + &e.dst.worker
        + "\",\"kind\":\""
        + e.kind.name()
        + "\",\"attempt\":"
        + &e.attempt.to_string()
        + ",\"payload_b64\":\""
        + &b64(&e.payload)
        + "\"}";
    let mut f = (body.len() as u32).to_be_bytes().to_vec();
    f.extend_from_slice(body.as_bytes());
    f
}

pub fn frame_of(body: &str) -> Vec<u8> {
    let mut f = (body.len() as u32).to_be_bytes().to_vec();
    f.extend_from_slice(body.as_bytes());
    f
}

/// Every way of breaking one field of the reference body, as
/// (label, key, replacement JSON or None to delete the key).
pub fn field_corruptions() -> Vec<(String, &'static str, Option<String>)> {
    let q = |s: &str| format!("\"{s}\"");
    let mut v: Vec<(&'static str, Vec<Option<String>>)> = vec![
        (
            "msg_id",
            vec![
                Some("12".into()),
                Some(q("")),
                Some(q("0123456789ABCDEF0011223344556677")),
                Some(q("0123456789abcdef001122334455667")),
                Some(q("0123456789abcdef00112233445566778")),
                Some(q(&"g".repeat(32))),
                Some(q(&"0".repeat(32))),
                Some("null".into()),
            ],
        ),
        ("correlation_id", vec![Some("1".into()), Some(q(&"0".repeat(32))), Some(q("xyz")), Some("null".into())]),
        ("job_id", vec![Some("7".into()), Some(q(&"j".repeat(65))), Some("null".into()), Some("[]".into())]),
        ("kind", vec![Some(q("BOGUS")), Some(q("response")), Some("3".into()), Some(q("")), Some("null".into())]),
        (
            "attempt",
            vec![
                Some("0".into()),
                Some("-1".into()),
                Some(q("3")),
                Some("3.5".into()),
                Some("4294967296".into()),
                Some("null".into()),
            ],
        ),
        (
            "payload_b64",
            vec![
                Some(q("!!!!")),
                Some(q("abc")),
                Some(q("eyJsb3NzIjowLjI1ff8")),
                Some(q("eyJsb3NzIjowLjI1ff8=\n")),
                Some("42".into()),
                Some("null".into()),
            ],
        ),
    ];
    for key in ["src_site", "dst_site"] {
        v.push((
            key,
            vec![
                Some("1".into()),
                Some(q("")),
                Some(q("Site-1")),
                Some(q("a b")),
                Some(q(&"s".repeat(33))),
                Some("null".into()),
            ],
        ));
    }
    for key in ["src_worker", "dst_worker"] {
        v.push((key, vec![Some("1".into()), Some(q(&"w".repeat(65))), Some("null".into())]));
    }
    let mut out = Vec::new();
    for (key, reps) in v {
        out.push((format!("{key}: missing"), key, None));
        for r in reps {
            out.push((format!("{key}: {}", r.as_deref().unwrap_or("")), key, r));
        }
    }
    out
}

/// Rewrites one `"key":value` pair of the reference body.
pub fn corrupt_body(key: &str, replacement: Option<&str>) -> String {
    let v: serde_json::Value = serde_json::from_str(REFERENCE_BODY).unwrap();
    let obj = v.as_object().unwrap();
    let mut parts = Vec::new();
    for (k, val) in obj {
        if k == key {
            if let Some(r) = replacement {
                parts.push(format!("\"{k}\":{r}"));
            }
        } else {
            parts.push(format!("\"{k}\":{val}"));
        }
    }
    format!("{{{}}}", parts.join(","))
}

pub fn frame_of_bytes(body: &[u8]) -> Vec<u8> {
    let mut f = (body.len() as u32).to_be_bytes().to_vec();
    f.extend_from_slice(body);
    f
}
