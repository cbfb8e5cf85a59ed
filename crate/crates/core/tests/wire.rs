use fedrelay::wire::{
    decode_envelope, encode_envelope, Envelope, FrameReader, MessageKind, MsgId, SiteAddress, WireError, MAX_FRAME_LEN,
};
use proptest::prelude::*;

mod common;
use common::frames::{
    corrupt_body, field_corruptions, frame_of, frame_of_bytes, hand_encode, reference, reference_frame, REFERENCE_BODY,
};

#[test]
fn golden_reference_frame() {
    assert_eq!(hand_encode(&reference()), reference_frame(), "hand encoder drifted from the frozen bytes");
    assert_eq!(encode_envelope(&reference()).unwrap(), reference_frame());
    assert_eq!(decode_envelope(&reference_frame()).unwrap(), reference());
}

#[test]
fn empty_payload_heartbeat() {
    let e = Envelope::request(
        MsgId(7),
        MessageKind::Heartbeat,
        "",
        SiteAddress::control("site-1"),
        SiteAddress::server(),
        vec![],
    );
    let f = encode_envelope(&e).unwrap();
    let len = u32::from_be_bytes(f[..4].try_into().unwrap()) as usize;
    assert_eq!(len, f.len() - 4);
    assert!(std::str::from_utf8(&f[4..]).unwrap().contains("\"payload_b64\":\"\""));
    assert_eq!(f, hand_encode(&e));
}

#[test]
fn short_input_is_truncated() {
    assert!(matches!(decode_envelope(&[0, 0, 1]), Err(WireError::Truncated { .. })));
    let mut f = reference_frame();
    f.pop();
    assert!(matches!(decode_envelope(&f), Err(WireError::Truncated { .. })));
}

#[test]
fn oversized_prefix_is_rejected() {
    let mut f = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes().to_vec();
    f.extend_from_slice(b"{}");
    assert_eq!(decode_envelope(&f), Err(WireError::FrameTooLarge(MAX_FRAME_LEN + 1)));
}

#[test]
fn every_single_field_corruption_is_rejected() {
    // The rewriter itself must reproduce the reference when nothing changes.
    let original: serde_json::Value = serde_json::from_str(REFERENCE_BODY).unwrap();
    let same = corrupt_body("msg_id", Some(&original["msg_id"].to_string()));
    assert_eq!(decode_envelope(&frame_of(&same)).unwrap(), reference());

    let cases = field_corruptions();
    assert!(cases.len() >= 60);
    for (label, key, rep) in &cases {
        let body = corrupt_body(key, rep.as_deref());
        let r = decode_envelope(&frame_of(&body));
        assert!(matches!(r, Err(WireError::Malformed(_))), "{label}: accepted {body} -> {r:?}");
    }
}

#[test]
fn structural_corruptions_are_rejected() {
    let body = REFERENCE_BODY;
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("unknown key", frame_of(&body.replacen('{', r#"{"extra":1,"#, 1))),
        ("duplicate key", frame_of(&body.replacen('{', r#"{"attempt":3,"#, 1))),
        ("kind BOGUS", frame_of(&body.replace("RESPONSE", "BOGUS"))),
        ("not an object", frame_of("[]")),
        ("not json", frame_of("not json")),
        ("empty body", frame_of("")),
        ("invalid utf-8", {
            let mut b = body.as_bytes().to_vec();
            b[12] = 0xff;
            frame_of_bytes(&b)
        }),
    ];
    for (label, f) in cases {
        assert!(matches!(decode_envelope(&f), Err(WireError::Malformed(_))), "{label}");
    }
    // Length prefix one short leaves a trailing byte; one long runs past the end.
    let mut f = reference_frame();
    f[3] -= 1;
    assert!(matches!(decode_envelope(&f), Err(WireError::Malformed(_))));
    let mut f = reference_frame();
    f[3] += 1;
    assert!(matches!(decode_envelope(&f), Err(WireError::Truncated { .. })));
    let mut f = reference_frame();
    f.push(b' ');
    assert!(decode_envelope(&f).is_err());
}

fn site_name() -> impl Strategy<Value = String> {
    "[a-z0-9_-]{1,32}"
}

prop_compose! {
    fn envelope()(
        msg_id in 1u128..,
        corr in 1u128..,
        kind in prop::sample::select(MessageKind::ALL.to_vec()),
        job in "[A-Za-z0-9._-]{1,64}",
        src_site in site_name(), src_worker in "\\PC{0,16}",
        dst_site in site_name(), dst_worker in "\\PC{0,16}",
        attempt in 1u32..,
        payload in prop::collection::vec(any::<u8>(), 0..200),
        drop_job in any::<bool>(),
    ) -> Envelope {
        let reply = kind.is_reply();
        let job_optional = reply && !matches!(kind, MessageKind::GuestRet) || kind.is_control_plane();
        Envelope {
            msg_id: MsgId(msg_id),
            correlation_id: if reply { MsgId(corr) } else { MsgId::ZERO },
            job_id: if drop_job && job_optional { String::new() } else { job },
            src: SiteAddress::new(src_site, src_worker),
            dst: SiteAddress::new(dst_site, dst_worker),
            kind,
            attempt,
            payload,
        }
    }
}

proptest! {
    #[test]
    fn round_trip(e in envelope()) {
        let f = encode_envelope(&e).unwrap();
        prop_assert_eq!(decode_envelope(&f).unwrap(), e);
    }

    #[test]
    fn encoding_is_deterministic(e in envelope()) {
        prop_assert_eq!(encode_envelope(&e).unwrap(), encode_envelope(&e.clone()).unwrap());
    }

    #[test]
    fn concatenated_frames_split_back(es in prop::collection::vec(envelope(), 0..8), chunk in 1usize..300) {
        let stream: Vec<u8> = es.iter().flat_map(|e| encode_envelope(e).unwrap()).collect();
        let mut reader = FrameReader::new();
        let mut got = Vec::new();
        for piece in stream.chunks(chunk) {
            reader.push(piece);
            while let Some(e) = reader.next_envelope().unwrap() {
                got.push(e);
            }
        }
        prop_assert_eq!(reader.buffered(), 0);
        prop_assert_eq!(got, es);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_envelope(&bytes);
    }
}
