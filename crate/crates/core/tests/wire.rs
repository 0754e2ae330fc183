use proptest::prelude::*;

use cclo::wire::{
    decode_header, encode_header, segment_message, FeedOutcome, MessageSignature, MsgType, ReassemblyState, Segment,
    WireError, SIGNATURE_LEN, SUBHEADER_LEN,
};

fn msg_type() -> impl Strategy<Value = MsgType> {
    prop_oneof![Just(MsgType::EagerMsg), Just(MsgType::RndzInit), Just(MsgType::RndzMsg), Just(MsgType::RndzDone)]
}

prop_compose! {
    fn signature()(t in msg_type(), flags: u16, comm_id: u32, src_rank: u32, dst_rank: u32, tag: u32, seq: u32,
                   payload_len: u64, addr: u64) -> MessageSignature {
        let remote_addr = if t.carries_address() { addr } else { 0 };
        MessageSignature { msg_type: t, flags, comm_id, src_rank, dst_rank, tag, seq, payload_len, remote_addr }
    }
}

proptest! {
    #[test]
    fn header_roundtrip(sig in signature()) {
        let bytes = encode_header(&sig).unwrap();
        prop_assert_eq!(bytes.len(), SIGNATURE_LEN);
        prop_assert_eq!(&bytes[0..4], &0x4143_434Cu32.to_le_bytes());
        prop_assert_eq!(&bytes[44..48], &[0u8; 4]);
        prop_assert_eq!(decode_header(&bytes).unwrap(), sig);
    }

    #[test]
    fn header_ignores_trailing_bytes(sig in signature(), tail in proptest::collection::vec(any::<u8>(), 0..64)) {
        let mut bytes = encode_header(&sig).unwrap().to_vec();
        bytes.extend(tail);
        prop_assert_eq!(decode_header(&bytes).unwrap(), sig);
    }

    #[test]
    fn address_only_on_rendezvous_data_messages(sig in signature(), addr in 1u64..) {
        let s = MessageSignature { remote_addr: addr, ..sig };
        let ok = encode_header(&s).is_ok();
        prop_assert_eq!(ok, s.msg_type.carries_address());
    }

    #[test]
    fn truncated_headers_are_rejected(sig in signature(), cut in 0usize..SIGNATURE_LEN) {
        let bytes = encode_header(&sig).unwrap();
        prop_assert_eq!(decode_header(&bytes[..cut]), Err(WireError::Truncated(cut)));
    }

    #[test]
    fn subheader_roundtrip(msg_id: u64, offset: u64, body in proptest::collection::vec(any::<u8>(), 0..512), last: bool) {
        let seg = Segment { msg_id, offset, seg_len: body.len() as u32, last, body };
        let mut bytes = seg.encode_subheader().to_vec();
        prop_assert_eq!(bytes.len(), SUBHEADER_LEN);
        bytes.extend(&seg.body);
        prop_assert_eq!(Segment::decode(&bytes).unwrap(), seg);
    }

    #[test]
    fn any_permutation_reassembles(
        len in 0usize..=(1 << 20),
        mtu in 256u32..=65536,
        seed: u64,
        dup_every in 0usize..4,
    ) {
        let payload: Vec<u8> = (0..len).map(|i| (i as u64).wrapping_mul(seed | 1).wrapping_shr(7) as u8).collect();
        let sig = MessageSignature::eager(1, 2, 3, 4, 5, len as u64);
        let mut segs = segment_message(9, &sig, &payload, mtu).unwrap();
        for s in &segs {
            prop_assert!(s.end() <= len as u64);
            prop_assert!(s.seg_len <= mtu);
        }
        prop_assert_eq!(segs.iter().filter(|s| s.last).count(), 1);
        if dup_every > 0 {
            let dups: Vec<Segment> = segs.iter().step_by(dup_every).cloned().collect();
            segs.extend(dups);
        }
        // deterministic Fisher-Yates keyed by seed
        let mut x = seed;
        for i in (1..segs.len()).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            segs.swap(i, (x >> 33) as usize % (i + 1));
        }
        let mut st = ReassemblyState::new(sig, 9);
        for s in &segs {
            let before = st.bytes_done();
            let out = st.feed(s).unwrap();
            prop_assert!(st.bytes_done() >= before);
            let covered: u64 = st.received_ranges().map(|(a, b)| b - a).sum();
            prop_assert_eq!(covered, st.bytes_done());
            prop_assert_eq!(out == FeedOutcome::Complete, st.bytes_done() == len as u64);
        }
        prop_assert!(st.is_complete());
        prop_assert_eq!(st.into_payload(), payload);
    }

    #[test]
    fn partial_overlap_is_an_error(len in 16usize..4096, split in 1usize..15) {
        let sig = MessageSignature::eager(0, 0, 0, 0, 0, len as u64);
        let mut st = ReassemblyState::new(sig, 1);
        let body = vec![7u8; 8];
        st.feed(&Segment { msg_id: 1, offset: 0, seg_len: 8, last: false, body: body.clone() }).unwrap();
        let shifted = Segment { msg_id: 1, offset: (split % 8) as u64, seg_len: 8, last: false, body };
        prop_assume!(split % 8 != 0);
        let overlapped = matches!(st.feed(&shifted), Err(WireError::Overlap { .. }));
        prop_assert!(overlapped);
        prop_assert_eq!(st.bytes_done(), 8);
    }
}

#[test]
fn bad_magic_version_and_type() {
    let sig = MessageSignature::eager(0, 1, 2, 3, 4, 5);
    let good = encode_header(&sig).unwrap();
    let mut b = good;
    b[0] ^= 1;
    assert!(matches!(decode_header(&b), Err(WireError::BadMagic(_))));
    let mut b = good;
    b[4] = 2;
    assert_eq!(decode_header(&b), Err(WireError::UnsupportedVersion(2)));
    let mut b = good;
    b[5] = 4;
    assert_eq!(decode_header(&b), Err(WireError::UnknownMsgType(4)));
}

#[test]
fn foreign_and_out_of_range_segments() {
    let sig = MessageSignature::eager(0, 0, 0, 0, 0, 10);
    let mut st = ReassemblyState::new(sig, 3);
    let seg = Segment { msg_id: 4, offset: 0, seg_len: 1, last: false, body: vec![0] };
    assert_eq!(st.feed(&seg), Err(WireError::WrongMessage { expected: 3, got: 4 }));
    let seg = Segment { msg_id: 3, offset: 8, seg_len: 4, last: true, body: vec![0; 4] };
    assert!(matches!(st.feed(&seg), Err(WireError::OutOfBounds { .. })));
    assert_eq!(segment_message(3, &sig, &[0; 9], 4), Err(WireError::PayloadLengthMismatch { declared: 10, actual: 9 }));
    assert_eq!(segment_message(3, &sig, &[0; 10], 0), Err(WireError::ZeroMtu));
}
