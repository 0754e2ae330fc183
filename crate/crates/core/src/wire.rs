//! Message framing: the 48-byte signature header, transport-sized segments and
//! reassembly of interleaved segments back into messages.
//!
//! Signature layout (little-endian, 48 bytes):
//!
//! ```text
//! offset  size  field
//!      0     4  magic        0x4143434C
//!      4     1  version      1
//!      5     1  msg_type     0 EAGER_MSG, 1 RNDZ_INIT, 2 RNDZ_MSG, 3 RNDZ_DONE
//!      6     2  flags        bit 0: payload targets a kernel stream
//!      8     4  comm_id
//!     12     4  src_rank
//!     16     4  dst_rank
//!     20     4  tag
//!     24     4  seq
//!     28     8  payload_len
//!     36     8  remote_addr  (RNDZ_INIT / RNDZ_MSG only)
//!     44     4  pad          0
//! ```
//!
//! Datagram transports prefix each segment body with a 24-byte subheader
//! `{msg_id: u64, offset: u64, seg_len: u32, last: u8, pad: [u8; 3]}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SIGNATURE_MAGIC: u32 = 0x4143_434C;
pub const SIGNATURE_VERSION: u8 = 1;
pub const SIGNATURE_LEN: usize = 48;
pub const SUBHEADER_LEN: usize = 24;

/// Signature flag: the payload targets a kernel stream rather than memory.
pub const FLAG_STREAM_PAYLOAD: u16 = 1 << 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("header too short: {0} bytes, need {SIGNATURE_LEN}")]
    Truncated(usize),
    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("unsupported signature version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("remote_addr must be zero for {0:?}")]
    RemoteAddrNotAllowed(MsgType),
    #[error("mtu payload must be at least one byte")]
    ZeroMtu,
    #[error("payload is {actual} bytes but signature declares {declared}")]
    PayloadLengthMismatch { declared: u64, actual: u64 },
    #[error("segment body is {body} bytes but seg_len says {seg_len}")]
    SegmentBodyMismatch { seg_len: u32, body: usize },
    #[error("segment for message {got} fed into reassembly of message {expected}")]
    WrongMessage { expected: u64, got: u64 },
    #[error("segment [{offset}, {end}) exceeds payload length {payload_len}")]
    OutOfBounds { offset: u64, end: u64, payload_len: u64 },
    #[error("segment [{offset}, {end}) partially overlaps received data")]
    Overlap { offset: u64, end: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum MsgType {
    EagerMsg = 0,
    RndzInit = 1,
    RndzMsg = 2,
    RndzDone = 3,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self, WireError> {
        match v {
            0 => Ok(MsgType::EagerMsg),
            1 => Ok(MsgType::RndzInit),
            2 => Ok(MsgType::RndzMsg),
            3 => Ok(MsgType::RndzDone),
            other => Err(WireError::UnknownMsgType(other)),
        }
    }

    /// Whether a non-zero `remote_addr` is meaningful for this type.
    pub fn carries_address(self) -> bool {
        matches!(self, MsgType::RndzInit | MsgType::RndzMsg)
    }
}

/// Per-message header. `magic`, `version` and `pad` are implied by the encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MessageSignature {
    pub msg_type: MsgType,
    pub flags: u16,
    pub comm_id: u32,
    pub src_rank: u32,
    pub dst_rank: u32,
    pub tag: u32,
    pub seq: u32,
    pub payload_len: u64,
    pub remote_addr: u64,
}

impl MessageSignature {
    pub fn eager(comm_id: u32, src_rank: u32, dst_rank: u32, tag: u32, seq: u32, payload_len: u64) -> Self {
        MessageSignature {
            msg_type: MsgType::EagerMsg,
            flags: 0,
            comm_id,
            src_rank,
            dst_rank,
            tag,
            seq,
            payload_len,
            remote_addr: 0,
        }
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if self.remote_addr != 0 && !self.msg_type.carries_address() {
            return Err(WireError::RemoteAddrNotAllowed(self.msg_type));
        }
        Ok(())
    }

    pub fn is_stream_payload(&self) -> bool {
        self.flags & FLAG_STREAM_PAYLOAD != 0
    }
}

pub fn encode_header(sig: &MessageSignature) -> Result<[u8; SIGNATURE_LEN], WireError> {
    sig.validate()?;
    let mut out = [0u8; SIGNATURE_LEN];
    out[0..4].copy_from_slice(&SIGNATURE_MAGIC.to_le_bytes());
    out[4] = SIGNATURE_VERSION;
    out[5] = sig.msg_type as u8;
    out[6..8].copy_from_slice(&sig.flags.to_le_bytes());
    out[8..12].copy_from_slice(&sig.comm_id.to_le_bytes());
    out[12..16].copy_from_slice(&sig.src_rank.to_le_bytes());
    out[16..20].copy_from_slice(&sig.dst_rank.to_le_bytes());
    out[20..24].copy_from_slice(&sig.tag.to_le_bytes());
    out[24..28].copy_from_slice(&sig.seq.to_le_bytes());
    out[28..36].copy_from_slice(&sig.payload_len.to_le_bytes());
    out[36..44].copy_from_slice(&sig.remote_addr.to_le_bytes());
    // 44..48 pad stays zero
    Ok(out)
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Decodes the first 48 bytes of `bytes`. Trailing bytes are ignored.
pub fn decode_header(bytes: &[u8]) -> Result<MessageSignature, WireError> {
    if bytes.len() < SIGNATURE_LEN {
        return Err(WireError::Truncated(bytes.len()));
    }
    let magic = u32_at(bytes, 0);
    if magic != SIGNATURE_MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[4] != SIGNATURE_VERSION {
        return Err(WireError::UnsupportedVersion(bytes[4]));
    }
    let sig = MessageSignature {
        msg_type: MsgType::from_u8(bytes[5])?,
        flags: u16_at(bytes, 6),
        comm_id: u32_at(bytes, 8),
        src_rank: u32_at(bytes, 12),
        dst_rank: u32_at(bytes, 16),
        tag: u32_at(bytes, 20),
        seq: u32_at(bytes, 24),
        payload_len: u64_at(bytes, 28),
        remote_addr: u64_at(bytes, 36),
    };
    sig.validate()?;
    Ok(sig)
}

/// One transport-sized piece of a message payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub msg_id: u64,
    pub offset: u64,
    pub seg_len: u32,
    pub last: bool,
    pub body: Vec<u8>,
}

impl Segment {
    pub fn end(&self) -> u64 {
        self.offset + self.seg_len as u64
    }

    pub fn encode_subheader(&self) -> [u8; SUBHEADER_LEN] {
        let mut out = [0u8; SUBHEADER_LEN];
        out[0..8].copy_from_slice(&self.msg_id.to_le_bytes());
        out[8..16].copy_from_slice(&self.offset.to_le_bytes());
        out[16..20].copy_from_slice(&self.seg_len.to_le_bytes());
        out[20] = self.last as u8;
        out
    }

    /// Parses a subheader followed by the segment body.
    pub fn decode(bytes: &[u8]) -> Result<Segment, WireError> {
        if bytes.len() < SUBHEADER_LEN {
            return Err(WireError::Truncated(bytes.len()));
        }
        let seg_len = u32_at(bytes, 16);
        let body = &bytes[SUBHEADER_LEN..];
        if body.len() != seg_len as usize {
            return Err(WireError::SegmentBodyMismatch { seg_len, body: body.len() });
        }
        Ok(Segment {
            msg_id: u64_at(bytes, 0),
            offset: u64_at(bytes, 8),
            seg_len,
            last: bytes[20] != 0,
            body: body.to_vec(),
        })
    }
}

/// Splits `payload` into segments of at most `mtu_payload` bytes, in offset order.
pub fn segment_message(
    msg_id: u64,
    sig: &MessageSignature,
    payload: &[u8],
    mtu_payload: u32,
) -> Result<Vec<Segment>, WireError> {
    if mtu_payload == 0 {
        return Err(WireError::ZeroMtu);
    }
    if payload.len() as u64 != sig.payload_len {
        return Err(WireError::PayloadLengthMismatch { declared: sig.payload_len, actual: payload.len() as u64 });
    }
    if payload.is_empty() {
        return Ok(vec![Segment { msg_id, offset: 0, seg_len: 0, last: true, body: Vec::new() }]);
    }
    let mtu = mtu_payload as usize;
    let n = payload.len().div_ceil(mtu);
    Ok(payload
        .chunks(mtu)
        .enumerate()
        .map(|(i, chunk)| Segment {
            msg_id,
            offset: (i * mtu) as u64,
            seg_len: chunk.len() as u32,
            last: i + 1 == n,
            body: chunk.to_vec(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedOutcome {
    Incomplete,
    Complete,
}

/// Reassembly of one message from segments arriving in any order.
#[derive(Clone, Debug)]
pub struct ReassemblyState {
    signature: MessageSignature,
    msg_id: u64,
    /// start -> end of every distinct range received so far; ranges never overlap.
    received: BTreeMap<u64, u64>,
    bytes_done: u64,
    buffer: Vec<u8>,
}

impl ReassemblyState {
    pub fn new(signature: MessageSignature, msg_id: u64) -> Self {
        ReassemblyState {
            buffer: vec![0u8; signature.payload_len as usize],
            signature,
            msg_id,
            received: BTreeMap::new(),
            bytes_done: 0,
        }
    }

    pub fn signature(&self) -> &MessageSignature {
        &self.signature
    }

    pub fn msg_id(&self) -> u64 {
        self.msg_id
    }

    pub fn bytes_done(&self) -> u64 {
        self.bytes_done
    }

    pub fn is_complete(&self) -> bool {
        self.bytes_done == self.signature.payload_len
    }

    /// Received ranges in offset order.
    pub fn received_ranges(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.received.iter().map(|(&s, &e)| (s, e))
    }

    pub fn feed(&mut self, seg: &Segment) -> Result<FeedOutcome, WireError> {
        if seg.msg_id != self.msg_id {
            return Err(WireError::WrongMessage { expected: self.msg_id, got: seg.msg_id });
        }
        if seg.body.len() != seg.seg_len as usize {
            return Err(WireError::SegmentBodyMismatch { seg_len: seg.seg_len, body: seg.body.len() });
        }
        let (start, end) = (seg.offset, seg.end());
        let payload_len = self.signature.payload_len;
        if end > payload_len {
            return Err(WireError::OutOfBounds { offset: start, end, payload_len });
        }
        if start == end {
            return Ok(self.outcome());
        }
        if self.received.get(&start) == Some(&end) {
            return Ok(self.outcome());
        }
        let overlaps_prev = self.received.range(..=start).next_back().is_some_and(|(_, &e)| e > start);
        let overlaps_next = self.received.range(start..end).next().is_some();
        if overlaps_prev || overlaps_next {
            return Err(WireError::Overlap { offset: start, end });
        }
        self.buffer[start as usize..end as usize].copy_from_slice(&seg.body);
        self.received.insert(start, end);
        self.bytes_done += end - start;
        Ok(self.outcome())
    }

    fn outcome(&self) -> FeedOutcome {
        if self.is_complete() {
            FeedOutcome::Complete
        } else {
            FeedOutcome::Incomplete
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.buffer
    }

    pub fn into_payload(self) -> Vec<u8> {
        self.buffer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(len: u64) -> MessageSignature {
        MessageSignature::eager(0, 1, 2, 5, 0, len)
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let bytes = encode_header(&sig(1024)).unwrap();
        assert_eq!(&bytes[..6], &[0x4C, 0x43, 0x43, 0x41, 0x01, 0x00]);
        assert_eq!(bytes.len(), SIGNATURE_LEN);
    }

    #[test]
    fn eager_with_remote_addr_is_rejected() {
        let mut s = sig(8);
        s.remote_addr = 7;
        assert_eq!(encode_header(&s), Err(WireError::RemoteAddrNotAllowed(MsgType::EagerMsg)));
    }

    #[test]
    fn decode_errors_are_distinct() {
        let good = encode_header(&sig(8)).unwrap();
        let mut bad_magic = good;
        bad_magic[..4].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode_header(&bad_magic), Err(WireError::BadMagic(0)));
        let mut bad_version = good;
        bad_version[4] = 9;
        assert_eq!(decode_header(&bad_version), Err(WireError::UnsupportedVersion(9)));
        let mut bad_type = good;
        bad_type[5] = 4;
        assert_eq!(decode_header(&bad_type), Err(WireError::UnknownMsgType(4)));
        assert_eq!(decode_header(&good[..47]), Err(WireError::Truncated(47)));
    }

    #[test]
    fn segmentation_boundaries() {
        let payload = vec![3u8; 10_000];
        let segs = segment_message(1, &sig(10_000), &payload, 4096).unwrap();
        let shape: Vec<_> = segs.iter().map(|s| (s.offset, s.seg_len, s.last)).collect();
        assert_eq!(shape, vec![(0, 4096, false), (4096, 4096, false), (8192, 1808, true)]);

        let segs = segment_message(1, &sig(0), &[], 4096).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].offset, segs[0].seg_len, segs[0].last), (0, 0, true));

        let segs = segment_message(1, &sig(4096), &vec![0u8; 4096], 4096).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].seg_len, segs[0].last), (4096, true));

        assert_eq!(segment_message(1, &sig(1), &[1], 0), Err(WireError::ZeroMtu));
    }

    #[test]
    fn reverse_order_completes_on_last_feed() {
        let payload: Vec<u8> = (0..8192u32).map(|i| i as u8).collect();
        let segs = segment_message(9, &sig(8192), &payload, 4096).unwrap();
        let mut st = ReassemblyState::new(sig(8192), 9);
        assert_eq!(st.feed(&segs[1]).unwrap(), FeedOutcome::Incomplete);
        assert_eq!(st.feed(&segs[0]).unwrap(), FeedOutcome::Complete);
        assert_eq!(st.payload(), &payload[..]);
    }

    #[test]
    fn duplicates_are_idempotent_and_overlaps_fail() {
        let payload = vec![1u8; 8192];
        let segs = segment_message(3, &sig(8192), &payload, 4096).unwrap();
        let mut st = ReassemblyState::new(sig(8192), 3);
        st.feed(&segs[0]).unwrap();
        assert_eq!(st.feed(&segs[0]).unwrap(), FeedOutcome::Incomplete);
        assert_eq!(st.bytes_done(), 4096);

        let overlap = Segment { msg_id: 3, offset: 2048, seg_len: 4096, last: false, body: vec![0; 4096] };
        assert!(matches!(st.feed(&overlap), Err(WireError::Overlap { .. })));

        let oob = Segment { msg_id: 3, offset: 8000, seg_len: 400, last: true, body: vec![0; 400] };
        assert!(matches!(st.feed(&oob), Err(WireError::OutOfBounds { .. })));

        st.feed(&segs[1]).unwrap();
        assert_eq!(st.feed(&segs[1]).unwrap(), FeedOutcome::Complete);
        assert_eq!(st.bytes_done(), 8192);
    }

    #[test]
    fn subheader_roundtrip() {
        let seg = Segment { msg_id: 0xDEAD_BEEF_0000_0001, offset: 4096, seg_len: 3, last: true, body: vec![1, 2, 3] };
        let mut bytes = seg.encode_subheader().to_vec();
        bytes.extend_from_slice(&seg.body);
        assert_eq!(Segment::decode(&bytes).unwrap(), seg);
    }
}
