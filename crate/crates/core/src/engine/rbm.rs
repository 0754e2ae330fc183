//! Rx buffer manager: the pool of temporary eager buffers, segment
//! reassembly into them, and tag/source matching for receives.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::transport::SessionId;
use crate::wire::{FeedOutcome, MessageSignature, ReassemblyState, Segment, WireError};

use super::request::ANY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SlotState {
    Idle,
    InProgress,
    Ready,
    Claimed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SlotMeta {
    pub comm_id: u32,
    pub src_rank: u32,
    pub tag: u32,
    pub seq: u32,
    pub len: u64,
}

#[derive(Debug, Clone)]
pub struct RxBufferSlot {
    pub index: u16,
    pub capacity: u64,
    pub state: SlotState,
    pub meta: Option<SlotMeta>,
    reassembly: Option<ReassemblyState>,
    origin: Option<(Option<SessionId>, u64)>,
}

impl RxBufferSlot {
    pub fn payload(&self) -> Option<&[u8]> {
        self.reassembly.as_ref().map(|r| r.payload())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PoolCounts {
    pub idle: usize,
    pub in_progress: usize,
    pub ready: usize,
    pub claimed: usize,
}

impl PoolCounts {
    pub fn total(&self) -> usize {
        self.idle + self.in_progress + self.ready + self.claimed
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RbmError {
    #[error("eager message of {len} bytes exceeds every Rx buffer (max {max})")]
    TooLarge { len: u64, max: u64 },
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    /// No idle buffer can take the message right now.
    NoSlot,
    InProgress(u16),
    Ready(u16),
    /// Segment of a message this pool already decided to drop.
    Discarded,
}

/// Every sequence number seen from one `(comm, src)`; answers whether a
/// message could still be missing below a given seq.
#[derive(Clone, Debug, Default)]
struct SeqTracker {
    contiguous: u32,
    above: BTreeSet<u32>,
}

impl SeqTracker {
    fn see(&mut self, seq: u32) {
        if seq < self.contiguous {
            return;
        }
        if seq == self.contiguous {
            self.contiguous += 1;
            while self.above.remove(&self.contiguous) {
                self.contiguous += 1;
            }
        } else {
            self.above.insert(seq);
        }
    }

    fn all_seen_below(&self, seq: u32) -> bool {
        self.contiguous >= seq
    }
}

#[derive(Debug, Clone)]
pub struct RxBufferPool {
    slots: Vec<RxBufferSlot>,
    by_origin: BTreeMap<(Option<SessionId>, u64), u16>,
    discarded: BTreeSet<(Option<SessionId>, u64)>,
    seen: BTreeMap<(u32, u32), SeqTracker>,
}

fn key_matches(meta: &SlotMeta, comm: u32, src: u32, tag: u32) -> bool {
    meta.comm_id == comm && (src == ANY || meta.src_rank == src) && (tag == ANY || meta.tag == tag)
}

impl RxBufferPool {
    pub fn new(count: u16, capacity: u64) -> Self {
        let slots = (0..count)
            .map(|index| RxBufferSlot {
                index,
                capacity,
                state: SlotState::Idle,
                meta: None,
                reassembly: None,
                origin: None,
            })
            .collect();
        RxBufferPool { slots, by_origin: BTreeMap::new(), discarded: BTreeSet::new(), seen: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn max_capacity(&self) -> u64 {
        self.slots.iter().map(|s| s.capacity).max().unwrap_or(0)
    }

    pub fn slots(&self) -> &[RxBufferSlot] {
        &self.slots
    }

    pub fn slot(&self, index: u16) -> &RxBufferSlot {
        &self.slots[index as usize]
    }

    pub fn counts(&self) -> PoolCounts {
        let mut c = PoolCounts::default();
        for s in &self.slots {
            match s.state {
                SlotState::Idle => c.idle += 1,
                SlotState::InProgress => c.in_progress += 1,
                SlotState::Ready => c.ready += 1,
                SlotState::Claimed => c.claimed += 1,
            }
        }
        c
    }

    /// Records that a headered message with this seq arrived from `(comm, src)`.
    pub fn note_seen(&mut self, comm_id: u32, src_rank: u32, seq: u32) {
        self.seen.entry((comm_id, src_rank)).or_default().see(seq);
    }

    fn check_size(&self, len: u64) -> Result<(), RbmError> {
        let max = self.max_capacity();
        if len > max {
            return Err(RbmError::TooLarge { len, max });
        }
        Ok(())
    }

    fn open_slot(&mut self, origin: (Option<SessionId>, u64), header: &MessageSignature) -> Option<u16> {
        let len = header.payload_len;
        let idx = self.slots.iter().position(|s| s.state == SlotState::Idle && s.capacity >= len)? as u16;
        let slot = &mut self.slots[idx as usize];
        slot.state = SlotState::InProgress;
        slot.meta = Some(SlotMeta {
            comm_id: header.comm_id,
            src_rank: header.src_rank,
            tag: header.tag,
            seq: header.seq,
            len,
        });
        slot.reassembly = Some(ReassemblyState::new(*header, origin.1));
        slot.origin = Some(origin);
        self.by_origin.insert(origin, idx);
        self.note_seen(header.comm_id, header.src_rank, header.seq);
        Some(idx)
    }

    fn finish_if_complete(&mut self, idx: u16, outcome: FeedOutcome) -> Admission {
        if outcome == FeedOutcome::Complete {
            let slot = &mut self.slots[idx as usize];
            slot.state = SlotState::Ready;
            if let Some(o) = slot.origin.take() {
                self.by_origin.remove(&o);
            }
            Admission::Ready(idx)
        } else {
            Admission::InProgress(idx)
        }
    }

    /// A whole eager message (stream and RDMA backends, and loopback).
    pub fn on_message(
        &mut self,
        session: Option<SessionId>,
        header: &MessageSignature,
        payload: &[u8],
    ) -> Result<Admission, RbmError> {
        self.check_size(header.payload_len)?;
        let Some(idx) = self.open_slot((session, u64::MAX), header) else { return Ok(Admission::NoSlot) };
        let seg = Segment { msg_id: u64::MAX, offset: 0, seg_len: payload.len() as u32, last: true, body: payload.to_vec() };
        let outcome = self.slots[idx as usize].reassembly.as_mut().unwrap().feed(&seg)?;
        Ok(self.finish_if_complete(idx, outcome))
    }

    /// One segment of an eager message (datagram backend). Segments of one
    /// message share `(session, msg_id)`.
    pub fn on_segment(
        &mut self,
        session: SessionId,
        header: &MessageSignature,
        seg: &Segment,
    ) -> Result<Admission, RbmError> {
        let origin = (Some(session), seg.msg_id);
        if self.discarded.contains(&origin) {
            return Ok(Admission::Discarded);
        }
        let idx = match self.by_origin.get(&origin) {
            Some(&i) => i,
            None => {
                self.check_size(header.payload_len)?;
                match self.open_slot(origin, header) {
                    Some(i) => i,
                    None => return Ok(Admission::NoSlot),
                }
            }
        };
        let outcome = self.slots[idx as usize].reassembly.as_mut().unwrap().feed(seg)?;
        Ok(self.finish_if_complete(idx, outcome))
    }

    /// Marks a datagram message as dropped so its later segments are ignored.
    pub fn discard(&mut self, session: SessionId, header: &MessageSignature, msg_id: u64) {
        self.discarded.insert((Some(session), msg_id));
        self.note_seen(header.comm_id, header.src_rank, header.seq);
    }

    fn eligible(&self, cand: &SlotMeta, src: u32, tag: u32) -> bool {
        let gap_free = self.seen.get(&(cand.comm_id, cand.src_rank)).is_some_and(|t| t.all_seen_below(cand.seq));
        gap_free
            && !self.slots.iter().any(|s| {
                s.state == SlotState::InProgress
                    && s.meta.is_some_and(|m| {
                        m.comm_id == cand.comm_id && m.src_rank == cand.src_rank && m.seq < cand.seq && key_matches(&m, cand.comm_id, src, tag)
                    })
            })
    }

    /// Claims the READY slot matching `(comm, src, tag)` with the smallest
    /// `(seq, src)`. A slot is skipped while an earlier message from the same
    /// source could still match.
    pub fn match_claim(&mut self, comm_id: u32, src: u32, tag: u32) -> Option<u16> {
        let best = self
            .slots
            .iter()
            .filter(|s| s.state == SlotState::Ready)
            .filter_map(|s| s.meta.map(|m| (s.index, m)))
            .filter(|(_, m)| key_matches(m, comm_id, src, tag))
            .filter(|(_, m)| self.eligible(m, src, tag))
            .min_by_key(|(_, m)| (m.seq, m.src_rank))?;
        self.slots[best.0 as usize].state = SlotState::Claimed;
        Some(best.0)
    }

    /// Peeks without claiming; used for inspection and tests.
    pub fn would_match(&self, comm_id: u32, src: u32, tag: u32) -> bool {
        self.slots.iter().any(|s| {
            s.state == SlotState::Ready && s.meta.is_some_and(|m| key_matches(&m, comm_id, src, tag) && self.eligible(&m, src, tag))
        })
    }

    pub fn take_payload(&mut self, index: u16) -> Vec<u8> {
        self.slots[index as usize].reassembly.take().map(|r| r.into_payload()).unwrap_or_default()
    }

    /// Returns a claimed slot to IDLE.
    pub fn release(&mut self, index: u16) {
        let slot = &mut self.slots[index as usize];
        debug_assert_eq!(slot.state, SlotState::Claimed);
        slot.state = SlotState::Idle;
        slot.meta = None;
        slot.reassembly = None;
        slot.origin = None;
    }
}
