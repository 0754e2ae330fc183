//! Rx system: parses arrivals and routes them to the RBM (eager data), the
//! controller's notification queue (rendezvous control) or the landed-write
//! record (rendezvous data already in memory).

use std::collections::{BTreeMap, VecDeque};

use crate::transport::{RxEvent, RxKind, SessionId};
use crate::wire::{decode_header, MsgType, Segment, SIGNATURE_LEN};

use super::firmware::Notification;
use super::rbm::{Admission, RbmError};
use super::Node;

#[derive(Debug, Default)]
pub(crate) struct RxState {
    /// Arrivals waiting for a free Rx buffer, per session, in order.
    held: BTreeMap<SessionId, VecDeque<RxEvent>>,
}

impl RxState {
    pub(crate) fn held_events(&self) -> usize {
        self.held.values().map(|q| q.len()).sum()
    }
}

impl Node {
    pub(crate) fn rx_stage(&mut self) -> bool {
        let mut moved = false;
        let sessions: Vec<SessionId> = self.rx.held.keys().copied().collect();
        for s in sessions {
            while let Some(ev) = self.rx.held.get_mut(&s).and_then(|q| q.pop_front()) {
                match self.dispatch(ev) {
                    Some(back) => {
                        self.rx.held.get_mut(&s).expect("present").push_front(back);
                        break;
                    }
                    None => moved = true,
                }
            }
            if self.rx.held.get(&s).is_some_and(|q| q.is_empty()) {
                self.rx.held.remove(&s);
            }
        }
        while let Some(ev) = self.transport.poll_rx() {
            moved = true;
            if let Some(q) = self.rx.held.get_mut(&ev.session) {
                q.push_back(ev);
                continue;
            }
            if let Some(back) = self.dispatch(ev) {
                self.rx.held.entry(back.session).or_default().push_back(back);
            }
        }
        moved
    }

    /// Handles one arrival. Returns it back when it must wait for a buffer.
    fn dispatch(&mut self, mut ev: RxEvent) -> Option<RxEvent> {
        if let RxKind::Raw { bytes, datagram } = &ev.kind {
            match decode_raw(bytes, *datagram) {
                Some(kind) => ev.kind = kind,
                None => {
                    self.counters.decode_errors += 1;
                    return None;
                }
            }
        }
        let session = ev.session;
        match &ev.kind {
            RxKind::MessageArrived { header, payload } => match header.msg_type {
                MsgType::EagerMsg => match self.rbm.on_message(Some(session), header, payload) {
                    Ok(Admission::NoSlot) if self.caps.reliable => return Some(ev),
                    Ok(Admission::NoSlot) | Err(RbmError::TooLarge { .. }) => {
                        self.counters.eager_drops += 1;
                        self.rbm.note_seen(header.comm_id, header.src_rank, header.seq);
                    }
                    Ok(_) => {
                        self.counters.messages_received += 1;
                        self.counters.rx_payload_bytes += header.payload_len;
                    }
                    Err(RbmError::Wire(_)) => self.counters.decode_errors += 1,
                },
                MsgType::RndzInit | MsgType::RndzDone => {
                    self.rbm.note_seen(header.comm_id, header.src_rank, header.seq);
                    self.counters.messages_received += 1;
                    self.uc.notifications.push(Notification {
                        kind: header.msg_type,
                        comm_id: header.comm_id,
                        src_rank: header.src_rank,
                        tag: header.tag,
                        seq: header.seq,
                        remote_addr: header.remote_addr,
                        len: header.payload_len,
                    });
                }
                MsgType::RndzMsg => self.counters.decode_errors += 1,
            },
            RxKind::SegmentArrived { header, segment } => {
                if header.msg_type != MsgType::EagerMsg {
                    if segment.offset == 0 && segment.last && segment.seg_len as u64 == header.payload_len {
                        let kind = RxKind::MessageArrived { header: *header, payload: segment.body.clone() };
                        return self.dispatch(RxEvent { kind, ..ev });
                    }
                    self.counters.decode_errors += 1;
                    return None;
                }
                match self.rbm.on_segment(session, header, segment) {
                    Ok(Admission::NoSlot) if self.caps.reliable => return Some(ev),
                    Ok(Admission::NoSlot) | Err(RbmError::TooLarge { .. }) => {
                        self.rbm.discard(session, header, segment.msg_id);
                        self.counters.eager_drops += 1;
                    }
                    Ok(Admission::Ready(_)) => {
                        self.counters.messages_received += 1;
                        self.counters.rx_payload_bytes += header.payload_len;
                    }
                    Ok(Admission::InProgress(_) | Admission::Discarded) => {}
                    Err(RbmError::Wire(_)) => self.counters.decode_errors += 1,
                }
            }
            RxKind::WriteLanded { remote_addr, len } => {
                self.landed.insert(*remote_addr, *len);
                self.counters.writes_landed += 1;
                self.counters.rx_payload_bytes += len;
            }
            RxKind::Raw { .. } => unreachable!("decoded above"),
        }
        None
    }
}

fn decode_raw(bytes: &[u8], datagram: bool) -> Option<RxKind> {
    let header = decode_header(bytes).ok()?;
    let rest = bytes.get(SIGNATURE_LEN..)?;
    if datagram {
        let segment = Segment::decode(rest).ok()?;
        if segment.end() > header.payload_len {
            return None;
        }
        Some(RxKind::SegmentArrived { header, segment })
    } else {
        if rest.len() as u64 != header.payload_len {
            return None;
        }
        Some(RxKind::MessageArrived { header, payload: rest.to_vec() })
    }
}
