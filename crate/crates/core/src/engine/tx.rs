//! Tx system: wraps DMP and controller output in message signatures and hands
//! frames to the transport.

use std::collections::BTreeSet;

use crate::transport::Frame;
use crate::wire::{MessageSignature, MsgType};

use super::rbm::Admission;
use super::request::RequestId;
use super::{EngineError, Node};

#[derive(Debug, Clone)]
pub(crate) enum TxKind {
    Eager { tag: u32, payload: Vec<u8> },
    RndzInit { tag: u32, addr: u64 },
    RndzMsg { tag: u32, remote_addr: u64, payload: Vec<u8> },
}

#[derive(Debug, Clone)]
pub(crate) struct TxCommand {
    pub(crate) lane: RequestId,
    pub(crate) comm_id: u32,
    pub(crate) dst_rank: u32,
    pub(crate) kind: TxKind,
}

enum TxOutcome {
    Sent,
    Blocked,
    Failed(EngineError),
}

fn control(msg_type: MsgType, comm_id: u32, src: u32, dst: u32, tag: u32, seq: u32, addr: u64) -> MessageSignature {
    MessageSignature { msg_type, remote_addr: addr, ..MessageSignature::eager(comm_id, src, dst, tag, seq, 0) }
}

impl Node {
    pub(crate) fn tx_stage(&mut self) -> bool {
        let pending = std::mem::take(&mut self.tx_queue);
        let mut moved = false;
        let mut keep = std::collections::VecDeque::new();
        let mut blocked = BTreeSet::new();
        let mut failed: Vec<(RequestId, EngineError)> = Vec::new();
        for cmd in pending {
            if failed.iter().any(|(l, _)| *l == cmd.lane) {
                continue;
            }
            // later traffic to a blocked destination waits behind it
            if blocked.contains(&(cmd.comm_id, cmd.dst_rank)) {
                keep.push_back(cmd);
                continue;
            }
            match self.transmit_command(&cmd) {
                TxOutcome::Sent => moved = true,
                TxOutcome::Blocked => {
                    blocked.insert((cmd.comm_id, cmd.dst_rank));
                    keep.push_back(cmd);
                }
                TxOutcome::Failed(e) => {
                    failed.push((cmd.lane, e));
                    moved = true;
                }
            }
        }
        keep.append(&mut self.tx_queue);
        self.tx_queue = keep;
        for (lane, e) in failed {
            self.fail_request(lane, e);
        }
        moved
    }

    fn transmit_command(&mut self, cmd: &TxCommand) -> TxOutcome {
        let rdma = self.caps.rdma;
        let max_eager = self.config.rx_buffer_size;
        let Some(comm) = self.comms.get_mut(&cmd.comm_id) else {
            return TxOutcome::Failed(EngineError::UnknownComm(cmd.comm_id));
        };
        let me = comm.local_rank;
        let dst = cmd.dst_rank;
        let Some(&seq) = comm.tx_seq.get(dst as usize) else {
            return TxOutcome::Failed(EngineError::InvalidRequest(format!("rank {dst} outside communicator")));
        };
        if let TxKind::Eager { payload, .. } = &cmd.kind {
            if payload.len() as u64 > max_eager {
                return TxOutcome::Failed(EngineError::EagerTooLarge { len: payload.len() as u64, max: max_eager });
            }
        }
        if dst == me {
            let TxKind::Eager { tag, payload } = &cmd.kind else {
                return TxOutcome::Failed(EngineError::UnsupportedProtocol("rendezvous to the local rank".into()));
            };
            let hdr = MessageSignature::eager(cmd.comm_id, me, me, *tag, seq, payload.len() as u64);
            return match self.rbm.on_message(None, &hdr, payload) {
                Ok(Admission::NoSlot) => TxOutcome::Blocked,
                Ok(_) => {
                    let comm = self.comms.get_mut(&cmd.comm_id).expect("checked above");
                    comm.tx_seq[dst as usize] = seq.wrapping_add(1);
                    self.counters.messages_sent += 1;
                    self.counters.messages_received += 1;
                    self.counters.tx_payload_bytes += payload.len() as u64;
                    TxOutcome::Sent
                }
                Err(e) => TxOutcome::Failed(EngineError::InvalidRequest(e.to_string())),
            };
        }
        let Some(session) = comm.sessions[dst as usize] else {
            return TxOutcome::Failed(EngineError::InvalidRequest(format!("no session to rank {dst}")));
        };
        let comm_id = cmd.comm_id;
        let (frames, bytes) = match &cmd.kind {
            TxKind::Eager { tag, payload } => {
                let hdr = MessageSignature::eager(comm_id, me, dst, *tag, seq, payload.len() as u64);
                let f = if rdma { Frame::rdma_send(hdr, payload.clone()) } else { Frame::headered(hdr, payload.clone()) };
                (vec![f], payload.len() as u64)
            }
            TxKind::RndzInit { tag, addr } => {
                if !rdma {
                    return TxOutcome::Failed(EngineError::UnsupportedProtocol("rendezvous needs an RDMA transport".into()));
                }
                (vec![Frame::rdma_send(control(MsgType::RndzInit, comm_id, me, dst, *tag, seq, *addr), Vec::new())], 0)
            }
            TxKind::RndzMsg { tag, remote_addr, payload } => {
                if !rdma {
                    return TxOutcome::Failed(EngineError::UnsupportedProtocol("rendezvous needs an RDMA transport".into()));
                }
                let done = control(MsgType::RndzDone, comm_id, me, dst, *tag, seq, 0);
                (vec![Frame::rdma_write(*remote_addr, payload.clone()), Frame::rdma_send(done, Vec::new())], payload.len() as u64)
            }
        };
        for f in frames {
            if let Err(e) = self.transport.transmit(session, f) {
                return TxOutcome::Failed(e.into());
            }
        }
        let comm = self.comms.get_mut(&comm_id).expect("checked above");
        comm.tx_seq[dst as usize] = seq.wrapping_add(1);
        self.counters.messages_sent += 1;
        self.counters.tx_payload_bytes += bytes;
        TxOutcome::Sent
    }
}
