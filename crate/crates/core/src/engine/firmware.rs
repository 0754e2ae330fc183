//! Embedded-controller firmware loop.
//!
//! The controller admits host commands, asks the collective procedures for a
//! program (a sequence of [`FwOp`]s), and steps programs: DMP instructions go
//! to the DMP, rendezvous handshakes go through the Tx system and the
//! notification queue. It never reads or writes payload bytes.

use serde::Serialize;

use crate::collectives::{self, PlanContext};
use crate::platform::{lock, Buffer, Intent, PlatformHandle};
use crate::time::SimTime;
use crate::wire::MsgType;

use super::dmp::{DmpInstruction, MsgKind, SlotDescriptor};
use super::request::{Op, RequestId, RequestStatus, ANY};
use super::tx::{TxCommand, TxKind};
use super::{EngineError, Node};

/// One step of a firmware program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FwOp {
    /// Run one microcode instruction and wait for its completion.
    Dmp(DmpInstruction),
    /// Publish `addr` to `peer` with an RNDZ_INIT.
    RndzPost { peer: u32, tag: u32, addr: u64, len: u64 },
    /// Wait for `peer`'s RNDZ_INIT, then write `[addr, addr+len)` to it.
    RndzSend { peer: u32, tag: u32, addr: u64, len: u64 },
    /// Wait for `peer`'s RNDZ_DONE for the buffer posted at `addr`.
    RndzAwaitDone { peer: u32, tag: u32, addr: u64, len: u64 },
}

/// An RNDZ_INIT or RNDZ_DONE queued for the controller by the Rx system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Notification {
    pub kind: MsgType,
    pub comm_id: u32,
    pub src_rank: u32,
    pub tag: u32,
    pub seq: u32,
    pub remote_addr: u64,
    pub len: u64,
}

#[derive(Debug)]
pub(crate) struct Program {
    pub(crate) id: RequestId,
    comm_id: u32,
    collective: bool,
    ops: Vec<FwOp>,
    pc: usize,
    in_dmp: bool,
    stall_until: SimTime,
    scratch: Vec<Buffer>,
    bytes: u64,
}

impl Program {
    pub(crate) fn reads_port(&self, port: u8) -> bool {
        self.ops[self.pc.min(self.ops.len())..].iter().any(|op| matches!(op, FwOp::Dmp(i) if i.streams_from(port)))
    }

    pub(crate) fn writes_port(&self, port: u8) -> bool {
        self.ops[self.pc.min(self.ops.len())..].iter().any(|op| matches!(op, FwOp::Dmp(i) if i.streams_into(port)))
    }
}

#[derive(Debug, Default)]
pub(crate) struct Controller {
    pub(crate) active: Vec<Program>,
    pub(crate) notifications: Vec<Notification>,
}

impl Controller {
    pub(crate) fn abort(&mut self, id: RequestId, platform: &PlatformHandle) {
        if let Some(i) = self.active.iter().position(|p| p.id == id) {
            let p = self.active.remove(i);
            let mut plat = lock(platform);
            for b in &p.scratch {
                plat.free(b);
            }
        }
    }

    pub(crate) fn next_deadline(&self, now: SimTime) -> Option<SimTime> {
        self.active.iter().map(|p| p.stall_until).filter(|&t| t > now).min()
    }

    fn take_notification(&mut self, kind: MsgType, comm_id: u32, peer: u32, tag: u32) -> Option<Notification> {
        let i = self
            .notifications
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == kind && n.comm_id == comm_id && n.src_rank == peer)
            .filter(|(_, n)| n.tag == tag || n.tag == ANY || tag == ANY)
            .min_by_key(|(_, n)| n.seq)
            .map(|(i, _)| i)?;
        Some(self.notifications.remove(i))
    }
}

enum Step {
    Blocked,
    Moved,
    Finished,
    Failed(EngineError),
}

impl Node {
    pub(crate) fn uc_stage(&mut self) -> bool {
        let mut moved = self.admit();
        let mut i = 0;
        while i < self.uc.active.len() {
            let mut done = false;
            loop {
                match self.step_program(i) {
                    Step::Blocked => break,
                    Step::Moved => moved = true,
                    Step::Finished => {
                        let p = self.uc.active.remove(i);
                        {
                            let mut plat = lock(&self.platform);
                            for b in &p.scratch {
                                plat.free(b);
                            }
                        }
                        self.complete_request(p.id, p.bytes);
                        done = true;
                        moved = true;
                        break;
                    }
                    Step::Failed(e) => {
                        let id = self.uc.active[i].id;
                        self.fail_request(id, e);
                        done = true;
                        moved = true;
                        break;
                    }
                }
            }
            if !done {
                i += 1;
            }
        }
        moved
    }

    fn admit(&mut self) -> bool {
        let now = self.now();
        let mut moved = false;
        while let Some(cmd) = self.commands.front() {
            if cmd.visible_at > now || self.uc.active.len() >= self.config.max_active_programs {
                break;
            }
            let collective = cmd.req.op.is_collective();
            if self.uc.active.iter().any(|p| p.collective) || (collective && !self.uc.active.is_empty()) {
                break;
            }
            let cmd = self.commands.pop_front().expect("front exists");
            moved = true;
            let planned = if cmd.req.op == Op::Nop {
                Ok(collectives::Plan { ops: vec![FwOp::Dmp(DmpInstruction::nop())], scratch: Vec::new() })
            } else {
                let ctx = PlanContext {
                    rdma: self.caps.rdma,
                    eager_enabled: self.config.eager_enabled,
                    eager_max: self.rbm.max_capacity(),
                };
                match self.comms.get_mut(&cmd.req.comm_id) {
                    Some(comm) => collectives::plan(comm, &cmd.req, &ctx, &mut lock(&self.platform)),
                    None => Err(EngineError::UnknownComm(cmd.req.comm_id)),
                }
            };
            match planned {
                Ok(plan) => {
                    self.requests.insert(cmd.id, RequestStatus::Running);
                    self.uc.active.push(Program {
                        id: cmd.id,
                        comm_id: cmd.req.comm_id,
                        collective,
                        ops: plan.ops,
                        pc: 0,
                        in_dmp: false,
                        stall_until: SimTime::ZERO,
                        scratch: plan.scratch,
                        bytes: 0,
                    });
                }
                Err(e) => self.fail_request(cmd.id, e),
            }
        }
        moved
    }

    fn step_program(&mut self, i: usize) -> Step {
        let now = self.now();
        let p = &mut self.uc.active[i];
        if p.in_dmp {
            let Some(k) = self.dmp.completions.iter().position(|(l, _)| *l == p.id) else { return Step::Blocked };
            let (_, bytes) = self.dmp.completions.remove(k);
            p.bytes += bytes;
            p.in_dmp = false;
            p.pc += 1;
            return Step::Moved;
        }
        if now < p.stall_until {
            return Step::Blocked;
        }
        let Some(&op) = p.ops.get(p.pc) else { return Step::Finished };
        let (id, comm_id) = (p.id, p.comm_id);
        match op {
            FwOp::Dmp(instr) => {
                if self.dmp.len() >= self.config.dmp_queue_depth {
                    return Step::Blocked;
                }
                self.dmp.issue(id, instr);
                self.uc.active[i].in_dmp = true;
                Step::Moved
            }
            FwOp::RndzPost { peer, tag, addr, len } => {
                if self.tx_queue.len() >= self.config.tx_queue_depth {
                    return Step::Blocked;
                }
                let penalty = match lock(&self.platform).resolve(addr, len, Intent::Write) {
                    Ok(r) => r.penalty,
                    Err(e) => return Step::Failed(e.into()),
                };
                self.landed.remove(&addr);
                self.tx_queue.push_back(TxCommand { lane: id, comm_id, dst_rank: peer, kind: TxKind::RndzInit { tag, addr } });
                let p = &mut self.uc.active[i];
                p.stall_until = now + penalty;
                p.pc += 1;
                Step::Moved
            }
            FwOp::RndzSend { peer, tag, addr, len } => {
                if self.dmp.len() >= self.config.dmp_queue_depth {
                    return Step::Blocked;
                }
                let Some(n) = self.uc.take_notification(MsgType::RndzInit, comm_id, peer, tag) else {
                    return Step::Blocked;
                };
                let write = DmpInstruction::copy(
                    comm_id,
                    SlotDescriptor::Memory { addr, len },
                    SlotDescriptor::Network { dst: peer, tag, remote_addr: Some(n.remote_addr) },
                    MsgKind::Rendezvous,
                );
                self.dmp.issue(id, write);
                self.uc.active[i].in_dmp = true;
                Step::Moved
            }
            FwOp::RndzAwaitDone { peer, tag, addr, len } => {
                if self.uc.take_notification(MsgType::RndzDone, comm_id, peer, tag).is_none() {
                    return Step::Blocked;
                }
                let got = self.landed.remove(&addr).unwrap_or(0);
                if got != len {
                    return Step::Failed(EngineError::LengthMismatch { expected: len, got });
                }
                let p = &mut self.uc.active[i];
                p.bytes += len;
                p.pc += 1;
                Step::Moved
            }
        }
    }
}
