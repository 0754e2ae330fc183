//! Data movement processor.
//!
//! Each [`DmpInstruction`] names up to two operand slots, a result slot and a
//! function. A job resolves its memory slots (paying any translation
//! penalty), collects operand bytes from memory, the Rx buffer manager or a
//! stream port, runs them through the function and emits the result to
//! memory, the Tx stage or a stream port. Jobs from different requests
//! progress independently; the ordering rules below keep same-peer,
//! same-tag traffic in submission order.

use serde::{Deserialize, Serialize};

use crate::platform::{lock, Intent, Resolved};
use crate::time::SimTime;

use super::request::{Dtype, ReduceFn, RequestId, ANY};
use super::tx::{TxCommand, TxKind};
use super::{EngineError, Node};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotDescriptor {
    Memory { addr: u64, len: u64 },
    RxMatch { src: u32, tag: u32, len: u64 },
    StreamPort { port: u8, len: u64 },
    Network { dst: u32, tag: u32, remote_addr: Option<u64> },
    Empty,
}

impl SlotDescriptor {
    pub fn is_empty(&self) -> bool {
        matches!(self, SlotDescriptor::Empty)
    }

    fn len(&self) -> Option<u64> {
        match *self {
            SlotDescriptor::Memory { len, .. }
            | SlotDescriptor::RxMatch { len, .. }
            | SlotDescriptor::StreamPort { len, .. } => Some(len),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DmpFunc {
    Copy,
    Reduce(ReduceFn),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MsgKind {
    Eager,
    Rendezvous,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmpInstruction {
    pub comm_id: u32,
    pub dtype: Dtype,
    pub op0: SlotDescriptor,
    pub op1: SlotDescriptor,
    pub result: SlotDescriptor,
    pub func: DmpFunc,
    pub msg_kind: MsgKind,
}

impl DmpInstruction {
    pub fn nop() -> Self {
        DmpInstruction {
            comm_id: 0,
            dtype: Dtype::I32,
            op0: SlotDescriptor::Empty,
            op1: SlotDescriptor::Empty,
            result: SlotDescriptor::Empty,
            func: DmpFunc::None,
            msg_kind: MsgKind::None,
        }
    }

    pub fn copy(comm_id: u32, src: SlotDescriptor, result: SlotDescriptor, msg_kind: MsgKind) -> Self {
        DmpInstruction { comm_id, op0: src, result, func: DmpFunc::Copy, msg_kind, ..DmpInstruction::nop() }
    }

    pub fn reduce(
        comm_id: u32,
        func: ReduceFn,
        dtype: Dtype,
        a: SlotDescriptor,
        b: SlotDescriptor,
        result: SlotDescriptor,
        msg_kind: MsgKind,
    ) -> Self {
        DmpInstruction { comm_id, dtype, op0: a, op1: b, result, func: DmpFunc::Reduce(func), msg_kind }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidRequest(format!("microcode: {m}")));
        if matches!(self.result, SlotDescriptor::RxMatch { .. }) {
            return bad("RxMatch is only legal in operand slots");
        }
        if matches!(self.op0, SlotDescriptor::Network { .. }) || matches!(self.op1, SlotDescriptor::Network { .. }) {
            return bad("Network is only legal in the result slot");
        }
        let populated = [self.op0, self.op1].iter().filter(|s| !s.is_empty()).count();
        match self.func {
            DmpFunc::Copy if populated != 1 => return bad("COPY takes exactly one operand"),
            DmpFunc::Reduce(_) if populated != 2 => return bad("REDUCE takes two operands"),
            DmpFunc::None if populated != 0 || !self.result.is_empty() => return bad("NONE moves no data"),
            _ => {}
        }
        match (self.result, self.msg_kind) {
            (SlotDescriptor::Network { .. }, MsgKind::None) => bad("network result needs a message kind"),
            (SlotDescriptor::Network { remote_addr: None, .. }, MsgKind::Rendezvous) => {
                bad("rendezvous result needs a remote address")
            }
            (SlotDescriptor::Network { remote_addr: Some(_), .. }, MsgKind::Eager) => {
                bad("eager result cannot carry a remote address")
            }
            (SlotDescriptor::Network { .. }, _) | (_, MsgKind::None) => Ok(()),
            _ => bad("message kind without a network result"),
        }
    }

    pub(crate) fn streams_into(&self, port: u8) -> bool {
        matches!(self.result, SlotDescriptor::StreamPort { port: p, .. } if p == port)
    }

    pub(crate) fn streams_from(&self, port: u8) -> bool {
        [self.op0, self.op1].iter().any(|s| matches!(s, SlotDescriptor::StreamPort { port: p, .. } if *p == port))
    }
}

#[derive(Debug, Clone)]
enum Operand {
    Pending(SlotDescriptor),
    Partial { port: u8, len: u64, got: Vec<u8> },
    Data(Vec<u8>),
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Resolve,
    Gather,
    Emit,
}

#[derive(Debug, Clone)]
pub(crate) struct DmpJob {
    lane: RequestId,
    instr: DmpInstruction,
    phase: Phase,
    ops: [Operand; 2],
    write_target: Option<Resolved>,
    out: Vec<u8>,
    written: usize,
    stall_until: SimTime,
    deadline: Option<SimTime>,
}

impl DmpJob {
    fn pending_match(&self) -> Option<(u32, u32)> {
        self.ops.iter().find_map(|o| match o {
            Operand::Pending(SlotDescriptor::RxMatch { src, tag, .. }) => Some((*src, *tag)),
            _ => None,
        })
    }

    fn pending_network(&self) -> Option<u32> {
        match self.instr.result {
            SlotDescriptor::Network { dst, .. } if self.phase != Phase::Emit || self.written == 0 => Some(dst),
            _ => None,
        }
    }
}

fn overlaps(a: u32, b: u32) -> bool {
    a == b || a == ANY || b == ANY
}

#[derive(Debug, Default)]
pub(crate) struct Dmp {
    jobs: Vec<DmpJob>,
    pub(crate) completions: Vec<(RequestId, u64)>,
}

impl Dmp {
    pub(crate) fn len(&self) -> usize {
        self.jobs.len()
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.jobs.is_empty() && self.completions.is_empty()
    }

    pub(crate) fn issue(&mut self, lane: RequestId, instr: DmpInstruction) {
        let pending = |s: SlotDescriptor| if s.is_empty() { Operand::Empty } else { Operand::Pending(s) };
        let job = DmpJob {
            lane,
            instr,
            phase: Phase::Resolve,
            ops: [pending(instr.op0), pending(instr.op1)],
            write_target: None,
            out: Vec::new(),
            written: 0,
            stall_until: SimTime::ZERO,
            deadline: None,
        };
        let at = self.jobs.partition_point(|j| j.lane <= lane);
        self.jobs.insert(at, job);
    }

    pub(crate) fn abort(&mut self, lane: RequestId) {
        self.jobs.retain(|j| j.lane != lane);
        self.completions.retain(|(l, _)| *l != lane);
    }

    pub(crate) fn next_deadline(&self, now: SimTime) -> Option<SimTime> {
        self.jobs.iter().flat_map(|j| [Some(j.stall_until), j.deadline]).flatten().filter(|&t| t > now).min()
    }
}

enum Step {
    Blocked,
    Moved,
    Done(u64),
    Failed(EngineError),
}

impl Node {
    pub(crate) fn dmp_stage(&mut self) -> bool {
        let mut jobs = std::mem::take(&mut self.dmp.jobs);
        let mut moved = false;
        let mut failed = Vec::new();
        let mut i = 0;
        while i < jobs.len() {
            let (earlier, rest) = jobs.split_at_mut(i);
            let job = &mut rest[0];
            let mut finished = false;
            loop {
                match self.step_job(job, earlier) {
                    Step::Blocked => break,
                    Step::Moved => moved = true,
                    Step::Done(bytes) => {
                        self.dmp.completions.push((job.lane, bytes));
                        finished = true;
                        moved = true;
                        break;
                    }
                    Step::Failed(e) => {
                        failed.push((job.lane, e));
                        finished = true;
                        moved = true;
                        break;
                    }
                }
            }
            if finished {
                jobs.remove(i);
            } else {
                i += 1;
            }
        }
        // jobs issued while stepping (none today) would sit in self.dmp.jobs
        jobs.append(&mut self.dmp.jobs);
        jobs.sort_by_key(|j| j.lane);
        self.dmp.jobs = jobs;
        for (lane, e) in failed {
            self.fail_request(lane, e);
        }
        moved
    }

    fn step_job(&mut self, job: &mut DmpJob, earlier: &[DmpJob]) -> Step {
        let now = self.now();
        match job.phase {
            Phase::Resolve => {
                let plat = self.platform.clone();
                let mut p = lock(&plat);
                let mut penalty = crate::time::SimDuration::ZERO;
                for op in job.ops.iter_mut() {
                    if let Operand::Pending(SlotDescriptor::Memory { addr, len }) = *op {
                        if len == 0 {
                            *op = Operand::Data(Vec::new());
                            continue;
                        }
                        match p.resolve(addr, len, Intent::Read) {
                            Ok(r) => {
                                penalty += r.penalty;
                                *op = Operand::Data(p.read_resolved(&r).to_vec());
                            }
                            Err(e) => return Step::Failed(e.into()),
                        }
                    }
                }
                if let SlotDescriptor::Memory { addr, len } = job.instr.result {
                    if len > 0 {
                        match p.resolve(addr, len, Intent::Write) {
                            Ok(r) => {
                                penalty += r.penalty;
                                job.write_target = Some(r);
                            }
                            Err(e) => return Step::Failed(e.into()),
                        }
                    }
                }
                job.stall_until = now + penalty;
                job.phase = Phase::Gather;
                Step::Moved
            }
            Phase::Gather => {
                if now < job.stall_until {
                    return Step::Blocked;
                }
                let mut progressed = false;
                for k in 0..2 {
                    match job.ops[k].clone() {
                        Operand::Pending(SlotDescriptor::RxMatch { src, tag, len }) => {
                            let comm = job.instr.comm_id;
                            let blocked_by_older = earlier.iter().any(|e| {
                                e.instr.comm_id == comm
                                    && e.pending_match().is_some_and(|(s, t)| overlaps(s, src) && overlaps(t, tag))
                            });
                            if blocked_by_older {
                                continue;
                            }
                            match self.rbm.match_claim(comm, src, tag) {
                                Some(idx) => {
                                    let got = self.rbm.slot(idx).meta.map(|m| m.len).unwrap_or(0);
                                    let data = self.rbm.take_payload(idx);
                                    self.rbm.release(idx);
                                    if got != len {
                                        return Step::Failed(EngineError::LengthMismatch { expected: len, got });
                                    }
                                    job.ops[k] = Operand::Data(data);
                                    job.deadline = None;
                                    progressed = true;
                                }
                                None => {
                                    if let Some(t) = self.rx_timeout() {
                                        let d = *job.deadline.get_or_insert(now + t);
                                        if now >= d {
                                            return Step::Failed(EngineError::Timeout(format!(
                                                "no message from rank {src} tag {tag:#x} on communicator {comm}"
                                            )));
                                        }
                                    }
                                }
                            }
                        }
                        Operand::Pending(SlotDescriptor::StreamPort { port, len }) => {
                            job.ops[k] = Operand::Partial { port, len, got: Vec::new() };
                            progressed = true;
                        }
                        Operand::Partial { port, len, mut got } => {
                            let Some(p) = self.ports.get_mut(port as usize) else {
                                return Step::Failed(EngineError::UnknownPort(port));
                            };
                            let chunk = p.take_input((len - got.len() as u64) as usize);
                            if !chunk.is_empty() {
                                progressed = true;
                            }
                            got.extend(chunk);
                            job.ops[k] =
                                if got.len() as u64 == len { Operand::Data(got) } else { Operand::Partial { port, len, got } };
                        }
                        Operand::Pending(other) => {
                            return Step::Failed(EngineError::InvalidRequest(format!("operand {other:?} cannot be read")))
                        }
                        Operand::Data(_) | Operand::Empty => {}
                    }
                }
                if job.ops.iter().all(|o| matches!(o, Operand::Data(_) | Operand::Empty)) {
                    match self.compute(job) {
                        Ok(out) => job.out = out,
                        Err(e) => return Step::Failed(e),
                    }
                    job.phase = Phase::Emit;
                    return Step::Moved;
                }
                if progressed {
                    Step::Moved
                } else {
                    Step::Blocked
                }
            }
            Phase::Emit => self.emit(job, earlier, now),
        }
    }

    fn compute(&mut self, job: &DmpJob) -> Result<Vec<u8>, EngineError> {
        let take = |o: &Operand| match o {
            Operand::Data(d) => Some(d.clone()),
            _ => None,
        };
        let (a, b) = (take(&job.ops[0]), take(&job.ops[1]));
        let out = match job.instr.func {
            DmpFunc::None => Vec::new(),
            DmpFunc::Copy => a.or(b).unwrap_or_default(),
            DmpFunc::Reduce(f) => {
                let (a, b) = (a.unwrap_or_default(), b.unwrap_or_default());
                let dest = self.plugins.dest_for(f).ok_or(super::PluginError::NoRoute(u8::MAX))?;
                let mut plugin = self.plugins.binary(dest, job.instr.dtype)?;
                self.counters.plugin_payload_bytes += (a.len() + b.len()) as u64;
                let mut out = Vec::with_capacity(a.len());
                for (ca, cb) in a.chunks(4096).zip(b.chunks(4096)) {
                    plugin.push_a(ca);
                    plugin.push_b(cb);
                    out.extend(plugin.pull());
                }
                if a.len() != b.len() {
                    plugin.push_a(&a[a.len().min(b.len())..]);
                    plugin.push_b(&b[a.len().min(b.len())..]);
                }
                out.extend(plugin.finish()?);
                out
            }
        };
        if let Some(len) = job.instr.result.len() {
            if len != out.len() as u64 {
                return Err(EngineError::LengthMismatch { expected: len, got: out.len() as u64 });
            }
        }
        self.counters.dmp_payload_bytes += out.len() as u64;
        Ok(out)
    }

    fn emit(&mut self, job: &mut DmpJob, earlier: &[DmpJob], now: SimTime) -> Step {
        let bytes = job.out.len() as u64;
        match job.instr.result {
            SlotDescriptor::Empty => Step::Done(bytes),
            SlotDescriptor::Memory { len: 0, .. } => Step::Done(0),
            SlotDescriptor::Memory { .. } => {
                let r = job.write_target.expect("resolved in the first phase");
                lock(&self.platform).write_resolved(&r, &job.out);
                Step::Done(bytes)
            }
            SlotDescriptor::Network { dst, tag, remote_addr } => {
                let comm = job.instr.comm_id;
                let older_pending =
                    earlier.iter().any(|e| e.instr.comm_id == comm && e.pending_network() == Some(dst));
                if older_pending || self.tx_queue.len() >= self.config.tx_queue_depth {
                    return self.backpressure(job, now, None);
                }
                let payload = std::mem::take(&mut job.out);
                let kind = match (job.instr.msg_kind, remote_addr) {
                    (super::MsgKind::Rendezvous, Some(addr)) => TxKind::RndzMsg { tag, remote_addr: addr, payload },
                    _ => TxKind::Eager { tag, payload },
                };
                self.tx_queue.push_back(TxCommand { lane: job.lane, comm_id: comm, dst_rank: dst, kind });
                job.written = 1;
                Step::Done(bytes)
            }
            SlotDescriptor::StreamPort { port, .. } => {
                let Some(p) = self.ports.get_mut(port as usize) else {
                    return Step::Failed(EngineError::UnknownPort(port));
                };
                let n = p.push_output(&job.out[job.written..]);
                job.written += n;
                if job.written == job.out.len() {
                    return Step::Done(bytes);
                }
                if n > 0 {
                    job.deadline = None;
                    return Step::Moved;
                }
                self.backpressure(job, now, Some(port))
            }
            SlotDescriptor::RxMatch { .. } => Step::Failed(EngineError::InvalidRequest("RxMatch result".into())),
        }
    }

    fn backpressure(&self, job: &mut DmpJob, now: SimTime, port: Option<u8>) -> Step {
        let d = *job.deadline.get_or_insert(now + self.config.stall_timeout);
        if now >= d {
            return Step::Failed(match port {
                Some(p) => EngineError::StreamStall(p),
                None => EngineError::Timeout("result slot stayed blocked".into()),
            });
        }
        Step::Blocked
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem(addr: u64, len: u64) -> SlotDescriptor {
        SlotDescriptor::Memory { addr, len }
    }

    #[test]
    fn slot_legality() {
        assert!(DmpInstruction::nop().validate().is_ok());
        let net = SlotDescriptor::Network { dst: 1, tag: 0, remote_addr: None };
        assert!(DmpInstruction::copy(0, mem(1 << 32, 4), net, MsgKind::Eager).validate().is_ok());
        assert!(DmpInstruction::copy(0, net, mem(1 << 32, 4), MsgKind::None).validate().is_err());
        let rx = SlotDescriptor::RxMatch { src: 1, tag: 0, len: 4 };
        assert!(DmpInstruction::copy(0, mem(1 << 32, 4), rx, MsgKind::None).validate().is_err());
        let one = DmpInstruction::reduce(0, ReduceFn::Sum, Dtype::I32, mem(1 << 32, 4), SlotDescriptor::Empty, mem(2 << 32, 4), MsgKind::None);
        assert!(one.validate().is_err());
        let two = DmpInstruction { op1: mem(1 << 32, 4), ..DmpInstruction::copy(0, mem(1 << 32, 4), mem(2 << 32, 4), MsgKind::None) };
        assert!(two.validate().is_err());
        assert!(DmpInstruction::copy(0, mem(1 << 32, 4), net, MsgKind::None).validate().is_err());
        let rn = SlotDescriptor::Network { dst: 1, tag: 0, remote_addr: None };
        assert!(DmpInstruction::copy(0, mem(1 << 32, 4), rn, MsgKind::Rendezvous).validate().is_err());
    }
}
