//! Lowering of requests into firmware programs.
//!
//! Every rank lowers the same call independently; the schedules below are
//! written so that each rank's sequential program is consistent with its
//! peers' (a receive is always posted before the matching sender can need
//! it), which keeps both protocols deadlock-free.

use crate::engine::{
    CcloRequest, DataEndpoint, DmpInstruction, Dtype, EngineError, FwOp, MsgKind, Op, ReduceFn, SlotDescriptor, ANY,
};
use crate::platform::{Buffer, Location, Platform};

use super::{select_algorithm, Algorithm, Communicator, Protocol};

/// What the planner needs to know about the node it plans for.
#[derive(Clone, Copy, Debug)]
pub struct PlanContext {
    pub rdma: bool,
    pub eager_enabled: bool,
    /// Largest eager payload a peer can buffer.
    pub eager_max: u64,
}

#[derive(Debug, Default)]
pub struct Plan {
    pub ops: Vec<FwOp>,
    /// Device buffers owned by the program and freed when it ends.
    pub scratch: Vec<Buffer>,
}

fn mem(addr: u64, len: u64) -> SlotDescriptor {
    SlotDescriptor::Memory { addr, len }
}

fn overlaps(a: u64, alen: u64, b: u64, blen: u64) -> bool {
    a < b + blen && b < a + alen
}

struct Lower<'a> {
    plat: &'a mut Platform,
    comm_id: u32,
    dtype: Dtype,
    func: ReduceFn,
    proto: Protocol,
    tag: u32,
    eager_max: u64,
    plan: Plan,
    epilogue: Vec<FwOp>,
}

impl Lower<'_> {
    fn alloc(&mut self, len: u64) -> Result<u64, EngineError> {
        let b = self.plat.alloc(Location::Device, len.max(1))?;
        self.plan.scratch.push(b);
        Ok(b.base_vaddr())
    }

    fn dmp(&mut self, i: DmpInstruction) -> Result<(), EngineError> {
        i.validate()?;
        self.plan.ops.push(FwOp::Dmp(i));
        Ok(())
    }

    fn eager_fits(&self, len: u64) -> Result<(), EngineError> {
        if len > self.eager_max {
            return Err(EngineError::EagerTooLarge { len, max: self.eager_max });
        }
        Ok(())
    }

    fn net(&self, peer: u32) -> SlotDescriptor {
        SlotDescriptor::Network { dst: peer, tag: self.tag, remote_addr: None }
    }

    fn rx(&self, peer: u32, len: u64) -> SlotDescriptor {
        SlotDescriptor::RxMatch { src: peer, tag: self.tag, len }
    }

    /// Source endpoint as a memory address, staging a stream through scratch.
    fn source(&mut self, ep: DataEndpoint, len: u64) -> Result<u64, EngineError> {
        match ep {
            DataEndpoint::Memory(a) => Ok(a),
            DataEndpoint::Stream(port) => {
                let s = self.alloc(len)?;
                self.dmp(DmpInstruction::copy(self.comm_id, SlotDescriptor::StreamPort { port, len }, mem(s, len), MsgKind::None))?;
                Ok(s)
            }
            DataEndpoint::None => Err(EngineError::InvalidRequest("missing source endpoint".into())),
        }
    }

    /// Destination endpoint as a memory address; a stream gets a scratch
    /// buffer drained to the port at the end of the program.
    fn sink(&mut self, ep: DataEndpoint, len: u64) -> Result<u64, EngineError> {
        match ep {
            DataEndpoint::Memory(a) => Ok(a),
            DataEndpoint::Stream(port) => {
                let s = self.alloc(len)?;
                let i = DmpInstruction::copy(self.comm_id, mem(s, len), SlotDescriptor::StreamPort { port, len }, MsgKind::None);
                i.validate()?;
                self.epilogue.push(FwOp::Dmp(i));
                Ok(s)
            }
            DataEndpoint::None => Err(EngineError::InvalidRequest("missing destination endpoint".into())),
        }
    }

    fn send(&mut self, peer: u32, addr: u64, len: u64) -> Result<(), EngineError> {
        match self.proto {
            Protocol::Eager => {
                self.eager_fits(len)?;
                self.dmp(DmpInstruction::copy(self.comm_id, mem(addr, len), self.net(peer), MsgKind::Eager))
            }
            Protocol::Rendezvous => {
                self.plan.ops.push(FwOp::RndzSend { peer, tag: self.tag, addr, len });
                Ok(())
            }
        }
    }

    fn post(&mut self, peer: u32, addr: u64, len: u64) {
        self.plan.ops.push(FwOp::RndzPost { peer, tag: self.tag, addr, len });
    }

    fn await_done(&mut self, peer: u32, addr: u64, len: u64) {
        self.plan.ops.push(FwOp::RndzAwaitDone { peer, tag: self.tag, addr, len });
    }

    fn recv(&mut self, peer: u32, addr: u64, len: u64) -> Result<(), EngineError> {
        match self.proto {
            Protocol::Eager => {
                self.eager_fits(len)?;
                self.dmp(DmpInstruction::copy(self.comm_id, self.rx(peer, len), mem(addr, len), MsgKind::None))
            }
            Protocol::Rendezvous => {
                self.post(peer, addr, len);
                self.await_done(peer, addr, len);
                Ok(())
            }
        }
    }

    fn copy(&mut self, src: u64, dst: u64, len: u64) -> Result<(), EngineError> {
        if src == dst {
            return Ok(());
        }
        self.dmp(DmpInstruction::copy(self.comm_id, mem(src, len), mem(dst, len), MsgKind::None))
    }

    fn reduce_local(&mut self, a: u64, b: u64, out: u64, len: u64) -> Result<(), EngineError> {
        self.dmp(DmpInstruction::reduce(self.comm_id, self.func, self.dtype, mem(a, len), mem(b, len), mem(out, len), MsgKind::None))
    }

    /// `out = recv(peer) ⊕ local` when `recv_first`, else `local ⊕ recv(peer)`.
    /// `out` is a memory address or, with `to_peer`, the next hop.
    fn fold(&mut self, peer: u32, local: u64, out: Target, recv_first: bool, len: u64) -> Result<(), EngineError> {
        match self.proto {
            Protocol::Eager => {
                self.eager_fits(len)?;
                let (rx, loc) = (self.rx(peer, len), mem(local, len));
                let (a, b) = if recv_first { (rx, loc) } else { (loc, rx) };
                let (result, kind) = match out {
                    Target::Mem(o) => (mem(o, len), MsgKind::None),
                    Target::Peer(next) => (self.net(next), MsgKind::Eager),
                };
                self.dmp(DmpInstruction::reduce(self.comm_id, self.func, self.dtype, a, b, result, kind))
            }
            Protocol::Rendezvous => {
                let tmp = self.alloc(len)?;
                self.recv(peer, tmp, len)?;
                let (a, b) = if recv_first { (tmp, local) } else { (local, tmp) };
                match out {
                    Target::Mem(o) => self.reduce_local(a, b, o, len),
                    Target::Peer(next) => {
                        let acc = self.alloc(len)?;
                        self.reduce_local(a, b, acc, len)?;
                        self.send(next, acc, len)
                    }
                }
            }
        }
    }

    /// Passes one message from `prev` on to `next`.
    fn forward(&mut self, prev: u32, next: u32, len: u64) -> Result<(), EngineError> {
        match self.proto {
            Protocol::Eager => {
                self.eager_fits(len)?;
                self.dmp(DmpInstruction::copy(self.comm_id, self.rx(prev, len), self.net(next), MsgKind::Eager))
            }
            Protocol::Rendezvous => {
                let tmp = self.alloc(len)?;
                self.recv(prev, tmp, len)?;
                self.send(next, tmp, len)
            }
        }
    }

    fn finish(mut self) -> Plan {
        if self.plan.ops.is_empty() && self.epilogue.is_empty() {
            self.plan.ops.push(FwOp::Dmp(DmpInstruction::nop()));
        }
        self.plan.ops.append(&mut self.epilogue);
        self.plan
    }
}

#[derive(Clone, Copy)]
enum Target {
    Mem(u64),
    Peer(u32),
}

/// Children (ascending) and parent of vrank `v` in the binomial tree over `p`.
fn binomial(v: u32, p: u32) -> (Vec<u32>, Option<u32>) {
    let mut children = Vec::new();
    let mut mask = 1u32;
    while mask < p {
        if v & mask != 0 {
            return (children, Some(v - mask));
        }
        if v + mask < p {
            children.push(v + mask);
        }
        mask <<= 1;
    }
    (children, None)
}

fn subtree_size(v: u32, p: u32) -> u32 {
    if v == 0 {
        p
    } else {
        (1u32 << v.trailing_zeros()).min(p - v)
    }
}

fn ceil_log2(p: u32) -> u32 {
    32 - (p.max(1) - 1).leading_zeros()
}

/// Builds the firmware program for `req` on this rank.
pub fn plan(comm: &mut Communicator, req: &CcloRequest, ctx: &PlanContext, plat: &mut Platform) -> Result<Plan, EngineError> {
    let mut proto = comm.algo.protocol;
    let self_p2p = matches!(req.op, Op::Send | Op::Recv) && req.peer == comm.local_rank;
    if req.op == Op::Barrier || self_p2p {
        proto = Protocol::Eager;
    }
    if proto == Protocol::Eager && !ctx.eager_enabled {
        return Err(EngineError::UnsupportedProtocol("the eager protocol is disabled".into()));
    }
    let tag = if req.op.is_collective() { comm.next_collective_tag() } else { req.tag };
    let algo = if self_p2p {
        Algorithm::Direct
    } else {
        select_algorithm(req.op, req.bytes(), comm.size, proto, &comm.algo, ctx.rdma)?
    };
    let mut l = Lower {
        plat,
        comm_id: comm.comm_id,
        dtype: req.dtype,
        func: req.reduce_fn,
        proto,
        tag,
        eager_max: ctx.eager_max,
        plan: Plan::default(),
        epilogue: Vec::new(),
    };
    let p = comm.size;
    let me = comm.local_rank;
    let n = req.bytes();
    let root = req.root;
    let v = (me + p - root) % p;
    let rank = |w: u32| (w + root) % p;

    match req.op {
        Op::Nop => {}
        Op::Send => send_p2p(&mut l, req, n)?,
        Op::Recv => recv_p2p(&mut l, req, n)?,
        Op::Barrier => {
            let z = mem(0, 0);
            if me == 0 {
                for i in 1..p {
                    l.dmp(DmpInstruction::copy(l.comm_id, l.rx(i, 0), z, MsgKind::None))?;
                }
                for i in 1..p {
                    l.dmp(DmpInstruction::copy(l.comm_id, z, l.net(i), MsgKind::Eager))?;
                }
            } else {
                l.dmp(DmpInstruction::copy(l.comm_id, z, l.net(0), MsgKind::Eager))?;
                l.dmp(DmpInstruction::copy(l.comm_id, l.rx(0, 0), z, MsgKind::None))?;
            }
        }
        Op::Bcast => {
            let buf = if v == 0 { l.source(req.src, n)? } else { l.sink(req.dst, n)? };
            match algo {
                Algorithm::RecursiveDoubling => {
                    let mut start = 0;
                    if v != 0 {
                        let k = 31 - v.leading_zeros();
                        l.recv(rank(v - (1 << k)), buf, n)?;
                        start = k + 1;
                    }
                    for k in start..ceil_log2(p) {
                        let t = v + (1 << k);
                        if t < p {
                            l.send(rank(t), buf, n)?;
                        }
                    }
                }
                _ => {
                    if v == 0 {
                        for k in 1..p {
                            l.send(rank(k), buf, n)?;
                        }
                    } else {
                        l.recv(root, buf, n)?;
                    }
                }
            }
        }
        Op::Reduce => {
            let own = l.source(req.src, n)?;
            let out = if v == 0 { Some(l.sink(req.dst, n)?) } else { None };
            if p == 1 {
                l.copy(own, out.expect("root"), n)?;
            } else {
                match algo {
                    Algorithm::Ring => reduce_ring(&mut l, v, p, &rank, own, out, n)?,
                    Algorithm::AllToOne => reduce_all_to_one(&mut l, me, p, root, own, out, n)?,
                    _ => reduce_tree(&mut l, v, p, &rank, own, out, n)?,
                }
            }
        }
        Op::Gather => {
            let own = l.source(req.src, n)?;
            let out = if v == 0 { Some(l.sink(req.dst, n * p as u64)?) } else { None };
            if p == 1 {
                l.copy(own, out.expect("root"), n)?;
            } else {
                match algo {
                    Algorithm::Ring => gather_ring(&mut l, v, p, &rank, own, out, n)?,
                    Algorithm::AllToOne => gather_all_to_one(&mut l, me, p, root, own, out, n)?,
                    _ => gather_tree(&mut l, v, p, root, &rank, own, out, n)?,
                }
            }
        }
        Op::AllToAll => {
            let total = n * p as u64;
            let mut src = l.source(req.src, total)?;
            let dst = l.sink(req.dst, total)?;
            if p > 1 && overlaps(src, total, dst, total) {
                let s = l.alloc(total)?;
                l.copy(src, s, total)?;
                src = s;
            }
            let block = |base: u64, i: u32| base + i as u64 * n;
            l.copy(block(src, me), block(dst, me), n)?;
            match l.proto {
                Protocol::Eager => {
                    for k in 1..p {
                        let d = (me + k) % p;
                        l.send(d, block(src, d), n)?;
                    }
                    for k in 1..p {
                        let s = (me + p - k) % p;
                        l.recv(s, block(dst, s), n)?;
                    }
                }
                Protocol::Rendezvous => {
                    for k in 1..p {
                        let s = (me + p - k) % p;
                        l.post(s, block(dst, s), n);
                    }
                    for k in 1..p {
                        let d = (me + k) % p;
                        l.send(d, block(src, d), n)?;
                    }
                    for k in 1..p {
                        let s = (me + p - k) % p;
                        l.await_done(s, block(dst, s), n);
                    }
                }
            }
        }
    }
    Ok(l.finish())
}

fn send_p2p(l: &mut Lower, req: &CcloRequest, n: u64) -> Result<(), EngineError> {
    if req.peer == ANY {
        return Err(EngineError::InvalidRequest("send needs an explicit peer".into()));
    }
    match (l.proto, req.src) {
        (Protocol::Eager, DataEndpoint::Stream(port)) => {
            l.eager_fits(n)?;
            l.dmp(DmpInstruction::copy(l.comm_id, SlotDescriptor::StreamPort { port, len: n }, l.net(req.peer), MsgKind::Eager))
        }
        (_, ep) => {
            let a = l.source(ep, n)?;
            l.send(req.peer, a, n)
        }
    }
}

fn recv_p2p(l: &mut Lower, req: &CcloRequest, n: u64) -> Result<(), EngineError> {
    match (l.proto, req.dst) {
        (Protocol::Eager, DataEndpoint::Stream(port)) => {
            l.eager_fits(n)?;
            l.dmp(DmpInstruction::copy(l.comm_id, l.rx(req.peer, n), SlotDescriptor::StreamPort { port, len: n }, MsgKind::None))
        }
        (Protocol::Rendezvous, _) if req.peer == ANY => {
            Err(EngineError::InvalidRequest("a rendezvous receive needs an explicit source".into()))
        }
        (_, ep) => {
            let a = l.sink(ep, n)?;
            l.recv(req.peer, a, n)
        }
    }
}

/// Left fold along root+1, root+2, ..., root.
fn reduce_ring(l: &mut Lower, v: u32, p: u32, rank: &dyn Fn(u32) -> u32, own: u64, out: Option<u64>, n: u64) -> Result<(), EngineError> {
    let next = rank((v + 1) % p);
    let prev = rank((v + p - 1) % p);
    match v {
        1 => l.send(next, own, n),
        0 => l.fold(prev, own, Target::Mem(out.expect("root")), true, n),
        _ => l.fold(prev, own, Target::Peer(next), true, n),
    }
}

/// Everyone sends to the root, which folds in rank order 0..P-1.
fn reduce_all_to_one(l: &mut Lower, me: u32, p: u32, root: u32, own: u64, out: Option<u64>, n: u64) -> Result<(), EngineError> {
    let Some(out) = out else { return l.send(root, own, n) };
    let own = if overlaps(own, n, out, n) {
        let s = l.alloc(n)?;
        l.copy(own, s, n)?;
        s
    } else {
        own
    };
    match l.proto {
        Protocol::Eager => {
            l.eager_fits(n)?;
            let operand = |l: &Lower, i: u32| if i == me { mem(own, n) } else { l.rx(i, n) };
            let (a, b) = (operand(l, 0), operand(l, 1));
            l.dmp(DmpInstruction::reduce(l.comm_id, l.func, l.dtype, a, b, mem(out, n), MsgKind::None))?;
            for i in 2..p {
                let b = operand(l, i);
                l.dmp(DmpInstruction::reduce(l.comm_id, l.func, l.dtype, mem(out, n), b, mem(out, n), MsgKind::None))?;
            }
        }
        Protocol::Rendezvous => {
            let mut loc = Vec::with_capacity(p as usize);
            for i in 0..p {
                if i == me {
                    loc.push(own);
                } else {
                    let s = l.alloc(n)?;
                    l.post(i, s, n);
                    loc.push(s);
                }
            }
            for i in 0..p {
                if i != me {
                    l.await_done(i, loc[i as usize], n);
                }
                match i {
                    0 => {}
                    1 => l.reduce_local(loc[0], loc[1], out, n)?,
                    _ => l.reduce_local(out, loc[i as usize], out, n)?,
                }
            }
        }
    }
    Ok(())
}

/// Binomial tree over vranks; each node folds its children in ascending
/// order into its own contribution, then passes the result to its parent.
fn reduce_tree(l: &mut Lower, v: u32, p: u32, rank: &dyn Fn(u32) -> u32, own: u64, out: Option<u64>, n: u64) -> Result<(), EngineError> {
    let (children, parent) = binomial(v, p);
    if children.is_empty() {
        return l.send(rank(parent.expect("non-root leaf")), own, n);
    }
    let acc = match out {
        Some(o) => o,
        None => l.alloc(n)?,
    };
    let mut cur = own;
    for (j, &c) in children.iter().enumerate() {
        let last = j + 1 == children.len();
        match (l.proto, parent) {
            (Protocol::Eager, Some(par)) if last => l.fold(rank(c), cur, Target::Peer(rank(par)), false, n)?,
            _ => l.fold(rank(c), cur, Target::Mem(acc), false, n)?,
        }
        cur = acc;
    }
    if let (Protocol::Rendezvous, Some(par)) = (l.proto, parent) {
        l.send(rank(par), acc, n)?;
    }
    Ok(())
}

fn gather_all_to_one(l: &mut Lower, me: u32, p: u32, root: u32, own: u64, out: Option<u64>, n: u64) -> Result<(), EngineError> {
    let Some(out) = out else { return l.send(root, own, n) };
    let at = |i: u32| out + i as u64 * n;
    match l.proto {
        Protocol::Eager => {
            l.copy(own, at(me), n)?;
            for i in (0..p).filter(|&i| i != me) {
                l.recv(i, at(i), n)?;
            }
        }
        Protocol::Rendezvous => {
            for i in (0..p).filter(|&i| i != me) {
                l.post(i, at(i), n);
            }
            l.copy(own, at(me), n)?;
            for i in (0..p).filter(|&i| i != me) {
                l.await_done(i, at(i), n);
            }
        }
    }
    Ok(())
}

/// Chain root+1 → root+2 → ... → root. Each rank sends its own block and
/// then forwards everything it receives, one block per message.
fn gather_ring(l: &mut Lower, v: u32, p: u32, rank: &dyn Fn(u32) -> u32, own: u64, out: Option<u64>, n: u64) -> Result<(), EngineError> {
    let prev = rank((v + p - 1) % p);
    let Some(out) = out else {
        let next = rank((v + 1) % p);
        l.send(next, own, n)?;
        for _ in 1..v {
            l.forward(prev, next, n)?;
        }
        return Ok(());
    };
    let at = |w: u32| out + rank(w) as u64 * n;
    l.copy(own, at(0), n)?;
    // blocks arrive in origin order P-1, P-2, ..., 1
    match l.proto {
        Protocol::Eager => {
            for o in (1..p).rev() {
                l.recv(prev, at(o), n)?;
            }
        }
        Protocol::Rendezvous => {
            for o in (1..p).rev() {
                l.post(prev, at(o), n);
            }
            for o in (1..p).rev() {
                l.await_done(prev, at(o), n);
            }
        }
    }
    Ok(())
}

/// Binomial tree gather; a subtree's blocks are contiguous in vrank order.
#[allow(clippy::too_many_arguments)]
fn gather_tree(
    l: &mut Lower,
    v: u32,
    p: u32,
    root: u32,
    rank: &dyn Fn(u32) -> u32,
    own: u64,
    out: Option<u64>,
    n: u64,
) -> Result<(), EngineError> {
    let (children, parent) = binomial(v, p);
    if children.is_empty() {
        return l.send(rank(parent.expect("non-root leaf")), own, n);
    }
    let size = subtree_size(v, p) as u64;
    let buf = match out {
        Some(o) if root == 0 => o,
        _ => l.alloc(size * n)?,
    };
    l.copy(own, buf, n)?;
    for &c in &children {
        let len = subtree_size(c, p) as u64 * n;
        l.recv(rank(c), buf + (c - v) as u64 * n, len)?;
    }
    match (parent, out) {
        (Some(par), _) => l.send(rank(par), buf, size * n)?,
        (None, Some(o)) if root != 0 => {
            let split = (p - root) as u64 * n;
            l.copy(buf, o + root as u64 * n, split)?;
            l.copy(buf + split, o, root as u64 * n)?;
        }
        _ => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_shape() {
        assert_eq!(binomial(0, 8), (vec![1, 2, 4], None));
        assert_eq!(binomial(4, 8), (vec![5, 6], Some(0)));
        assert_eq!(binomial(6, 8), (vec![7], Some(4)));
        assert_eq!(binomial(4, 5), (vec![], Some(0)));
        assert_eq!(subtree_size(4, 8), 4);
        assert_eq!(subtree_size(4, 5), 1);
        assert_eq!(subtree_size(2, 3), 1);
        assert_eq!(ceil_log2(5), 3);
        assert_eq!(ceil_log2(8), 3);
        assert_eq!(ceil_log2(1), 0);
    }
}
