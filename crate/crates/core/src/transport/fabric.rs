//! Deterministic virtual-time fabric.
//!
//! Every node has a full-duplex port. A transmission occupies the sender's
//! egress for its serialization time, crosses the network in `base_latency`,
//! then occupies the receiver's ingress; it arrives `per_hop_processing`
//! after the last byte. Arrivals sit in a global event heap ordered by
//! `(time, insertion sequence)` and are handed to node inboxes only when the
//! driver advances the clock past them, so identical schedules produce
//! identical event logs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Capabilities, CostModel, Frame, FrameKind, NodeId, RxEvent, RxKind, SessionId, Transport, TransportCounters,
    TransportError, TxCompletion,
};
use crate::platform::{lock, PlatformHandle};
use crate::time::SimTime;
use crate::wire::{segment_message, MsgType, SIGNATURE_LEN, SUBHEADER_LEN};

/// Which POE the fabric emulates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoeKind {
    /// Reliable, in-order, message-contiguous sessions.
    Stream,
    /// Independent datagrams, each dropped with probability `loss` and
    /// shuffled within groups of `reorder_window` consecutive datagrams.
    Datagram { loss: f64, reorder_window: u32 },
    /// Reliable queue pairs with two-sided SEND and one-sided WRITE.
    Rdma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FabricConfig {
    pub cost: CostModel,
    pub poe: PoeKind,
    /// Segment payload capacity on datagram POEs.
    pub mtu_payload: u32,
    pub seed: u64,
    pub max_sessions_per_node: u32,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            cost: CostModel::default(),
            poe: PoeKind::Stream,
            mtu_payload: 4096,
            seed: 0,
            max_sessions_per_node: 4096,
        }
    }
}

impl FabricConfig {
    pub fn with_poe(poe: PoeKind) -> Self {
        FabricConfig { poe, ..FabricConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WireKind {
    Headered,
    Datagrams,
    RdmaSend,
    RdmaWrite,
}

/// One transmitted frame as seen by the fabric.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRecord {
    pub sent_at: SimTime,
    /// Arrival of the last delivered unit; `None` when every unit was dropped.
    pub arrival: Option<SimTime>,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: WireKind,
    pub msg_type: Option<MsgType>,
    pub tag: Option<u32>,
    pub seq: Option<u32>,
    pub payload_bytes: u64,
    pub wire_bytes: u64,
    pub units: u32,
    pub dropped_units: u32,
}

#[derive(Debug)]
struct Pending {
    dst: NodeId,
    event: RxEvent,
    write: Option<(u64, Vec<u8>)>,
}

#[derive(Debug, Default)]
struct FabricNode {
    memory: Option<PlatformHandle>,
    sessions: BTreeMap<NodeId, SessionId>,
    peers: BTreeMap<SessionId, NodeId>,
    next_session: u32,
    inbox: VecDeque<RxEvent>,
    egress_free: SimTime,
    ingress_free: SimTime,
    counters: TransportCounters,
}

#[derive(Debug)]
struct FabricState {
    config: FabricConfig,
    now: SimTime,
    nodes: Vec<FabricNode>,
    heap: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: BTreeMap<u64, Pending>,
    next_seq: u64,
    next_msg_id: u64,
    rng: ChaCha8Rng,
    log: Vec<WireRecord>,
    write_errors: u64,
}

/// Shared handle to the simulated network.
#[derive(Clone, Debug)]
pub struct Fabric {
    inner: Arc<Mutex<FabricState>>,
}

impl Fabric {
    pub fn new(config: FabricConfig, nodes: usize) -> Result<Self, TransportError> {
        config.cost.validate().map_err(TransportError::InvalidFrame)?;
        if config.mtu_payload == 0 {
            return Err(TransportError::InvalidFrame("mtu_payload must be positive".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let state = FabricState {
            nodes: (0..nodes).map(|_| FabricNode::default()).collect(),
            config,
            now: SimTime::ZERO,
            heap: BinaryHeap::new(),
            pending: BTreeMap::new(),
            next_seq: 0,
            next_msg_id: 1,
            rng,
            log: Vec::new(),
            write_errors: 0,
        };
        Ok(Fabric { inner: Arc::new(Mutex::new(state)) })
    }

    fn state(&self) -> MutexGuard<'_, FabricState> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn config(&self) -> FabricConfig {
        self.state().config.clone()
    }

    pub fn node_count(&self) -> usize {
        self.state().nodes.len()
    }

    /// Registers the memory that one-sided writes to `node` land in.
    pub fn attach_memory(&self, node: NodeId, memory: PlatformHandle) {
        if let Some(n) = self.state().nodes.get_mut(node as usize) {
            n.memory = Some(memory);
        }
    }

    pub fn port(&self, node: NodeId) -> Result<FabricPort, TransportError> {
        if node as usize >= self.node_count() {
            return Err(TransportError::UnknownPeer(node));
        }
        Ok(FabricPort { fabric: self.clone(), node })
    }

    pub fn now(&self) -> SimTime {
        self.state().now
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.state().heap.peek().map(|Reverse((t, _))| *t)
    }

    /// Moves the clock to `t` (never backwards) and delivers every event due by then.
    pub fn advance_to(&self, t: SimTime) {
        let mut st = self.state();
        if t > st.now {
            st.now = t;
        }
        st.deliver_due();
    }

    pub fn wire_log(&self) -> Vec<WireRecord> {
        self.state().log.clone()
    }

    pub fn wire_log_len(&self) -> usize {
        self.state().log.len()
    }

    pub fn clear_wire_log(&self) {
        self.state().log.clear();
    }

    pub fn total_wire_bytes(&self) -> u64 {
        self.state().nodes.iter().map(|n| n.counters.bytes_sent).sum()
    }

    pub fn total_drops(&self) -> u64 {
        self.state().nodes.iter().map(|n| n.counters.datagrams_dropped).sum()
    }

    /// Number of distinct node pairs with an open session.
    pub fn session_pairs(&self) -> usize {
        let st = self.state();
        st.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| n.sessions.keys().filter(|&&p| p as usize > i).count())
            .sum()
    }

    pub fn write_errors(&self) -> u64 {
        self.state().write_errors
    }

    /// Whether every egress and ingress port is idle at the current time.
    pub fn is_quiet(&self) -> bool {
        let st = self.state();
        st.heap.is_empty() && st.nodes.iter().all(|n| n.egress_free <= st.now && n.ingress_free <= st.now)
    }

    /// Time at which every port is idle and every queued arrival delivered.
    pub fn busy_until(&self) -> SimTime {
        let st = self.state();
        let ports = st.nodes.iter().map(|n| n.egress_free.max(n.ingress_free)).max().unwrap_or_default();
        let heap = st.heap.iter().map(|Reverse((t, _))| *t).max().unwrap_or_default();
        ports.max(heap).max(st.now)
    }

    /// Test hook: queue raw bytes for `node` as if they arrived on `session` now.
    pub fn inject_raw(&self, node: NodeId, session: SessionId, bytes: Vec<u8>, datagram: bool) {
        let mut st = self.state();
        let now = st.now;
        st.nodes[node as usize].inbox.push_back(RxEvent { session, kind: RxKind::Raw { bytes, datagram }, arrival: now });
    }
}

impl FabricState {
    fn deliver_due(&mut self) {
        while let Some(Reverse((t, seq))) = self.heap.peek().copied() {
            if t > self.now {
                break;
            }
            self.heap.pop();
            let p = self.pending.remove(&seq).expect("pending event");
            if let Some((addr, data)) = p.write {
                let mem = self.nodes[p.dst as usize].memory.clone();
                let ok = mem.map(|m| lock(&m).remote_write(addr, &data).is_ok()).unwrap_or(false);
                if !ok {
                    self.write_errors += 1;
                    continue;
                }
            }
            let node = &mut self.nodes[p.dst as usize];
            node.counters.frames_received += 1;
            node.inbox.push_back(p.event);
        }
    }

    fn open(&mut self, local: NodeId, peer: NodeId) -> Result<SessionId, TransportError> {
        if peer as usize >= self.nodes.len() || peer == local {
            return Err(TransportError::UnknownPeer(peer));
        }
        if let Some(&s) = self.nodes[local as usize].sessions.get(&peer) {
            return Ok(s);
        }
        let limit = self.config.max_sessions_per_node;
        for n in [local, peer] {
            if self.nodes[n as usize].sessions.len() as u32 >= limit {
                return Err(TransportError::SessionLimit(limit));
            }
        }
        let a = self.alloc_session(local, peer);
        self.alloc_session(peer, local);
        Ok(a)
    }

    fn alloc_session(&mut self, node: NodeId, peer: NodeId) -> SessionId {
        let n = &mut self.nodes[node as usize];
        if let Some(&s) = n.sessions.get(&peer) {
            return s;
        }
        let s = SessionId(n.next_session);
        n.next_session += 1;
        n.sessions.insert(peer, s);
        n.peers.insert(s, peer);
        s
    }

    /// Reserves egress and ingress for one unit; returns its arrival time.
    fn schedule_unit(&mut self, src: NodeId, dst: NodeId, wire_bytes: u64, deliver: bool) -> SimTime {
        let cost = self.config.cost;
        let ser = cost.serialization(wire_bytes);
        let start = self.now.max(self.nodes[src as usize].egress_free);
        self.nodes[src as usize].egress_free = start + ser;
        if !deliver {
            return start + ser;
        }
        let rx_start = (start + cost.base_latency).max(self.nodes[dst as usize].ingress_free);
        self.nodes[dst as usize].ingress_free = rx_start + ser;
        rx_start + ser + cost.per_hop_processing
    }

    fn push(&mut self, at: SimTime, dst: NodeId, event: RxEvent, write: Option<(u64, Vec<u8>)>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.pending.insert(seq, Pending { dst, event, write });
    }

    fn transmit(&mut self, src: NodeId, session: SessionId, frame: Frame) -> Result<TxCompletion, TransportError> {
        frame.validate()?;
        let dst = *self.nodes[src as usize].peers.get(&session).ok_or(TransportError::ClosedSession(session))?;
        let rx_session = self.nodes[dst as usize].sessions[&src];
        let poe = self.config.poe;
        match (poe, frame.kind) {
            (PoeKind::Rdma, FrameKind::HeaderedMessage) => return Err(TransportError::Unsupported("headered stream")),
            (PoeKind::Stream | PoeKind::Datagram { .. }, FrameKind::RdmaSend | FrameKind::RdmaWrite) => {
                return Err(TransportError::Unsupported("RDMA"))
            }
            _ => {}
        }
        let sent_at = self.now;
        let header = frame.header;
        let mut record = WireRecord {
            sent_at,
            arrival: None,
            src,
            dst,
            kind: WireKind::Headered,
            msg_type: header.map(|h| h.msg_type),
            tag: header.map(|h| h.tag),
            seq: header.map(|h| h.seq),
            payload_bytes: frame.payload.len() as u64,
            wire_bytes: 0,
            units: 1,
            dropped_units: 0,
        };
        match (poe, frame.kind) {
            (PoeKind::Datagram { loss, reorder_window }, _) => {
                let header = header.expect("validated");
                let msg_id = self.next_msg_id;
                self.next_msg_id += 1;
                let segs = segment_message(msg_id, &header, &frame.payload, self.config.mtu_payload)?;
                record.kind = WireKind::Datagrams;
                record.units = segs.len() as u32;
                let mut arrivals = Vec::with_capacity(segs.len());
                let mut kept = Vec::with_capacity(segs.len());
                for seg in segs {
                    let bytes = (SIGNATURE_LEN + SUBHEADER_LEN) as u64 + seg.seg_len as u64;
                    record.wire_bytes += bytes;
                    let dropped = loss > 0.0 && self.rng.gen::<f64>() < loss;
                    let at = self.schedule_unit(src, dst, bytes, !dropped);
                    if dropped {
                        record.dropped_units += 1;
                    } else {
                        arrivals.push(at);
                        kept.push(seg);
                    }
                }
                if reorder_window > 1 {
                    for chunk in kept.chunks_mut(reorder_window as usize) {
                        chunk.shuffle(&mut self.rng);
                    }
                }
                record.arrival = arrivals.last().copied();
                for (at, segment) in arrivals.into_iter().zip(kept) {
                    let ev = RxEvent { session: rx_session, kind: RxKind::SegmentArrived { header, segment }, arrival: at };
                    self.push(at, dst, ev, None);
                }
                self.nodes[src as usize].counters.datagrams_dropped += record.dropped_units as u64;
            }
            (_, FrameKind::RdmaWrite) => {
                let addr = frame.remote_addr.expect("validated");
                let len = frame.payload.len() as u64;
                let mem = self.nodes[dst as usize].memory.clone();
                match mem {
                    Some(m) => lock(&m).check_remote_write(addr, len).map_err(TransportError::RemoteAccess)?,
                    None => return Err(TransportError::Unsupported("RDMA write without attached memory")),
                }
                record.kind = WireKind::RdmaWrite;
                record.wire_bytes = frame.wire_bytes();
                let at = self.schedule_unit(src, dst, record.wire_bytes, true);
                record.arrival = Some(at);
                let ev = RxEvent { session: rx_session, kind: RxKind::WriteLanded { remote_addr: addr, len }, arrival: at };
                self.push(at, dst, ev, Some((addr, frame.payload)));
            }
            (_, kind) => {
                record.kind = if kind == FrameKind::RdmaSend { WireKind::RdmaSend } else { WireKind::Headered };
                record.wire_bytes = frame.wire_bytes();
                let at = self.schedule_unit(src, dst, record.wire_bytes, true);
                record.arrival = Some(at);
                let ev = RxEvent {
                    session: rx_session,
                    kind: RxKind::MessageArrived { header: header.expect("validated"), payload: frame.payload },
                    arrival: at,
                };
                self.push(at, dst, ev, None);
            }
        }
        let c = &mut self.nodes[src as usize].counters;
        c.frames_sent += 1;
        c.bytes_sent += record.wire_bytes;
        let done = TxCompletion { wire_bytes: record.wire_bytes, accepted_at: self.nodes[src as usize].egress_free };
        self.log.push(record);
        Ok(done)
    }
}

/// One node's attachment to a [`Fabric`].
#[derive(Clone, Debug)]
pub struct FabricPort {
    fabric: Fabric,
    node: NodeId,
}

impl FabricPort {
    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }
}

impl Transport for FabricPort {
    fn local(&self) -> NodeId {
        self.node
    }

    fn capabilities(&self) -> Capabilities {
        let poe = self.fabric.state().config.poe;
        Capabilities {
            rdma: poe == PoeKind::Rdma,
            reliable: !matches!(poe, PoeKind::Datagram { .. }),
            ordered: !matches!(poe, PoeKind::Datagram { reorder_window, .. } if reorder_window > 1),
            virtual_time: true,
        }
    }

    fn open_session(&mut self, peer: NodeId) -> Result<SessionId, TransportError> {
        self.fabric.state().open(self.node, peer)
    }

    fn peer_of(&self, session: SessionId) -> Option<NodeId> {
        self.fabric.state().nodes[self.node as usize].peers.get(&session).copied()
    }

    fn session_count(&self) -> usize {
        self.fabric.state().nodes[self.node as usize].sessions.len()
    }

    fn transmit(&mut self, session: SessionId, frame: Frame) -> Result<TxCompletion, TransportError> {
        self.fabric.state().transmit(self.node, session, frame)
    }

    fn poll_rx(&mut self) -> Option<RxEvent> {
        self.fabric.state().nodes[self.node as usize].inbox.pop_front()
    }

    fn now(&self) -> SimTime {
        self.fabric.now()
    }

    fn counters(&self) -> TransportCounters {
        self.fabric.state().nodes[self.node as usize].counters
    }
}
