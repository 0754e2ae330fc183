//! The per-node offload engine.
//!
//! A [`Node`] is split into a control plane and a data plane. The control
//! plane is the embedded controller ([`firmware`]), which turns host commands
//! into programs of data-movement microcode and rendezvous handshakes. The
//! data plane is the DMP ([`dmp`]), the Rx buffer manager ([`rbm`]), the Tx and
//! Rx framing stages and the streaming [`plugin`]s. Stages are cooperative
//! state machines connected by bounded queues; [`Node::progress`] runs them
//! until none can advance, which keeps the whole node deterministic.

pub mod dmp;
pub mod firmware;
pub mod plugin;
pub mod rbm;
pub mod request;
pub mod stream;
mod rx;
mod tx;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::collectives::{AlgorithmConfig, Communicator};
use crate::platform::{lock, PlatformError, PlatformHandle};
use crate::time::{SimDuration, SimTime};
use crate::transport::{Capabilities, NodeId, Transport, TransportError};

pub use dmp::{DmpFunc, DmpInstruction, MsgKind, SlotDescriptor};
pub use firmware::{FwOp, Notification};
pub use plugin::{BinaryPlugin, PluginError, PluginRouter};
pub use rbm::{PoolCounts, RxBufferPool, RxBufferSlot, SlotMeta, SlotState};
pub use request::{CcloRequest, DataEndpoint, Dtype, Op, ReduceFn, RequestFlags, RequestId, RequestStatus, ANY};
pub use stream::{PortLevels, StreamPort};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub rx_buffer_count: u16,
    pub rx_buffer_size: u64,
    pub eager_enabled: bool,
    /// Programs the controller runs at once (point-to-point only; a
    /// collective always runs alone).
    pub max_active_programs: usize,
    pub command_queue_depth: usize,
    pub dmp_queue_depth: usize,
    pub tx_queue_depth: usize,
    /// Park interval for wall-clock backends between progress passes.
    pub poll_interval: SimDuration,
    pub rx_timeout_virtual: SimDuration,
    pub rx_timeout_wall: SimDuration,
    /// How long a result slot may stay blocked on a full consumer.
    pub stall_timeout: SimDuration,
    pub stream_ports: u8,
    pub stream_port_capacity: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            rx_buffer_count: 16,
            rx_buffer_size: 1 << 20,
            eager_enabled: true,
            max_active_programs: 8,
            command_queue_depth: 64,
            dmp_queue_depth: 64,
            tx_queue_depth: 64,
            poll_interval: SimDuration::from_micros(10),
            rx_timeout_virtual: SimDuration::from_millis(10),
            rx_timeout_wall: SimDuration::from_millis(2000),
            stall_timeout: SimDuration::from_millis(10),
            stream_ports: 4,
            stream_port_capacity: 2 << 20,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("communicator {0} is not configured")]
    UnknownComm(u32),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint holds {have} bytes, request needs {need}")]
    BufferTooSmall { need: u64, have: u64 },
    #[error("eager message of {len} bytes exceeds the {max}-byte Rx buffer")]
    EagerTooLarge { len: u64, max: u64 },
    #[error("unsupported protocol: {0}")]
    UnsupportedProtocol(String),
    #[error("received {got} bytes, expected {expected}")]
    LengthMismatch { expected: u64, got: u64 },
    #[error("receive timed out: {0}")]
    Timeout(String),
    #[error("stream port {0} stalled")]
    StreamStall(u8),
    #[error("no stream port {0}")]
    UnknownPort(u8),
    #[error("command queue full")]
    QueueFull,
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Instrumentation counters. Payload bytes are tallied per stage so that the
/// control plane's count can be checked to stay at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineCounters {
    pub messages_sent: u64,
    pub messages_received: u64,
    pub eager_drops: u64,
    pub decode_errors: u64,
    pub timeouts: u64,
    pub page_faults: u64,
    pub uc_payload_bytes: u64,
    pub dmp_payload_bytes: u64,
    pub tx_payload_bytes: u64,
    pub rx_payload_bytes: u64,
    pub plugin_payload_bytes: u64,
    pub writes_landed: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct Command {
    id: RequestId,
    req: CcloRequest,
    visible_at: SimTime,
}

pub struct Node {
    pub(crate) config: EngineConfig,
    pub(crate) platform: PlatformHandle,
    pub(crate) transport: Box<dyn Transport>,
    pub(crate) caps: Capabilities,
    pub(crate) comms: BTreeMap<u32, Communicator>,
    pub(crate) commands: VecDeque<Command>,
    pub(crate) requests: BTreeMap<RequestId, RequestStatus>,
    pub(crate) issued: BTreeMap<RequestId, SimTime>,
    next_request: u64,
    pub(crate) uc: firmware::Controller,
    pub(crate) dmp: dmp::Dmp,
    pub(crate) rbm: RxBufferPool,
    pub(crate) tx_queue: VecDeque<tx::TxCommand>,
    pub(crate) rx: rx::RxState,
    pub(crate) landed: BTreeMap<u64, u64>,
    pub(crate) ports: Vec<StreamPort>,
    pub(crate) plugins: PluginRouter,
    pub(crate) counters: EngineCounters,
}

impl Node {
    /// Assembles the stages around `platform` and `transport`.
    pub fn start(config: EngineConfig, platform: PlatformHandle, transport: Box<dyn Transport>) -> Result<Self, EngineError> {
        if config.eager_enabled && config.rx_buffer_count == 0 {
            return Err(EngineError::Config("eager protocol needs at least one Rx buffer".into()));
        }
        if config.eager_enabled && config.rx_buffer_size == 0 {
            return Err(EngineError::Config("Rx buffers must have positive capacity".into()));
        }
        if config.max_active_programs == 0
            || config.command_queue_depth == 0
            || config.dmp_queue_depth == 0
            || config.tx_queue_depth == 0
        {
            return Err(EngineError::Config("queue depths must be positive".into()));
        }
        let caps = transport.capabilities();
        let ports = (0..config.stream_ports).map(|_| StreamPort::new(config.stream_port_capacity)).collect();
        Ok(Node {
            rbm: RxBufferPool::new(config.rx_buffer_count, config.rx_buffer_size),
            config,
            platform,
            transport,
            caps,
            comms: BTreeMap::new(),
            commands: VecDeque::new(),
            requests: BTreeMap::new(),
            issued: BTreeMap::new(),
            next_request: 0,
            uc: firmware::Controller::default(),
            dmp: dmp::Dmp::default(),
            tx_queue: VecDeque::new(),
            rx: rx::RxState::default(),
            landed: BTreeMap::new(),
            ports,
            plugins: PluginRouter::default(),
            counters: EngineCounters::default(),
        })
    }

    pub fn node_id(&self) -> NodeId {
        self.transport.local()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn capabilities(&self) -> Capabilities {
        self.caps
    }

    pub fn platform(&self) -> &PlatformHandle {
        &self.platform
    }

    pub fn transport(&self) -> &dyn Transport {
        self.transport.as_ref()
    }

    pub fn now(&self) -> SimTime {
        self.transport.now()
    }

    /// Configuration-memory write: installs communicator `comm_id` over
    /// `nodes` (index = rank) and opens a session to every peer.
    pub fn configure_communicator(
        &mut self,
        comm_id: u32,
        nodes: Vec<NodeId>,
        algo: AlgorithmConfig,
    ) -> Result<(), EngineError> {
        algo.validate().map_err(EngineError::Config)?;
        let me = self.node_id();
        let local_rank = nodes
            .iter()
            .position(|&n| n == me)
            .ok_or_else(|| EngineError::Config(format!("node {me} is not a member of communicator {comm_id}")))?;
        let mut sessions = Vec::with_capacity(nodes.len());
        for (r, &n) in nodes.iter().enumerate() {
            sessions.push(if r == local_rank { None } else { Some(self.transport.open_session(n)?) });
        }
        let comm = Communicator::new(comm_id, local_rank as u32, nodes, sessions, algo);
        self.comms.insert(comm_id, comm);
        Ok(())
    }

    pub fn communicator(&self, comm_id: u32) -> Option<&Communicator> {
        self.comms.get(&comm_id)
    }

    /// Runtime tuning of algorithm selection for one communicator.
    pub fn set_algorithm_config(&mut self, comm_id: u32, algo: AlgorithmConfig) -> Result<(), EngineError> {
        algo.validate().map_err(EngineError::Config)?;
        let comm = self.comms.get_mut(&comm_id).ok_or(EngineError::UnknownComm(comm_id))?;
        comm.algo = algo;
        Ok(())
    }

    /// Enqueues a host command issued now.
    pub fn call(&mut self, req: CcloRequest) -> Result<RequestId, EngineError> {
        let now = self.now();
        self.call_at(req, now)
    }

    /// Enqueues a host command issued at `issued_at` (not before now). It
    /// reaches the controller one invocation latency later.
    pub fn call_at(&mut self, req: CcloRequest, issued_at: SimTime) -> Result<RequestId, EngineError> {
        req.validate()?;
        if req.op != Op::Nop && !self.comms.contains_key(&req.comm_id) {
            return Err(EngineError::UnknownComm(req.comm_id));
        }
        if self.commands.len() >= self.config.command_queue_depth {
            return Err(EngineError::QueueFull);
        }
        self.check_endpoints(&req)?;
        let issued_at = issued_at.max(self.now());
        let latency = lock(&self.platform).config().staging.invocation_latency;
        let id = RequestId(self.next_request);
        self.next_request += 1;
        self.commands.push_back(Command { id, req, visible_at: issued_at + latency });
        self.requests.insert(id, RequestStatus::Queued);
        self.issued.insert(id, issued_at);
        Ok(id)
    }

    fn check_endpoints(&self, req: &CcloRequest) -> Result<(), EngineError> {
        let Some(comm) = self.comms.get(&req.comm_id) else { return Ok(()) };
        let size = comm.size as u64;
        if req.op.is_collective() && req.root as u64 >= size {
            return Err(EngineError::InvalidRequest(format!("root {} outside communicator of {size}", req.root)));
        }
        if matches!(req.op, Op::Send | Op::Recv) && req.peer != ANY && req.peer as u64 >= size {
            return Err(EngineError::InvalidRequest(format!("peer {} outside communicator of {size}", req.peer)));
        }
        let bytes = req.bytes();
        let is_root = comm.local_rank == req.root;
        let (src_need, dst_need) = match req.op {
            Op::Nop | Op::Barrier => (0, 0),
            Op::Send => (bytes, 0),
            Op::Recv => (0, bytes),
            Op::Bcast => if is_root { (bytes, 0) } else { (0, bytes) },
            Op::Reduce => (bytes, if is_root { bytes } else { 0 }),
            Op::Gather => (bytes, if is_root { bytes * size } else { 0 }),
            Op::AllToAll => (bytes * size, bytes * size),
        };
        let p = lock(&self.platform);
        for (ep, need) in [(req.src, src_need), (req.dst, dst_need)] {
            if need == 0 {
                continue;
            }
            match ep {
                DataEndpoint::Memory(addr) => {
                    let have = p.remaining_at(addr).unwrap_or(0);
                    if have < need {
                        return Err(EngineError::BufferTooSmall { need, have });
                    }
                }
                DataEndpoint::Stream(port) if port as usize >= self.ports.len() => {
                    return Err(EngineError::UnknownPort(port));
                }
                DataEndpoint::Stream(_) => {}
                DataEndpoint::None => return Err(EngineError::InvalidRequest(format!("{:?} needs a data endpoint", req.op))),
            }
        }
        Ok(())
    }

    pub fn status(&self, id: RequestId) -> Option<&RequestStatus> {
        self.requests.get(&id)
    }

    pub fn is_done(&self, id: RequestId) -> bool {
        self.requests.get(&id).is_some_and(|s| s.is_terminal())
    }

    /// Modeled latency from issue to completion of a finished request.
    pub fn latency(&self, id: RequestId) -> Option<SimDuration> {
        match self.requests.get(&id)? {
            RequestStatus::Complete { issued_at, completed_at, .. } => Some(*completed_at - *issued_at),
            _ => None,
        }
    }

    /// Forgets terminal requests so long benchmarks do not accumulate state.
    pub fn retire(&mut self, id: RequestId) -> Option<RequestStatus> {
        if self.is_done(id) {
            self.issued.remove(&id);
            self.requests.remove(&id)
        } else {
            None
        }
    }

    /// No queued commands, running programs or pending transmissions.
    pub fn is_idle(&self) -> bool {
        self.commands.is_empty() && self.uc.active.is_empty() && self.dmp.is_empty() && self.tx_queue.is_empty()
    }

    /// Runs every stage until none can make progress. Returns whether
    /// anything changed.
    pub fn progress(&mut self) -> bool {
        let mut any = false;
        loop {
            let mut moved = self.rx_stage();
            moved |= self.uc_stage();
            moved |= self.dmp_stage();
            moved |= self.tx_stage();
            if !moved {
                break;
            }
            any = true;
        }
        any
    }

    /// Earliest future time at which an internal timer fires.
    pub fn next_wakeup(&self) -> Option<SimTime> {
        let now = self.now();
        let cmd = self.commands.front().map(|c| c.visible_at);
        let dmp = self.dmp.next_deadline(now);
        let uc = self.uc.next_deadline(now);
        [cmd, dmp, uc].into_iter().flatten().filter(|&t| t > now).min()
    }

    /// Blocks a wall-clock backend until an arrival may be ready, the next
    /// internal timer, or one poll interval. Returns at once on virtual time.
    pub fn park(&mut self) {
        let now = self.now();
        let bound = now + self.config.poll_interval;
        let deadline = self.next_wakeup().map_or(bound, |t| t.min(bound));
        self.transport.park(Some(deadline));
    }

    pub(crate) fn rx_timeout(&self) -> Option<SimDuration> {
        if self.caps.reliable {
            None
        } else if self.caps.virtual_time {
            Some(self.config.rx_timeout_virtual)
        } else {
            Some(self.config.rx_timeout_wall)
        }
    }

    pub(crate) fn fail_request(&mut self, id: RequestId, error: EngineError) {
        if let EngineError::Timeout(_) = error {
            self.counters.timeouts += 1;
        }
        let at = self.now();
        self.uc.abort(id, &self.platform);
        self.dmp.abort(id);
        self.tx_queue.retain(|c| c.lane != id);
        self.requests.insert(id, RequestStatus::Failed { error: error.to_string(), at });
    }

    pub(crate) fn complete_request(&mut self, id: RequestId, bytes_moved: u64) {
        let issued_at = self.issued.get(&id).copied().unwrap_or_default();
        let completed_at = self.now();
        self.requests.insert(id, RequestStatus::Complete { bytes_moved, issued_at, completed_at });
    }

    /// Host side of a stream port: accepts as many bytes as fit.
    pub fn stream_push(&mut self, port: u8, data: &[u8]) -> Result<usize, EngineError> {
        let p = self.ports.get_mut(port as usize).ok_or(EngineError::UnknownPort(port))?;
        Ok(p.push_input(data))
    }

    /// Host side of a stream port: takes up to `max` produced bytes.
    pub fn stream_pull(&mut self, port: u8, max: usize) -> Result<Vec<u8>, EngineError> {
        let p = self.ports.get_mut(port as usize).ok_or(EngineError::UnknownPort(port))?;
        Ok(p.pull_output(max))
    }

    pub fn port_levels(&self, port: u8) -> Option<PortLevels> {
        self.ports.get(port as usize).map(|p| p.levels())
    }

    /// Whether some running request will consume input from `port`.
    pub fn port_has_consumer(&self, port: u8) -> bool {
        self.commands.iter().any(|c| c.req.src == DataEndpoint::Stream(port))
            || self.uc.active.iter().any(|p| p.reads_port(port))
    }

    /// Whether some running request will produce output into `port`.
    pub fn port_has_producer(&self, port: u8) -> bool {
        self.commands.iter().any(|c| c.req.dst == DataEndpoint::Stream(port))
            || self.uc.active.iter().any(|p| p.writes_port(port))
    }

    pub fn counters(&self) -> EngineCounters {
        let mut c = self.counters;
        c.page_faults = lock(&self.platform).fault_count();
        c
    }

    pub fn rx_pool(&self) -> &RxBufferPool {
        &self.rbm
    }

    pub fn notifications(&self) -> &[Notification] {
        &self.uc.notifications
    }

    pub fn plugins(&self) -> &PluginRouter {
        &self.plugins
    }

    /// Key-value view of configuration memory.
    ///
    /// Keys: `config`, `communicators`, `comm/<id>`, `rx_pool`, `counters`,
    /// `transport`, `ports`.
    pub fn inspect(&self, key: &str) -> Option<Value> {
        match key {
            "config" => serde_json::to_value(&self.config).ok(),
            "communicators" => Some(Value::Array(self.comms.keys().map(|k| json!(k)).collect())),
            "rx_pool" => Some(json!({
                "counts": self.rbm.counts(),
                "held_arrivals": self.rx.held_events(),
                "slots": self.rbm.slots().iter().map(|s| json!({
                    "index": s.index,
                    "capacity": s.capacity,
                    "state": s.state,
                    "meta": s.meta,
                })).collect::<Vec<_>>(),
            })),
            "counters" => serde_json::to_value(self.counters()).ok(),
            "transport" => Some(json!({
                "capabilities": self.caps,
                "sessions": self.transport.session_count(),
                "counters": self.transport.counters(),
            })),
            "ports" => Some(Value::Array(self.ports.iter().map(|p| json!(p.levels())).collect())),
            k => {
                let id: u32 = k.strip_prefix("comm/")?.parse().ok()?;
                self.comms.get(&id).map(|c| c.snapshot())
            }
        }
    }

    pub fn config_snapshot(&self) -> Value {
        let mut m = serde_json::Map::new();
        for k in ["config", "communicators", "rx_pool", "counters", "transport", "ports"] {
            if let Some(v) = self.inspect(k) {
                m.insert(k.into(), v);
            }
        }
        let comms: serde_json::Map<String, Value> =
            self.comms.iter().map(|(id, c)| (id.to_string(), c.snapshot())).collect();
        m.insert("comm".into(), Value::Object(comms));
        Value::Object(m)
    }
}
