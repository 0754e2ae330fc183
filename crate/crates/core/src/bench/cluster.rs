use std::time::{Duration, Instant};

use crate::collectives::AlgorithmConfig;
use crate::engine::{CcloRequest, EngineConfig, Node, Op, RequestId, RequestStatus};
use crate::platform::{Platform, PlatformConfig};
use crate::time::SimTime;
use crate::transport::{AddressTable, Fabric, FabricConfig, TcpTransport, Transport, UdpTransport};

use super::{BenchConfig, BenchError, TransportKind};

const MESH_TIMEOUT: Duration = Duration::from_secs(30);
const WALL_LIMIT: Duration = Duration::from_secs(60);

/// What the benchmarks need from a set of engines, whether they all live in
/// this process on the virtual fabric or this process runs a single rank.
pub trait Driver {
    fn transport_kind(&self) -> TransportKind;
    fn size(&self) -> u32;
    /// Ranks whose engines this driver owns.
    fn local_ranks(&self) -> Vec<u32>;
    fn node(&self, rank: u32) -> &Node;
    fn node_mut(&mut self, rank: u32) -> &mut Node;

    /// Runs the engines until every request in `reqs` is terminal. `pump`
    /// runs between passes for each local rank and reports whether it moved
    /// any data (stream ports are fed this way).
    fn drive(
        &mut self,
        reqs: &[(u32, RequestId)],
        pump: &mut dyn FnMut(u32, &mut Node) -> bool,
    ) -> Result<(), BenchError>;

    /// Drains in-flight traffic and aligns ranks. Returns the start time for
    /// the next measured operation.
    fn settle(&mut self) -> Result<SimTime, BenchError>;

    /// Bytes put on the wire by the local ranks so far.
    fn wire_bytes(&self) -> u64;
    fn drops(&self) -> u64;

    fn is_virtual(&self) -> bool {
        self.transport_kind().is_virtual()
    }

    fn wait(&mut self, reqs: &[(u32, RequestId)]) -> Result<(), BenchError> {
        self.drive(reqs, &mut |_, _| false)?;
        self.expect_complete(reqs)
    }

    /// Turns the first failed request into an error and retires the rest.
    fn expect_complete(&mut self, reqs: &[(u32, RequestId)]) -> Result<(), BenchError> {
        let mut first = None;
        for &(rank, id) in reqs {
            if let Some(RequestStatus::Failed { error, .. }) = self.node_mut(rank).retire(id) {
                first.get_or_insert(BenchError::RequestFailed { rank, error });
            }
        }
        first.map_or(Ok(()), Err)
    }

    fn page_faults(&self) -> u64 {
        self.local_ranks().iter().map(|&r| self.node(r).counters().page_faults).sum()
    }
}

/// Every rank in this process on one virtual-time fabric.
pub struct SimCluster {
    kind: TransportKind,
    fabric: Fabric,
    nodes: Vec<Node>,
}

impl SimCluster {
    /// Builds `ranks` engines on a fresh fabric and installs communicator 0
    /// spanning all of them.
    pub fn new(
        ranks: u32,
        fabric: FabricConfig,
        engine: EngineConfig,
        platform: PlatformConfig,
        algo: AlgorithmConfig,
    ) -> Result<Self, BenchError> {
        let kind = match fabric.poe {
            crate::transport::PoeKind::Stream => TransportKind::Sim,
            crate::transport::PoeKind::Rdma => TransportKind::RdmaSim,
            crate::transport::PoeKind::Datagram { .. } => TransportKind::DatagramSim,
        };
        let fab = Fabric::new(fabric, ranks as usize)?;
        let mut nodes = Vec::with_capacity(ranks as usize);
        for r in 0..ranks {
            let memory = Platform::new(platform).into_handle();
            fab.attach_memory(r, memory.clone());
            nodes.push(Node::start(engine.clone(), memory, Box::new(fab.port(r)?))?);
        }
        for n in &mut nodes {
            n.configure_communicator(0, (0..ranks).collect(), algo)?;
        }
        Ok(SimCluster { kind, fabric: fab, nodes })
    }

    pub fn from_config(cfg: &BenchConfig) -> Result<Self, BenchError> {
        cfg.validate()?;
        if !cfg.transport.is_virtual() {
            return Err(BenchError::Config(format!("{} is not a simulated transport", cfg.transport)));
        }
        SimCluster::new(cfg.ranks, cfg.fabric(), cfg.engine.clone(), cfg.platform(), cfg.algorithms(Op::Nop))
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn now(&self) -> SimTime {
        self.fabric.now()
    }

    /// Issues one request per rank at the same instant and waits for all.
    pub fn run_all(&mut self, reqs: &[CcloRequest]) -> Result<Vec<RequestId>, BenchError> {
        let t0 = self.settle()?;
        let mut ids = Vec::with_capacity(reqs.len());
        for (r, req) in reqs.iter().enumerate() {
            ids.push((r as u32, self.nodes[r].call_at(*req, t0)?));
        }
        self.drive(&ids, &mut |_, _| false)?;
        Ok(ids.into_iter().map(|(_, id)| id).collect())
    }

    fn step(&mut self, pump: &mut dyn FnMut(u32, &mut Node) -> bool) -> bool {
        let mut moved = false;
        for (r, n) in self.nodes.iter_mut().enumerate() {
            moved |= n.progress();
            moved |= pump(r as u32, n);
        }
        moved
    }

    fn next_time(&self) -> Option<SimTime> {
        let wake = self.nodes.iter().filter_map(|n| n.next_wakeup()).min();
        match (self.fabric.next_event_time(), wake) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn stuck_report(&self, reqs: &[(u32, RequestId)]) -> String {
        let pending: Vec<String> = reqs
            .iter()
            .filter(|(r, id)| !self.nodes[*r as usize].is_done(*id))
            .map(|(r, id)| format!("rank {r} request {} {:?}", id.0, self.nodes[*r as usize].status(*id)))
            .collect();
        format!("at {}: {}", self.fabric.now(), pending.join("; "))
    }
}

impl Driver for SimCluster {
    fn transport_kind(&self) -> TransportKind {
        self.kind
    }

    fn size(&self) -> u32 {
        self.nodes.len() as u32
    }

    fn local_ranks(&self) -> Vec<u32> {
        (0..self.size()).collect()
    }

    fn node(&self, rank: u32) -> &Node {
        &self.nodes[rank as usize]
    }

    fn node_mut(&mut self, rank: u32) -> &mut Node {
        &mut self.nodes[rank as usize]
    }

    fn drive(
        &mut self,
        reqs: &[(u32, RequestId)],
        pump: &mut dyn FnMut(u32, &mut Node) -> bool,
    ) -> Result<(), BenchError> {
        loop {
            let moved = self.step(pump);
            if reqs.iter().all(|&(r, id)| self.nodes[r as usize].is_done(id)) {
                return Ok(());
            }
            if moved {
                continue;
            }
            match self.next_time() {
                Some(t) => self.fabric.advance_to(t),
                None => return Err(BenchError::Deadlock(self.stuck_report(reqs))),
            }
        }
    }

    fn settle(&mut self) -> Result<SimTime, BenchError> {
        loop {
            if self.step(&mut |_, _| false) {
                continue;
            }
            let idle = self.nodes.iter().all(|n| n.is_idle());
            if idle && self.fabric.is_quiet() {
                return Ok(self.fabric.now());
            }
            match self.next_time() {
                Some(t) => self.fabric.advance_to(t),
                None if idle => self.fabric.advance_to(self.fabric.busy_until()),
                None => return Err(BenchError::Deadlock(format!("engines busy at {} with no pending event", self.now()))),
            }
        }
    }

    fn wire_bytes(&self) -> u64 {
        self.fabric.total_wire_bytes()
    }

    fn drops(&self) -> u64 {
        self.fabric.total_drops()
    }
}

/// One rank of a socket cluster, in its own process or thread.
pub struct SocketNode {
    kind: TransportKind,
    rank: u32,
    size: u32,
    node: Node,
}

impl SocketNode {
    /// Joins the full mesh described by `table` as `rank` and installs
    /// communicator 0.
    pub fn connect(cfg: &BenchConfig, rank: u32, table: &AddressTable) -> Result<Self, BenchError> {
        cfg.validate()?;
        if table.size() != cfg.ranks {
            return Err(BenchError::Config(format!(
                "address table lists {} ranks, config has {}",
                table.size(),
                cfg.ranks
            )));
        }
        let transport: Box<dyn Transport> = match cfg.transport {
            TransportKind::Stream => Box::new(TcpTransport::connect_mesh(rank, table, MESH_TIMEOUT)?),
            TransportKind::Datagram => {
                Box::new(UdpTransport::connect_mesh_with_mtu(rank, table, MESH_TIMEOUT, cfg.mtu)?)
            }
            k => return Err(BenchError::Config(format!("{k} is not a socket transport"))),
        };
        let memory = Platform::new(cfg.platform()).into_handle();
        let mut node = Node::start(cfg.engine.clone(), memory, transport)?;
        node.configure_communicator(0, (0..cfg.ranks).collect(), cfg.algorithms(Op::Nop))?;
        Ok(SocketNode { kind: cfg.transport, rank, size: cfg.ranks, node })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn engine(&mut self) -> &mut Node {
        &mut self.node
    }
}

impl Driver for SocketNode {
    fn transport_kind(&self) -> TransportKind {
        self.kind
    }

    fn size(&self) -> u32 {
        self.size
    }

    fn local_ranks(&self) -> Vec<u32> {
        vec![self.rank]
    }

    fn node(&self, rank: u32) -> &Node {
        assert_eq!(rank, self.rank, "rank {rank} is not local");
        &self.node
    }

    fn node_mut(&mut self, rank: u32) -> &mut Node {
        assert_eq!(rank, self.rank, "rank {rank} is not local");
        &mut self.node
    }

    fn drive(
        &mut self,
        reqs: &[(u32, RequestId)],
        pump: &mut dyn FnMut(u32, &mut Node) -> bool,
    ) -> Result<(), BenchError> {
        let limit = Instant::now() + WALL_LIMIT;
        loop {
            let moved = self.node.progress() | pump(self.rank, &mut self.node);
            if reqs.iter().all(|&(_, id)| self.node.is_done(id)) {
                return Ok(());
            }
            if moved {
                continue;
            }
            if Instant::now() > limit {
                return Err(BenchError::Deadlock(format!("rank {} waited {WALL_LIMIT:?}", self.rank)));
            }
            self.node.park();
        }
    }

    fn settle(&mut self) -> Result<SimTime, BenchError> {
        let id = self.node.call(CcloRequest::barrier(0))?;
        self.wait(&[(self.rank, id)])?;
        Ok(self.node.now())
    }

    fn wire_bytes(&self) -> u64 {
        self.node.transport().counters().bytes_sent
    }

    fn drops(&self) -> u64 {
        self.node.transport().counters().datagrams_dropped + self.node.counters().eager_drops
    }
}

/// Builds the driver for this process: the whole cluster for simulated
/// transports, or the configured rank for socket transports.
pub fn launch(cfg: &BenchConfig) -> Result<Box<dyn Driver>, BenchError> {
    cfg.validate()?;
    if cfg.transport.is_virtual() {
        return Ok(Box::new(SimCluster::from_config(cfg)?));
    }
    let rank = cfg.rank.ok_or_else(|| BenchError::Config("socket transports need a rank".into()))?;
    let table = cfg
        .address_table()?
        .ok_or_else(|| BenchError::Config("socket transports need an address table".into()))?;
    Ok(Box::new(SocketNode::connect(cfg, rank, &table)?))
}

/// Runs `f` once per rank, each on its own thread with its own socket
/// engine, over a fresh localhost mesh. Results are in rank order.
pub fn run_threaded<T, F>(cfg: &BenchConfig, f: F) -> Result<Vec<T>, BenchError>
where
    T: Send,
    F: Fn(&mut SocketNode) -> Result<T, BenchError> + Sync,
{
    cfg.validate()?;
    let table = match cfg.address_table()? {
        Some(t) => t,
        None => AddressTable::free_localhost(cfg.ranks)?,
    };
    let results: Vec<Result<T, BenchError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.ranks)
            .map(|r| {
                let (table, f) = (&table, &f);
                s.spawn(move || {
                    let mut node = SocketNode::connect(cfg, r, table)?;
                    f(&mut node)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(BenchError::Deadlock("rank thread panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}
