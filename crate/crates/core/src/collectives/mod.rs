//! Collective procedures executed by the controller firmware, and the
//! per-communicator algorithm selection table.

mod plan;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::engine::{EngineError, Op};
use crate::transport::{NodeId, SessionId};

pub use plan::{plan, Plan, PlanContext};

/// Tag space reserved for collectives; point-to-point tags should stay below it.
pub const COLLECTIVE_TAG_BASE: u32 = 0x8000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    Eager,
    Rendezvous,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Eager => "eager",
            Protocol::Rendezvous => "rendezvous",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "eager" => Ok(Protocol::Eager),
            "rendezvous" | "rndz" => Ok(Protocol::Rendezvous),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Point-to-point transfer with no collective schedule.
    Direct,
    OneToAll,
    RecursiveDoubling,
    AllToOne,
    BinaryTree,
    Ring,
    Linear,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Direct => "direct",
            Algorithm::OneToAll => "one-to-all",
            Algorithm::RecursiveDoubling => "recursive-doubling",
            Algorithm::AllToOne => "all-to-one",
            Algorithm::BinaryTree => "binary-tree",
            Algorithm::Ring => "ring",
            Algorithm::Linear => "linear",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown algorithm {s:?}"))
    }
}

/// Per-communicator selection table. The `*_small` / `*_large` entries apply
/// under rendezvous on either side of the thresholds; the `eager_*` entries
/// apply under the eager protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlgorithmConfig {
    pub protocol: Protocol,
    pub size_threshold_bytes: u64,
    pub rank_threshold: u32,
    pub bcast_small: Algorithm,
    pub bcast_large: Algorithm,
    pub reduce_small: Algorithm,
    pub reduce_large: Algorithm,
    pub gather_small: Algorithm,
    pub gather_large: Algorithm,
    pub alltoall: Algorithm,
    pub eager_bcast: Algorithm,
    pub eager_reduce: Algorithm,
    pub eager_gather: Algorithm,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        AlgorithmConfig {
            protocol: Protocol::Eager,
            size_threshold_bytes: 64 * 1024,
            rank_threshold: 4,
            bcast_small: Algorithm::OneToAll,
            bcast_large: Algorithm::RecursiveDoubling,
            reduce_small: Algorithm::AllToOne,
            reduce_large: Algorithm::BinaryTree,
            gather_small: Algorithm::AllToOne,
            gather_large: Algorithm::BinaryTree,
            alltoall: Algorithm::Linear,
            eager_bcast: Algorithm::OneToAll,
            eager_reduce: Algorithm::Ring,
            eager_gather: Algorithm::Ring,
        }
    }
}

const BCAST_ALGOS: &[Algorithm] = &[Algorithm::OneToAll, Algorithm::RecursiveDoubling];
const ROOTED_ALGOS: &[Algorithm] = &[Algorithm::AllToOne, Algorithm::BinaryTree, Algorithm::Ring];

impl AlgorithmConfig {
    pub fn with_protocol(protocol: Protocol) -> Self {
        AlgorithmConfig { protocol, ..AlgorithmConfig::default() }
    }

    /// Forces `algo` for `op` under both protocols and on both sides of the
    /// size threshold.
    pub fn force(mut self, op: Op, algo: Algorithm) -> Self {
        match op {
            Op::Bcast => {
                self.bcast_small = algo;
                self.bcast_large = algo;
                if algo != Algorithm::RecursiveDoubling {
                    self.eager_bcast = algo;
                }
            }
            Op::Reduce => {
                self.reduce_small = algo;
                self.reduce_large = algo;
                self.eager_reduce = algo;
            }
            Op::Gather => {
                self.gather_small = algo;
                self.gather_large = algo;
                self.eager_gather = algo;
            }
            Op::AllToAll => self.alltoall = algo,
            _ => {}
        }
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.size_threshold_bytes == 0 || self.rank_threshold == 0 {
            return Err("algorithm thresholds must be positive".into());
        }
        let check = |name: &str, a: Algorithm, legal: &[Algorithm]| {
            if legal.contains(&a) {
                Ok(())
            } else {
                Err(format!("{a} is not a valid {name} algorithm"))
            }
        };
        check("bcast", self.bcast_small, BCAST_ALGOS)?;
        check("bcast", self.bcast_large, BCAST_ALGOS)?;
        check("eager bcast", self.eager_bcast, &[Algorithm::OneToAll])?;
        for a in [self.reduce_small, self.reduce_large, self.eager_reduce] {
            check("reduce", a, ROOTED_ALGOS)?;
        }
        for a in [self.gather_small, self.gather_large, self.eager_gather] {
            check("gather", a, ROOTED_ALGOS)?;
        }
        check("all-to-all", self.alltoall, &[Algorithm::Linear])
    }
}

/// Picks the algorithm for one collective call.
pub fn select_algorithm(
    op: Op,
    msg_bytes: u64,
    nranks: u32,
    protocol: Protocol,
    cfg: &AlgorithmConfig,
    rdma_capable: bool,
) -> Result<Algorithm, EngineError> {
    if protocol == Protocol::Rendezvous && !rdma_capable && op != Op::Barrier && op != Op::Nop {
        return Err(EngineError::UnsupportedProtocol("rendezvous needs an RDMA-capable transport".into()));
    }
    let small = msg_bytes < cfg.size_threshold_bytes;
    Ok(match (op, protocol) {
        (Op::Nop | Op::Send | Op::Recv, _) => Algorithm::Direct,
        (Op::Barrier, _) => Algorithm::AllToOne,
        (Op::AllToAll, _) => cfg.alltoall,
        (Op::Bcast, Protocol::Eager) => cfg.eager_bcast,
        (Op::Reduce, Protocol::Eager) => cfg.eager_reduce,
        (Op::Gather, Protocol::Eager) => cfg.eager_gather,
        (Op::Bcast, Protocol::Rendezvous) => {
            if small && nranks <= cfg.rank_threshold {
                cfg.bcast_small
            } else {
                cfg.bcast_large
            }
        }
        (Op::Reduce, Protocol::Rendezvous) => {
            if small {
                cfg.reduce_small
            } else {
                cfg.reduce_large
            }
        }
        (Op::Gather, Protocol::Rendezvous) => {
            if small {
                cfg.gather_small
            } else {
                cfg.gather_large
            }
        }
    })
}

/// A rank group: node table, one session per peer, per-peer send sequence
/// counters and the selection table.
#[derive(Clone, Debug)]
pub struct Communicator {
    pub comm_id: u32,
    pub size: u32,
    pub local_rank: u32,
    pub nodes: Vec<NodeId>,
    pub sessions: Vec<Option<SessionId>>,
    pub tx_seq: Vec<u32>,
    pub coll_seq: u32,
    pub algo: AlgorithmConfig,
}

impl Communicator {
    pub fn new(
        comm_id: u32,
        local_rank: u32,
        nodes: Vec<NodeId>,
        sessions: Vec<Option<SessionId>>,
        algo: AlgorithmConfig,
    ) -> Self {
        let size = nodes.len() as u32;
        Communicator { comm_id, size, local_rank, nodes, sessions, tx_seq: vec![0; size as usize], coll_seq: 0, algo }
    }

    /// Tag for the next collective call on this communicator.
    pub(crate) fn next_collective_tag(&mut self) -> u32 {
        let t = COLLECTIVE_TAG_BASE | (self.coll_seq & !COLLECTIVE_TAG_BASE);
        self.coll_seq = self.coll_seq.wrapping_add(1);
        // ANY is reserved
        if t == u32::MAX {
            return self.next_collective_tag();
        }
        t
    }

    pub fn snapshot(&self) -> Value {
        json!({
            "comm_id": self.comm_id,
            "size": self.size,
            "local_rank": self.local_rank,
            "nodes": self.nodes,
            "sessions": self.sessions.iter().map(|s| s.map(|s| s.0)).collect::<Vec<_>>(),
            "tx_seq": self.tx_seq,
            "collectives_issued": self.coll_seq,
            "algorithms": self.algo,
        })
    }
}
