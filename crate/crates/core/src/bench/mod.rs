//! Benchmark harness: cluster launch, point-to-point and collective
//! microbenchmarks, and the distributed matrix-vector demo.
//!
//! Every benchmark validates its outputs against a brute-force oracle on
//! every iteration; a timing row is only produced for correct results.

mod cluster;
pub mod data;
mod matvec;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectives::{Algorithm, AlgorithmConfig, Protocol};
use crate::engine::{Dtype, EngineConfig, EngineError, Op, ReduceFn};
use crate::platform::{Location, MemoryModel, PlatformConfig, PlatformError};
use crate::transport::{AddressTable, CostModel, FabricConfig, PoeKind, TransportError};

pub use cluster::{launch, run_threaded, Driver, SimCluster, SocketNode};
pub use matvec::{relative_residual, run_matvec, MatvecProblem, MatvecReport, Partitioning, RESIDUAL_LIMIT};
pub use run::{run_collective, run_sendrecv};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("rank {rank}: request failed: {error}")]
    RequestFailed { rank: u32, error: String },
    #[error("oracle mismatch: {0}")]
    Oracle(String),
    #[error("no progress possible: {0}")]
    Deadlock(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Network backend behind a cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    /// Virtual-time fabric with a reliable stream POE.
    #[default]
    Sim,
    /// Virtual-time fabric with an RDMA POE.
    RdmaSim,
    /// Virtual-time fabric with a datagram POE.
    DatagramSim,
    /// TCP sockets, one process or thread per rank.
    Stream,
    /// UDP sockets, one process or thread per rank.
    Datagram,
}

impl TransportKind {
    pub fn is_virtual(self) -> bool {
        matches!(self, TransportKind::Sim | TransportKind::RdmaSim | TransportKind::DatagramSim)
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransportKind::Sim => "sim",
            TransportKind::RdmaSim => "rdma-sim",
            TransportKind::DatagramSim => "datagram-sim",
            TransportKind::Stream => "stream",
            TransportKind::Datagram => "datagram",
        })
    }
}

impl std::str::FromStr for TransportKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown transport {s:?}"))
    }
}

/// Harness configuration; also the schema of the `--config` JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub ranks: u32,
    pub transport: TransportKind,
    pub memory_model: MemoryModel,
    pub buffer_location: Location,
    pub protocol: Protocol,
    pub sizes: Vec<u64>,
    pub iterations: u32,
    pub warmup: u32,
    pub cost: CostModel,
    pub seed: u64,
    pub dtype: Dtype,
    pub reduce_fn: ReduceFn,
    pub root: u32,
    /// Forces this algorithm for the collective under test.
    pub algorithm: Option<Algorithm>,
    pub size_threshold_bytes: u64,
    pub rank_threshold: u32,
    /// Datagram drop probability on the simulated fabric.
    pub loss: f64,
    pub reorder_window: u32,
    pub mtu: u32,
    pub engine: EngineConfig,
    /// Socket modes: rank to address table; a free localhost table is picked
    /// when absent.
    pub addresses: Option<AddressTable>,
    pub addresses_file: Option<PathBuf>,
    /// Socket modes: the rank this process runs.
    pub rank: Option<u32>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let algo = AlgorithmConfig::default();
        BenchConfig {
            ranks: 2,
            transport: TransportKind::Sim,
            memory_model: MemoryModel::SharedVirtual,
            buffer_location: Location::Device,
            protocol: Protocol::Eager,
            sizes: vec![1, 1024, 64 * 1024, 1 << 20],
            iterations: 250,
            warmup: 10,
            cost: CostModel::default(),
            seed: 0,
            dtype: Dtype::I32,
            reduce_fn: ReduceFn::Sum,
            root: 0,
            algorithm: None,
            size_threshold_bytes: algo.size_threshold_bytes,
            rank_threshold: algo.rank_threshold,
            loss: 0.0,
            reorder_window: 1,
            mtu: 4096,
            engine: EngineConfig::default(),
            addresses: None,
            addresses_file: None,
            rank: None,
        }
    }
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.ranks == 0 {
            return Err(BenchError::Config("ranks must be at least 1".into()));
        }
        if self.sizes.is_empty() {
            return Err(BenchError::Config("sizes must not be empty".into()));
        }
        if self.iterations == 0 {
            return Err(BenchError::Config("iterations must be at least 1".into()));
        }
        if self.root >= self.ranks {
            return Err(BenchError::Config(format!("root {} outside {} ranks", self.root, self.ranks)));
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err(BenchError::Config(format!("loss {} outside [0, 1)", self.loss)));
        }
        if self.reorder_window == 0 || self.mtu == 0 {
            return Err(BenchError::Config("reorder window and mtu must be positive".into()));
        }
        if let Some(r) = self.rank {
            if r >= self.ranks {
                return Err(BenchError::Config(format!("rank {r} outside {} ranks", self.ranks)));
            }
        }
        self.cost.validate().map_err(BenchError::Config)?;
        self.algorithms(Op::Nop).validate().map_err(BenchError::Config)
    }

    /// Selection table for `op` with the configured override applied.
    pub fn algorithms(&self, op: Op) -> AlgorithmConfig {
        let base = AlgorithmConfig {
            size_threshold_bytes: self.size_threshold_bytes,
            rank_threshold: self.rank_threshold,
            ..AlgorithmConfig::with_protocol(self.protocol)
        };
        match self.algorithm {
            Some(a) => base.force(op, a),
            None => base,
        }
    }

    pub fn platform(&self) -> PlatformConfig {
        PlatformConfig::new(self.memory_model)
    }

    pub fn fabric(&self) -> FabricConfig {
        let poe = match self.transport {
            TransportKind::RdmaSim => PoeKind::Rdma,
            TransportKind::DatagramSim => PoeKind::Datagram { loss: self.loss, reorder_window: self.reorder_window },
            _ => PoeKind::Stream,
        };
        FabricConfig { cost: self.cost, poe, mtu_payload: self.mtu, seed: self.seed, ..FabricConfig::default() }
    }

    /// The address table for socket modes, if one was configured.
    pub fn address_table(&self) -> Result<Option<AddressTable>, BenchError> {
        if let Some(t) = &self.addresses {
            return Ok(Some(t.clone()));
        }
        match &self.addresses_file {
            Some(p) => Ok(Some(AddressTable::load(p)?)),
            None => Ok(None),
        }
    }
}

/// One CSV line: statistics for one operation at one size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub op: String,
    pub algorithm: String,
    pub protocol: String,
    pub transport: String,
    pub ranks: u32,
    pub size_bytes: u64,
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
    pub goodput_bps: u64,
    /// Average per measured iteration.
    pub bytes_on_wire: u64,
    pub drops: u64,
    pub faults: u64,
}

/// Latency summary in microseconds, rounded to the CSV precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
}

impl Stats {
    /// Summarizes picosecond samples. Percentiles use nearest rank.
    pub fn from_samples(samples_ps: &[u64]) -> Self {
        assert!(!samples_ps.is_empty(), "no samples");
        let mut s = samples_ps.to_vec();
        s.sort_unstable();
        let n = s.len();
        let mean_ps = s.iter().map(|&v| v as u128).sum::<u128>() as f64 / n as f64;
        let rank = |q: f64| s[((q * n as f64).ceil() as usize).clamp(1, n) - 1] as f64;
        let median_ps = if n % 2 == 1 { s[n / 2] as f64 } else { (s[n / 2 - 1] as f64 + s[n / 2] as f64) / 2.0 };
        Stats { mean_us: round3(mean_ps / 1e6), median_us: round3(median_ps / 1e6), p99_us: round3(rank(0.99) / 1e6) }
    }
}

fn round3(us: f64) -> f64 {
    (us * 1000.0).round() / 1000.0
}

/// Header line, then one record per row in field order. Latencies carry
/// three decimals.
pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<(), BenchError> {
    let file = std::fs::File::create(path)?;
    write_csv(rows, file)
}

pub fn write_csv<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record([
        "op",
        "algorithm",
        "protocol",
        "transport",
        "ranks",
        "size_bytes",
        "mean_us",
        "median_us",
        "p99_us",
        "goodput_bps",
        "bytes_on_wire",
        "drops",
        "faults",
    ])?;
    for r in rows {
        w.write_record([
            r.op.clone(),
            r.algorithm.clone(),
            r.protocol.clone(),
            r.transport.clone(),
            r.ranks.to_string(),
            r.size_bytes.to_string(),
            format!("{:.3}", r.mean_us),
            format!("{:.3}", r.median_us),
            format!("{:.3}", r.p99_us),
            r.goodput_bps.to_string(),
            r.bytes_on_wire.to_string(),
            r.drops.to_string(),
            r.faults.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(BenchError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_nearest_rank() {
        let s: Vec<u64> = (1..=100).map(|v| v * 1_000_000).collect();
        let st = Stats::from_samples(&s);
        assert_eq!(st.mean_us, 50.5);
        assert_eq!(st.median_us, 50.5);
        assert_eq!(st.p99_us, 99.0);
    }

    #[test]
    fn config_json_uses_defaults() {
        let cfg: BenchConfig = serde_json::from_str(r#"{"ranks": 4, "transport": "rdma-sim"}"#).unwrap();
        assert_eq!(cfg.iterations, 250);
        assert_eq!(cfg.warmup, 10);
        assert_eq!(cfg.transport, TransportKind::RdmaSim);
        assert!(cfg.validate().is_ok());
        assert!(serde_json::from_str::<BenchConfig>(r#"{"rankz": 4}"#).is_err());
    }
}
