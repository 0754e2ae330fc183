use std::path::PathBuf;
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};

use cclo::bench::{
    emit_csv, launch, run_collective, run_matvec, run_sendrecv, BenchConfig, BenchError, MatvecProblem, Partitioning,
    ResultRow, TransportKind,
};
use cclo::collectives::{Algorithm, Protocol};
use cclo::engine::{CcloRequest, Dtype, Op};
use cclo::platform::{Location, MemoryModel};
use cclo::transport::AddressTable;

#[derive(Parser)]
#[command(name = "cclo-sim", version, about = "Collective offload engine simulator and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Bring up a cluster, open the full mesh and report it.
    Launch(Common),
    #[command(subcommand)]
    Bench(BenchCmd),
    #[command(subcommand)]
    Demo(DemoCmd),
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Unidirectional rank 0 -> rank 1 throughput.
    Sendrecv(Common),
    /// Collective latency.
    Collective {
        /// Comma-separated: bcast, reduce, gather, alltoall, barrier, nop.
        #[arg(long, default_value = "bcast,reduce,gather,alltoall,barrier")]
        op: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Distributed vector-matrix product checked against a single node.
    Matvec {
        #[arg(long, default_value_t = 256)]
        rows: usize,
        #[arg(long, default_value_t = 256)]
        cols: usize,
        /// `column` or `checkerboard:RxC`.
        #[arg(long, default_value = "column")]
        partition: Partitioning,
        /// Use the identity matrix.
        #[arg(long)]
        identity: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    ranks: Option<u32>,
    /// sim, rdma-sim, datagram-sim, stream or datagram.
    #[arg(long)]
    transport: Option<TransportKind>,
    /// eager or rendezvous.
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Comma-separated byte counts; K/M suffixes allowed.
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    iters: Option<u32>,
    #[arg(long)]
    warmup: Option<u32>,
    /// JSON file with BenchConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long, value_parser = parse_dtype)]
    dtype: Option<Dtype>,
    #[arg(long)]
    root: Option<u32>,
    /// shared-virtual or partitioned.
    #[arg(long, value_parser = parse_model)]
    memory: Option<MemoryModel>,
    /// host or device.
    #[arg(long, value_parser = parse_location)]
    buffers: Option<Location>,
    #[arg(long)]
    loss: Option<f64>,
    /// Socket modes: run only this rank (otherwise one child process per rank).
    #[arg(long)]
    rank: Option<u32>,
    /// Socket modes: JSON address table.
    #[arg(long)]
    addresses: Option<PathBuf>,
}

fn parse_json_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|e| e.to_string())
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    parse_json_enum(s)
}

fn parse_model(s: &str) -> Result<MemoryModel, String> {
    parse_json_enum(s)
}

fn parse_location(s: &str) -> Result<Location, String> {
    parse_json_enum(s)
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, mult) = match s.char_indices().last() {
        Some((i, 'K' | 'k')) => (&s[..i], 1024),
        Some((i, 'M' | 'm')) => (&s[..i], 1 << 20),
        _ => (s, 1),
    };
    num.parse::<u64>().map(|n| n * mult).map_err(|e| format!("size {s:?}: {e}"))
}

fn parse_op(s: &str) -> Result<Op, String> {
    match s.trim() {
        "bcast" => Ok(Op::Bcast),
        "reduce" => Ok(Op::Reduce),
        "gather" => Ok(Op::Gather),
        "alltoall" | "all-to-all" => Ok(Op::AllToAll),
        "barrier" => Ok(Op::Barrier),
        "nop" => Ok(Op::Nop),
        other => Err(format!("unknown collective {other:?}")),
    }
}

impl Common {
    fn config(&self) -> Result<BenchConfig, BenchError> {
        let mut c = match &self.config {
            Some(p) => BenchConfig::load(p)?,
            None => BenchConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $field:ident),*) => { $(if let Some(v) = self.$f.clone() { c.$field = v; })* };
        }
        set!(ranks => ranks, transport => transport, protocol => protocol, iters => iterations, warmup => warmup,
             seed => seed, dtype => dtype, root => root, memory => memory_model, buffers => buffer_location,
             loss => loss);
        if let Some(a) = self.algorithm {
            c.algorithm = Some(a);
        }
        if let Some(s) = &self.sizes {
            c.sizes = s.split(',').map(parse_size).collect::<Result<_, _>>().map_err(BenchError::Config)?;
        }
        if let Some(r) = self.rank {
            c.rank = Some(r);
        }
        if let Some(p) = &self.addresses {
            c.addresses_file = Some(p.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_rows(rows: &[ResultRow]) {
    if rows.is_empty() {
        return;
    }
    println!(
        "{:<22} {:<26} {:<10} {:<12} {:>5} {:>10} {:>11} {:>11} {:>11} {:>14} {:>12}",
        "op", "algorithm", "protocol", "transport", "ranks", "bytes", "mean_us", "median_us", "p99_us", "goodput_bps", "wire_bytes"
    );
    for r in rows {
        println!(
            "{:<22} {:<26} {:<10} {:<12} {:>5} {:>10} {:>11.3} {:>11.3} {:>11.3} {:>14} {:>12}",
            r.op, r.algorithm, r.protocol, r.transport, r.ranks, r.size_bytes, r.mean_us, r.median_us, r.p99_us,
            r.goodput_bps, r.bytes_on_wire
        );
    }
}

fn finish(rows: Vec<ResultRow>, cfg: &BenchConfig, csv: &Option<PathBuf>) -> Result<(), BenchError> {
    print_rows(&rows);
    let holds_rank0 = cfg.transport.is_virtual() || cfg.rank == Some(0);
    if let (Some(path), true) = (csv, holds_rank0) {
        emit_csv(&rows, path)?;
    }
    Ok(())
}

/// Socket transports without `--rank`: re-run this command once per rank as
/// child processes sharing a freshly picked address table.
fn spawn_ranks(cfg: &BenchConfig) -> Result<bool, BenchError> {
    let table = match cfg.address_table()? {
        Some(t) => t,
        None => AddressTable::free_localhost(cfg.ranks)?,
    };
    let path = std::env::temp_dir().join(format!("cclo-sim-{}.json", std::process::id()));
    table.save(&path)?;
    let exe = std::env::current_exe()?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let children: Vec<_> = (0..cfg.ranks)
        .map(|r| {
            Command::new(&exe)
                .args(&args)
                .arg("--rank")
                .arg(r.to_string())
                .arg("--addresses")
                .arg(&path)
                .spawn()
        })
        .collect::<Result<_, _>>()?;
    let mut ok = true;
    for (r, mut c) in children.into_iter().enumerate() {
        let status = c.wait()?;
        if !status.success() {
            eprintln!("rank {r} exited with {status}");
            ok = false;
        }
    }
    let _ = std::fs::remove_file(&path);
    Ok(ok)
}

fn run(cmd: Cmd) -> Result<bool, BenchError> {
    let common = match &cmd {
        Cmd::Launch(c) | Cmd::Bench(BenchCmd::Sendrecv(c)) => c,
        Cmd::Bench(BenchCmd::Collective { common, .. }) | Cmd::Demo(DemoCmd::Matvec { common, .. }) => common,
    };
    let cfg = common.config()?;
    if !cfg.transport.is_virtual() && cfg.rank.is_none() {
        return spawn_ranks(&cfg);
    }
    let mut d = launch(&cfg)?;
    match &cmd {
        Cmd::Launch(_) => {
            let locals = d.local_ranks();
            let ids: Vec<_> = locals
                .iter()
                .map(|&r| d.node_mut(r).call(CcloRequest::barrier(0)).map(|id| (r, id)))
                .collect::<Result<_, _>>()?;
            d.wait(&ids)?;
            for r in locals {
                let n = d.node(r);
                println!("rank {r}: node {} with {} sessions on {}", n.node_id(), n.transport().session_count(), cfg.transport);
            }
        }
        Cmd::Bench(BenchCmd::Sendrecv(c)) => finish(run_sendrecv(d.as_mut(), &cfg)?, &cfg, &c.csv)?,
        Cmd::Bench(BenchCmd::Collective { op, common }) => {
            let mut rows = Vec::new();
            for name in op.split(',') {
                let op = parse_op(name).map_err(BenchError::Config)?;
                rows.extend(run_collective(d.as_mut(), &cfg, op)?);
            }
            finish(rows, &cfg, &common.csv)?;
        }
        Cmd::Demo(DemoCmd::Matvec { rows, cols, partition, identity, common }) => {
            let problem = if *identity {
                if rows != cols {
                    return Err(BenchError::Config("identity needs a square matrix".into()));
                }
                MatvecProblem::identity(*rows, cfg.seed)
            } else {
                MatvecProblem::random(*rows, *cols, cfg.seed)
            };
            let cfg = BenchConfig { dtype: Dtype::F32, ..cfg };
            if let Some(report) = run_matvec(d.as_mut(), &cfg, &problem, *partition)? {
                println!("relative residual {:e}", report.residual);
                finish(vec![report.row], &cfg, &common.csv)?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
