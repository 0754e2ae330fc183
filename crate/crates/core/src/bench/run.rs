use crate::collectives::{select_algorithm, Algorithm, Protocol};
use crate::engine::{CcloRequest, DataEndpoint, Op, RequestId, RequestStatus};
use crate::platform::{lock, Buffer, Location, MemoryModel};
use crate::time::{SimDuration, SimTime};

use super::data::{compare, elements_for, input, reduce};
use super::{BenchConfig, BenchError, Driver, ResultRow, Stats};

const SENTINEL: u8 = 0xA5;

/// A user-visible buffer and the buffer the engine actually touches. They
/// differ only when host data must be staged to device memory.
#[derive(Clone, Copy, Debug)]
struct Slot {
    user: Buffer,
    engine: Buffer,
}

impl Slot {
    fn staged(&self) -> bool {
        self.user != self.engine
    }

    fn addr(&self) -> DataEndpoint {
        DataEndpoint::Memory(self.engine.base_vaddr())
    }
}

struct Case {
    rank: u32,
    req: CcloRequest,
    input: Option<Slot>,
    output: Option<(Slot, Vec<u8>)>,
}

struct Iteration {
    latency: SimDuration,
    wire: u64,
    drops: u64,
}

/// Rank 0 streams to rank 1; one row per size with goodput.
pub fn run_sendrecv(d: &mut dyn Driver, cfg: &BenchConfig) -> Result<Vec<ResultRow>, BenchError> {
    if d.size() < 2 {
        return Err(BenchError::Config("send/recv needs at least two ranks".into()));
    }
    run_op(d, cfg, Op::Send)
}

/// Latency rows for one collective (or NOP) across the configured sizes.
pub fn run_collective(d: &mut dyn Driver, cfg: &BenchConfig, op: Op) -> Result<Vec<ResultRow>, BenchError> {
    if !op.is_collective() && op != Op::Nop {
        return Err(BenchError::Config(format!("{op:?} is not a collective")));
    }
    run_op(d, cfg, op)
}

fn run_op(d: &mut dyn Driver, cfg: &BenchConfig, op: Op) -> Result<Vec<ResultRow>, BenchError> {
    cfg.validate()?;
    if cfg.ranks != d.size() {
        return Err(BenchError::Config(format!("config has {} ranks, cluster {}", cfg.ranks, d.size())));
    }
    let algo = cfg.algorithms(op);
    let locals = d.local_ranks();
    for &r in &locals {
        d.node_mut(r).set_algorithm_config(0, algo)?;
    }
    let p = d.size();
    let rdma = d.node(locals[0]).capabilities().rdma;
    let mut rows = Vec::new();
    let sizeless = matches!(op, Op::Barrier | Op::Nop);
    let sizes = if sizeless { &cfg.sizes[..1] } else { &cfg.sizes[..] };
    for &size in sizes {
        let count = if sizeless { 0 } else { elements_for(size, cfg.dtype) };
        let bytes = count * cfg.dtype.size();
        let algorithm = match op {
            Op::Send | Op::Recv | Op::Nop => Algorithm::Direct,
            _ => select_algorithm(op, bytes, p, cfg.protocol, &algo, rdma)?,
        };
        let protocol = if sizeless { Protocol::Eager } else { cfg.protocol };
        let cases = build_cases(d, cfg, op, count)?;
        let result = measure(d, cfg, &cases);
        for c in &cases {
            let plat = d.node(c.rank).platform().clone();
            let mut plat = lock(&plat);
            for s in c.input.iter().chain(c.output.iter().map(|(s, _)| s)) {
                plat.free(&s.user);
                if s.staged() {
                    plat.free(&s.engine);
                }
            }
        }
        let (samples, wire, drops, faults) = result.map_err(|e| annotate(e, op, size))?;
        if !locals.contains(&0) {
            continue;
        }
        let stats = Stats::from_samples(&samples);
        let mean_ps = samples.iter().map(|&v| v as u128).sum::<u128>() as f64 / samples.len() as f64;
        let goodput = if p > 1 && bytes > 0 && mean_ps > 0.0 { (bytes as f64 * 8.0 / (mean_ps * 1e-12)) as u64 } else { 0 };
        rows.push(ResultRow {
            op: op_name(op).into(),
            algorithm: algorithm.to_string(),
            protocol: protocol.to_string(),
            transport: d.transport_kind().to_string(),
            ranks: p,
            size_bytes: bytes,
            mean_us: stats.mean_us,
            median_us: stats.median_us,
            p99_us: stats.p99_us,
            goodput_bps: goodput,
            bytes_on_wire: wire / cfg.iterations as u64,
            drops,
            faults,
        });
    }
    Ok(rows)
}

fn annotate(e: BenchError, op: Op, size: u64) -> BenchError {
    match e {
        BenchError::Oracle(m) => BenchError::Oracle(format!("{} at {size} B: {m}", op_name(op))),
        other => other,
    }
}

pub(crate) fn op_name(op: Op) -> &'static str {
    match op {
        Op::Nop => "nop",
        Op::Send | Op::Recv => "sendrecv",
        Op::Bcast => "bcast",
        Op::Reduce => "reduce",
        Op::Gather => "gather",
        Op::AllToAll => "alltoall",
        Op::Barrier => "barrier",
    }
}

type Measured = (Vec<u64>, u64, u64, u64);

fn measure(d: &mut dyn Driver, cfg: &BenchConfig, cases: &[Case]) -> Result<Measured, BenchError> {
    let mut samples = Vec::with_capacity(cfg.iterations as usize);
    let (mut wire, mut drops, mut faults) = (0, 0, 0);
    for it in 0..cfg.warmup + cfg.iterations {
        let f0 = d.page_faults();
        let r = iterate(d, cases).map_err(|e| match e {
            BenchError::Oracle(m) => BenchError::Oracle(format!("iteration {it}: {m}")),
            other => other,
        })?;
        if it >= cfg.warmup {
            samples.push(r.latency.as_ps());
            wire += r.wire;
            drops += r.drops;
            faults += d.page_faults() - f0;
        }
    }
    Ok((samples, wire, drops, faults))
}

fn alloc_slot(d: &dyn Driver, cfg: &BenchConfig, rank: u32, len: u64) -> Result<Slot, BenchError> {
    let plat = d.node(rank).platform().clone();
    let mut plat = lock(&plat);
    let user = plat.alloc(cfg.buffer_location, len)?;
    let engine = if cfg.memory_model == MemoryModel::Partitioned && cfg.buffer_location == Location::Host {
        plat.alloc(Location::Device, len)?
    } else {
        user
    };
    Ok(Slot { user, engine })
}

/// Allocates and fills every local rank's buffers and works out what each
/// output must contain.
fn build_cases(d: &mut dyn Driver, cfg: &BenchConfig, op: Op, count: u64) -> Result<Vec<Case>, BenchError> {
    let p = d.size();
    let n = count * cfg.dtype.size();
    let root = cfg.root;
    let block = |rank: u32, blocks: u64| input(cfg.dtype, cfg.seed, rank, n, count * blocks);
    let mut cases = Vec::new();
    for rank in d.local_ranks() {
        let (req, inp, out): (CcloRequest, Option<Vec<u8>>, Option<Vec<u8>>) = match op {
            Op::Nop => (CcloRequest::nop(), None, None),
            Op::Barrier => (CcloRequest::barrier(0), None, None),
            Op::Send | Op::Recv => match rank {
                0 => (CcloRequest::send(0, 1, 1, DataEndpoint::None, cfg.dtype, count), Some(block(0, 1)), None),
                1 => (CcloRequest::recv(0, 0, 1, DataEndpoint::None, cfg.dtype, count), None, Some(block(0, 1))),
                _ => continue,
            },
            Op::Bcast => {
                let req = CcloRequest::bcast(0, root, DataEndpoint::None, cfg.dtype, count);
                if rank == root {
                    (req, Some(block(root, 1)), None)
                } else {
                    (req, None, Some(block(root, 1)))
                }
            }
            Op::Reduce => {
                let req = CcloRequest::reduce(0, root, cfg.reduce_fn, cfg.dtype, DataEndpoint::None, DataEndpoint::None, count);
                let want = (rank == root).then(|| {
                    let all: Vec<Vec<u8>> = (0..p).map(|r| block(r, 1)).collect();
                    reduce(cfg.dtype, cfg.reduce_fn, &all)
                });
                (req, Some(block(rank, 1)), want)
            }
            Op::Gather => {
                let req = CcloRequest::gather(0, root, cfg.dtype, DataEndpoint::None, DataEndpoint::None, count);
                let want = (rank == root).then(|| (0..p).flat_map(|r| block(r, 1)).collect());
                (req, Some(block(rank, 1)), want)
            }
            Op::AllToAll => {
                let req = CcloRequest::all_to_all(0, cfg.dtype, DataEndpoint::None, DataEndpoint::None, count);
                let me = rank as usize * n as usize;
                let want = (0..p).flat_map(|r| block(r, p as u64)[me..me + n as usize].to_vec()).collect();
                (req, Some(block(rank, p as u64)), Some(want))
            }
        };
        let input = match inp {
            Some(data) => {
                let s = alloc_slot(d, cfg, rank, data.len() as u64)?;
                lock(d.node(rank).platform()).host_write(&s.user, 0, &data)?;
                Some(s)
            }
            None => None,
        };
        let output = match out {
            Some(want) => Some((alloc_slot(d, cfg, rank, want.len() as u64)?, want)),
            None => None,
        };
        let mut req = req;
        let src = input.map_or(DataEndpoint::None, |s| s.addr());
        let dst = output.as_ref().map_or(DataEndpoint::None, |(s, _)| s.addr());
        match op {
            Op::Bcast => {
                req.src = if rank == root { src } else { dst };
                req.dst = req.src;
            }
            Op::Nop | Op::Barrier => {}
            _ => {
                req.src = src;
                req.dst = dst;
            }
        }
        cases.push(Case { rank, req, input, output });
    }
    Ok(cases)
}

fn iterate(d: &mut dyn Driver, cases: &[Case]) -> Result<Iteration, BenchError> {
    for c in cases {
        if let Some((s, want)) = &c.output {
            let mut plat = lock(d.node(c.rank).platform());
            let junk = vec![SENTINEL; want.len()];
            plat.host_write(&s.user, 0, &junk)?;
            if s.staged() {
                plat.host_write(&s.engine, 0, &junk)?;
            }
        }
    }
    let t0 = d.settle()?;
    let (w0, dr0) = (d.wire_bytes(), d.drops());
    let mut ids: Vec<(u32, RequestId)> = Vec::with_capacity(cases.len());
    for c in cases {
        let stage_in = match c.input {
            Some(s) if s.staged() => lock(d.node(c.rank).platform()).stage(&s.user, &s.engine)?,
            _ => SimDuration::ZERO,
        };
        ids.push((c.rank, d.node_mut(c.rank).call_at(c.req, t0 + stage_in)?));
    }
    d.drive(&ids, &mut |_, _| false)?;
    let (wire, drops) = (d.wire_bytes() - w0, d.drops() - dr0);
    let mut latency = SimDuration::ZERO;
    for (c, &(rank, id)) in cases.iter().zip(&ids) {
        let done: SimTime = match d.node_mut(rank).retire(id) {
            Some(RequestStatus::Complete { completed_at, .. }) => completed_at,
            Some(RequestStatus::Failed { error, .. }) => return Err(BenchError::RequestFailed { rank, error }),
            other => return Err(BenchError::Deadlock(format!("rank {rank} request ended as {other:?}"))),
        };
        let mut lat = done - t0;
        if let Some((s, want)) = &c.output {
            let mut plat = lock(d.node(rank).platform());
            if s.staged() {
                lat += plat.stage(&s.engine, &s.user)?;
            }
            let got = plat.host_read(&s.user)?;
            compare(c.req.dtype, &got, want).map_err(|m| BenchError::Oracle(format!("rank {rank}: {m}")))?;
        }
        latency = latency.max(lat);
    }
    Ok(Iteration { latency, wire, drops })
}
