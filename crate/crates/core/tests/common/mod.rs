//! Helpers shared by the integration tests: an independent input generator
//! and result oracle, and a runner that executes one operation on any driver
//! with memory or stream-port endpoints.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cclo::bench::{BenchConfig, Driver, TransportKind};
use cclo::collectives::{Algorithm, Protocol};
use cclo::engine::{CcloRequest, DataEndpoint, Dtype, Node, Op, ReduceFn, RequestStatus};
use cclo::platform::{lock, Buffer, Location};

pub const IN_PORT: u8 = 0;
pub const OUT_PORT: u8 = 1;
const SENTINEL: u8 = 0x5A;
const TAG: u32 = 7;

/// Output bytes per rank; `None` where the operation produces nothing.
pub type Outputs = Vec<(u32, Option<Vec<u8>>)>;

/// One operation over communicator 0 and the data every rank feeds it.
#[derive(Clone, Debug)]
pub struct Case {
    pub op: Op,
    pub ranks: u32,
    pub root: u32,
    pub dtype: Dtype,
    pub func: ReduceFn,
    pub count: u64,
    pub protocol: Protocol,
    pub algorithm: Option<Algorithm>,
    pub stream_src: bool,
    pub stream_dst: bool,
    pub data_seed: u64,
    pub chunk_seed: u64,
}

impl Case {
    pub fn new(op: Op, ranks: u32, dtype: Dtype, count: u64, protocol: Protocol, algorithm: Option<Algorithm>) -> Self {
        Case {
            op,
            ranks,
            root: 0,
            dtype,
            func: ReduceFn::Sum,
            count,
            protocol,
            algorithm,
            stream_src: false,
            stream_dst: false,
            data_seed: 0,
            chunk_seed: 0,
        }
    }

    /// A random operation with a random choice of stream-port endpoints.
    pub fn random_streaming(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = [Op::Send, Op::Bcast, Op::Reduce, Op::Gather, Op::AllToAll][rng.gen_range(0..5)];
        let protocol = if rng.gen_bool(0.5) { Protocol::Eager } else { Protocol::Rendezvous };
        let algorithm = match (op, protocol) {
            (Op::Bcast, Protocol::Rendezvous) => {
                [None, Some(Algorithm::OneToAll), Some(Algorithm::RecursiveDoubling)][rng.gen_range(0..3)]
            }
            (Op::Reduce | Op::Gather, Protocol::Rendezvous) => {
                [None, Some(Algorithm::AllToOne), Some(Algorithm::BinaryTree)][rng.gen_range(0..3)]
            }
            _ => None,
        };
        let ranks = rng.gen_range(2..=6u32);
        let (stream_src, stream_dst) = [(true, false), (false, true), (true, true)][rng.gen_range(0..3)];
        Case {
            op,
            ranks,
            root: rng.gen_range(0..ranks),
            dtype: Dtype::ALL[rng.gen_range(0..4)],
            func: if rng.gen_bool(0.5) { ReduceFn::Sum } else { ReduceFn::Max },
            count: rng.gen_range(1..=3000),
            protocol,
            algorithm,
            stream_src,
            stream_dst,
            data_seed: rng.gen(),
            chunk_seed: rng.gen(),
        }
    }

    pub fn describe(&self) -> String {
        let algo = self.algorithm.map_or("default".to_string(), |a| a.to_string());
        format!(
            "{:?} {algo} {} P={} root={} {:?} {:?} count={}",
            self.op, self.protocol, self.ranks, self.root, self.dtype, self.func, self.count
        )
    }

    fn block_bytes(&self) -> usize {
        (self.count * self.dtype.size()) as usize
    }

    /// Bytes `rank` contributes, if any. Integers cover the full range and
    /// floats lie in [0.5, 1.5) so sums never cancel.
    pub fn input(&self, rank: u32) -> Option<Vec<u8>> {
        let n = self.block_bytes();
        let len = match self.op {
            Op::Send => (rank == 0).then_some(n),
            Op::Bcast => (rank == self.root).then_some(n),
            Op::Reduce | Op::Gather => Some(n),
            Op::AllToAll => Some(n * self.ranks as usize),
            _ => None,
        }?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed ^ (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut v = vec![0u8; len];
        match self.dtype {
            Dtype::I32 | Dtype::I64 => rng.fill(&mut v[..]),
            Dtype::F32 => v.chunks_exact_mut(4).for_each(|c| c.copy_from_slice(&rng.gen_range(0.5f32..1.5).to_le_bytes())),
            Dtype::F64 => v.chunks_exact_mut(8).for_each(|c| c.copy_from_slice(&rng.gen_range(0.5f64..1.5).to_le_bytes())),
        }
        Some(v)
    }

    pub fn output_len(&self, rank: u32) -> Option<usize> {
        let n = self.block_bytes();
        let p = self.ranks as usize;
        match self.op {
            Op::Send => (rank == 1).then_some(n),
            Op::Bcast => (rank != self.root).then_some(n),
            Op::Reduce => (rank == self.root).then_some(n),
            Op::Gather => (rank == self.root).then_some(n * p),
            Op::AllToAll => Some(n * p),
            _ => None,
        }
    }

    /// What `rank`'s output must hold, computed by brute force.
    pub fn expected(&self, rank: u32) -> Option<Vec<u8>> {
        self.output_len(rank)?;
        let n = self.block_bytes();
        let all = || (0..self.ranks).map(|r| self.input(r).unwrap());
        Some(match self.op {
            Op::Send => self.input(0).unwrap(),
            Op::Bcast => self.input(self.root).unwrap(),
            Op::Reduce => oracle_reduce(self.dtype, self.func, &all().collect::<Vec<_>>()),
            Op::Gather => all().flatten().collect(),
            Op::AllToAll => {
                let at = rank as usize * n;
                all().flat_map(|v| v[at..at + n].to_vec()).collect()
            }
            _ => unreachable!(),
        })
    }

    /// Checks one rank's output against the oracle.
    pub fn check(&self, rank: u32, got: &[u8]) -> Result<(), String> {
        let want = self.expected(rank).ok_or_else(|| format!("rank {rank} has no output"))?;
        oracle_compare(self.dtype, got, &want).map_err(|m| format!("{}: rank {rank}: {m}", self.describe()))
    }

    pub fn config(&self, transport: TransportKind) -> BenchConfig {
        BenchConfig { ranks: self.ranks, transport, protocol: self.protocol, algorithm: self.algorithm, ..BenchConfig::default() }
    }

    fn request(&self, rank: u32, src: DataEndpoint, dst: DataEndpoint) -> Option<CcloRequest> {
        let (c, d) = (self.count, self.dtype);
        Some(match self.op {
            Op::Send => match rank {
                0 => CcloRequest::send(0, 1, TAG, src, d, c),
                1 => CcloRequest::recv(0, 0, TAG, dst, d, c),
                _ => return None,
            },
            Op::Bcast => CcloRequest::bcast(0, self.root, if rank == self.root { src } else { dst }, d, c),
            Op::Reduce => CcloRequest::reduce(0, self.root, self.func, d, src, dst, c),
            Op::Gather => CcloRequest::gather(0, self.root, d, src, dst, c),
            Op::AllToAll => CcloRequest::all_to_all(0, d, src, dst, c),
            Op::Barrier => CcloRequest::barrier(0),
            _ => CcloRequest::nop(),
        })
    }

    /// Runs the operation on every rank `d` owns and returns each local rank's
    /// output bytes. With `streaming`, the endpoints selected by `stream_src`
    /// and `stream_dst` are stream ports fed and drained in random chunks.
    pub fn execute(&self, d: &mut dyn Driver, streaming: bool) -> Result<Outputs, String> {
        let err = |e: &dyn std::fmt::Display| format!("{}: {e}", self.describe());
        let cfg = self.config(d.transport_kind());
        let algo = cfg.algorithms(self.op);
        let locals = d.local_ranks();
        let (ss, sd) = (streaming && self.stream_src, streaming && self.stream_dst);
        let mut bufs: Vec<(u32, Option<Buffer>, Option<Buffer>)> = Vec::new();
        let mut reqs = Vec::new();
        for &r in &locals {
            let node = d.node_mut(r);
            node.set_algorithm_config(0, algo).map_err(|e| err(&e))?;
            let mut plat = lock(node.platform());
            let (mut src, mut dst) = (DataEndpoint::None, DataEndpoint::None);
            let (mut in_buf, mut out_buf) = (None, None);
            if let Some(data) = self.input(r) {
                if ss {
                    src = DataEndpoint::Stream(IN_PORT);
                } else {
                    let b = plat.alloc(Location::Device, data.len() as u64).map_err(|e| err(&e))?;
                    plat.host_write(&b, 0, &data).map_err(|e| err(&e))?;
                    src = DataEndpoint::Memory(b.base_vaddr());
                    in_buf = Some(b);
                }
            }
            if let Some(len) = self.output_len(r) {
                if sd {
                    dst = DataEndpoint::Stream(OUT_PORT);
                } else {
                    let b = plat.alloc(Location::Device, len as u64).map_err(|e| err(&e))?;
                    plat.host_write(&b, 0, &vec![SENTINEL; len]).map_err(|e| err(&e))?;
                    dst = DataEndpoint::Memory(b.base_vaddr());
                    out_buf = Some(b);
                }
            }
            drop(plat);
            bufs.push((r, in_buf, out_buf));
            if let Some(req) = self.request(r, src, dst) {
                reqs.push((r, req));
            }
        }
        let t0 = d.settle().map_err(|e| err(&e))?;
        let mut ids = Vec::new();
        for (r, req) in reqs {
            ids.push((r, d.node_mut(r).call_at(req, t0).map_err(|e| err(&e))?));
        }
        let inputs: Vec<Option<Vec<u8>>> = (0..self.ranks).map(|r| if ss { self.input(r) } else { None }).collect();
        let mut fed = vec![0usize; self.ranks as usize];
        let mut pulled: Vec<Vec<u8>> = vec![Vec::new(); self.ranks as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(self.chunk_seed);
        let mut pump = |r: u32, node: &mut Node| -> bool {
            let mut moved = false;
            if let Some(data) = &inputs[r as usize] {
                let at = fed[r as usize];
                if at < data.len() {
                    let end = (at + rng.gen_range(1..=4096)).min(data.len());
                    let n = node.stream_push(IN_PORT, &data[at..end]).unwrap();
                    fed[r as usize] += n;
                    moved |= n > 0;
                }
            }
            if sd {
                let got = node.stream_pull(OUT_PORT, rng.gen_range(1..=4096)).unwrap();
                moved |= !got.is_empty();
                pulled[r as usize].extend(got);
            }
            moved
        };
        let driven = d.drive(&ids, &mut pump).map_err(|e| err(&e));
        let mut failure = driven.err();
        for &(r, id) in &ids {
            if let Some(RequestStatus::Failed { error, .. }) = d.node_mut(r).retire(id) {
                failure.get_or_insert(format!("{}: rank {r}: {error}", self.describe()));
            }
        }
        let mut out = Vec::new();
        for (r, in_buf, out_buf) in bufs {
            let node = d.node_mut(r);
            if sd {
                pulled[r as usize].extend(node.stream_pull(OUT_PORT, usize::MAX).unwrap());
            }
            let mut plat = lock(node.platform());
            let got = match (self.output_len(r), out_buf) {
                (None, _) => None,
                (Some(_), Some(b)) => Some(plat.host_read(&b).map_err(|e| err(&e))?),
                (Some(_), None) => Some(std::mem::take(&mut pulled[r as usize])),
            };
            for b in [in_buf, out_buf].into_iter().flatten() {
                plat.free(&b);
            }
            out.push((r, got));
        }
        match failure {
            Some(f) => Err(f),
            None => Ok(out),
        }
    }

    /// Runs on `d` and checks every local output against the oracle.
    pub fn verify(&self, d: &mut dyn Driver) -> Result<(), String> {
        for (r, got) in self.execute(d, false)? {
            if let Some(got) = got {
                self.check(r, &got)?;
            }
        }
        Ok(())
    }
}

/// Element-wise reduction: f64 accumulation for floats, wrapping for integers.
pub fn oracle_reduce(dtype: Dtype, func: ReduceFn, inputs: &[Vec<u8>]) -> Vec<u8> {
    let w = dtype.size() as usize;
    let n = inputs[0].len() / w;
    let mut out = Vec::with_capacity(n * w);
    for e in 0..n {
        let elems = inputs.iter().map(|v| &v[e * w..(e + 1) * w]);
        match dtype {
            Dtype::I32 => {
                let xs = elems.map(|b| i32::from_le_bytes(b.try_into().unwrap()));
                let r = match func {
                    ReduceFn::Sum => xs.fold(0i32, |a, x| a.wrapping_add(x)),
                    ReduceFn::Max => xs.max().unwrap(),
                };
                out.extend(r.to_le_bytes());
            }
            Dtype::I64 => {
                let xs = elems.map(|b| i64::from_le_bytes(b.try_into().unwrap()));
                let r = match func {
                    ReduceFn::Sum => xs.fold(0i64, |a, x| a.wrapping_add(x)),
                    ReduceFn::Max => xs.max().unwrap(),
                };
                out.extend(r.to_le_bytes());
            }
            Dtype::F32 => {
                let xs = elems.map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
                let r = match func {
                    ReduceFn::Sum => xs.sum::<f64>(),
                    ReduceFn::Max => xs.fold(f64::MIN, f64::max),
                };
                out.extend((r as f32).to_le_bytes());
            }
            Dtype::F64 => {
                let xs = elems.map(|b| f64::from_le_bytes(b.try_into().unwrap()));
                let r = match func {
                    ReduceFn::Sum => xs.sum::<f64>(),
                    ReduceFn::Max => xs.fold(f64::MIN, f64::max),
                };
                out.extend(r.to_le_bytes());
            }
        }
    }
    out
}

/// Exact for integers; relative error at most 1e-6 for F32 and 1e-12 for F64.
pub fn oracle_compare(dtype: Dtype, got: &[u8], want: &[u8]) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{} bytes, expected {}", got.len(), want.len()));
    }
    let w = dtype.size() as usize;
    for (i, (g, e)) in got.chunks_exact(w).zip(want.chunks_exact(w)).enumerate() {
        let ok = match dtype {
            Dtype::I32 | Dtype::I64 => g == e,
            Dtype::F32 => {
                let (g, e) = (f32::from_le_bytes(g.try_into().unwrap()) as f64, f32::from_le_bytes(e.try_into().unwrap()) as f64);
                (g - e).abs() <= 1e-6 * e.abs()
            }
            Dtype::F64 => {
                let (g, e) = (f64::from_le_bytes(g.try_into().unwrap()), f64::from_le_bytes(e.try_into().unwrap()));
                (g - e).abs() <= 1e-12 * e.abs()
            }
        };
        if !ok {
            return Err(format!("element {i}: got {g:02x?} expected {e:02x?}"));
        }
    }
    Ok(())
}

/// Element counts for the nominal sizes, at least one element each.
pub fn count_for(bytes: u64, dtype: Dtype) -> u64 {
    bytes.div_ceil(dtype.size()).max(1)
}

/// The algorithms the selection table may pick for `op` under `protocol`.
pub fn table_algorithms(op: Op, protocol: Protocol) -> Vec<Option<Algorithm>> {
    use Algorithm::*;
    match (op, protocol) {
        (Op::Bcast, Protocol::Eager) => vec![Some(OneToAll)],
        (Op::Bcast, Protocol::Rendezvous) => vec![Some(OneToAll), Some(RecursiveDoubling)],
        (Op::Reduce | Op::Gather, Protocol::Eager) => vec![Some(Ring)],
        (Op::Reduce | Op::Gather, Protocol::Rendezvous) => vec![Some(AllToOne), Some(BinaryTree)],
        _ => vec![None],
    }
}
