//! Distributed vector-matrix multiplication.
//!
//! Column partitioning: every rank multiplies its column block by the
//! matching slice of `x` and the partial vectors are summed with `reduce`.
//! Checkerboard partitioning on an `r x c` grid: rank `i * c + j` owns block
//! `(i, j)`; the row-block partials of grid column `j` are gathered
//! (concatenated) at rank `j`, then grid-column results are reduced at rank 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collectives::{select_algorithm, AlgorithmConfig};
use crate::engine::{CcloRequest, DataEndpoint, Dtype, Op, ReduceFn, RequestId};
use crate::platform::{lock, Buffer, Location};
use crate::time::SimTime;

use super::data::{bytes_to_f32s, f32s_to_bytes};
use super::{BenchConfig, BenchError, Driver, ResultRow, Stats};

/// Largest relative residual accepted against the single-node product.
pub const RESIDUAL_LIMIT: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partitioning {
    Column,
    Checkerboard { rows: u32, cols: u32 },
}

impl Partitioning {
    fn grid(self, ranks: u32) -> (u32, u32) {
        match self {
            Partitioning::Column => (1, ranks),
            Partitioning::Checkerboard { rows, cols } => (rows, cols),
        }
    }
}

impl std::str::FromStr for Partitioning {
    type Err = String;
    /// `column` or `checkerboard:RxC`.
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "column" {
            return Ok(Partitioning::Column);
        }
        let grid = s.strip_prefix("checkerboard:").ok_or_else(|| format!("unknown partitioning {s:?}"))?;
        let (r, c) = grid.split_once('x').ok_or_else(|| format!("grid {grid:?} is not RxC"))?;
        let parse = |v: &str| v.parse::<u32>().map_err(|e| format!("grid {grid:?}: {e}"));
        Ok(Partitioning::Checkerboard { rows: parse(r)?, cols: parse(c)? })
    }
}

/// `y = W x` with `W` stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MatvecProblem {
    pub rows: usize,
    pub cols: usize,
    pub matrix: Vec<f32>,
    pub x: Vec<f32>,
}

impl MatvecProblem {
    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let x = (0..cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        MatvecProblem { rows, cols, matrix, x }
    }

    pub fn identity(n: usize, seed: u64) -> Self {
        let mut p = MatvecProblem::random(n, n, seed);
        p.matrix = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
        p
    }

    /// Single-node product accumulated in f64.
    pub fn reference(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.matrix[i * self.cols + j] as f64 * self.x[j] as f64).sum())
            .collect()
    }

    /// f32 product of rows `r0..r1` restricted to columns `c0..c1`.
    fn block_product(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<f32> {
        (r0..r1)
            .map(|i| (c0..c1).map(|j| self.matrix[i * self.cols + j] * self.x[j]).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatvecReport {
    pub row: ResultRow,
    /// `||y - y_ref|| / ||y_ref||`.
    pub residual: f64,
    pub result: Vec<f32>,
}

pub fn relative_residual(got: &[f32], want: &[f64]) -> f64 {
    let err: f64 = got.iter().zip(want).map(|(&g, &w)| (g as f64 - w).powi(2)).sum();
    let norm: f64 = want.iter().map(|w| w * w).sum();
    if norm == 0.0 {
        err.sqrt()
    } else {
        (err / norm).sqrt()
    }
}

struct Layout {
    grid_cols: u32,
    gather_comm_base: u32,
    leader_comm: u32,
}

impl Layout {
    fn new(grid_rows: u32, grid_cols: u32) -> Self {
        let base = 1 + ((grid_rows * 64 + grid_cols) << 8);
        Layout { grid_cols, gather_comm_base: base, leader_comm: base + 255 }
    }

    fn coords(&self, rank: u32) -> (u32, u32) {
        (rank / self.grid_cols, rank % self.grid_cols)
    }
}

/// Runs the product on the cluster and checks it on the process holding
/// rank 0, which is the only one that gets a report.
pub fn run_matvec(
    d: &mut dyn Driver,
    cfg: &BenchConfig,
    problem: &MatvecProblem,
    part: Partitioning,
) -> Result<Option<MatvecReport>, BenchError> {
    let p = d.size();
    let (gr, gc) = part.grid(p);
    if gr * gc != p {
        return Err(BenchError::Config(format!("{gr}x{gc} grid needs {} ranks, cluster has {p}", gr * gc)));
    }
    if !problem.rows.is_multiple_of(gr as usize) || !problem.cols.is_multiple_of(gc as usize) {
        return Err(BenchError::Config(format!(
            "{}x{} matrix does not divide into a {gr}x{gc} grid",
            problem.rows, problem.cols
        )));
    }
    if gc > 254 {
        return Err(BenchError::Config("at most 254 grid columns".into()));
    }
    let lay = Layout::new(gr, gc);
    let algo = AlgorithmConfig { protocol: cfg.protocol, ..cfg.algorithms(Op::Reduce) };
    for r in d.local_ranks() {
        let (i, j) = lay.coords(r);
        let gather = lay.gather_comm_base + j;
        let node = d.node_mut(r);
        if node.communicator(gather).is_none() {
            node.configure_communicator(gather, (0..gr).map(|k| k * gc + j).collect(), algo)?;
        }
        if i == 0 && node.communicator(lay.leader_comm).is_none() {
            node.configure_communicator(lay.leader_comm, (0..gc).collect(), algo)?;
        }
    }

    let reference = problem.reference();
    let block_rows = problem.rows / gr as usize;
    let block_cols = problem.cols / gc as usize;
    let rows_bytes = (problem.rows * 4) as u64;
    let mut bufs = Vec::new();
    for r in d.local_ranks() {
        let (i, j) = lay.coords(r);
        let (r0, c0) = (i as usize * block_rows, j as usize * block_cols);
        let partial = problem.block_product(r0, r0 + block_rows, c0, c0 + block_cols);
        let mut plat = lock(d.node(r).platform());
        let part_buf = plat.alloc(Location::Device, (block_rows * 4) as u64)?;
        plat.host_write(&part_buf, 0, &f32s_to_bytes(&partial))?;
        let column = if i == 0 { Some(plat.alloc(Location::Device, rows_bytes)?) } else { None };
        let result = if r == 0 { Some(plat.alloc(Location::Device, rows_bytes)?) } else { None };
        bufs.push((r, part_buf, column, result));
    }

    let mut samples = Vec::new();
    let mut result = Vec::new();
    let mut residual = 0.0;
    let (mut wire, mut drops) = (0, 0);
    let outcome = (|| -> Result<(), BenchError> {
        for _ in 0..cfg.iterations {
            let t0 = d.settle()?;
            let w0 = (d.wire_bytes(), d.drops());
            let mut done_at = t0;
            let bcount = block_rows as u64;
            let count = problem.rows as u64;
            if gr > 1 {
                let mut ids = Vec::new();
                for &(r, part_buf, column, _) in &bufs {
                    let (_, j) = lay.coords(r);
                    let dst = column.map_or(DataEndpoint::None, |b| mem(&b));
                    let req = CcloRequest::gather(lay.gather_comm_base + j, 0, Dtype::F32, mem(&part_buf), dst, bcount);
                    ids.push((r, d.node_mut(r).call_at(req, t0)?));
                }
                done_at = done_at.max(finish(d, &ids)?);
            }
            let mut ids = Vec::new();
            for &(r, part_buf, column, out) in &bufs {
                let Some(column) = column else { continue };
                let src = if gr > 1 { mem(&column) } else { mem(&part_buf) };
                let dst = out.map_or(DataEndpoint::None, |b| mem(&b));
                let req = CcloRequest::reduce(lay.leader_comm, 0, ReduceFn::Sum, Dtype::F32, src, dst, count);
                let at = done_at.max(d.node(r).now());
                ids.push((r, d.node_mut(r).call_at(req, at)?));
            }
            done_at = done_at.max(finish(d, &ids)?);
            samples.push((done_at - t0).as_ps());
            wire += d.wire_bytes() - w0.0;
            drops += d.drops() - w0.1;
            if let Some(&(_, _, _, Some(out))) = bufs.iter().find(|b| b.0 == 0) {
                result = bytes_to_f32s(&lock(d.node(0).platform()).host_read(&out)?);
                residual = relative_residual(&result, &reference);
                if residual > RESIDUAL_LIMIT || residual.is_nan() {
                    return Err(BenchError::Oracle(format!("matvec residual {residual:e} exceeds {RESIDUAL_LIMIT:e}")));
                }
            }
        }
        Ok(())
    })();
    for &(r, a, b, c) in &bufs {
        let mut plat = lock(d.node(r).platform());
        for buf in [Some(a), b, c].into_iter().flatten() {
            plat.free(&buf);
        }
    }
    outcome?;
    if !d.local_ranks().contains(&0) {
        return Ok(None);
    }
    let rdma = d.node(0).capabilities().rdma;
    let reduce_algo = select_algorithm(Op::Reduce, rows_bytes, gc, cfg.protocol, &algo, rdma)?;
    let algorithm = if gr > 1 {
        let g = select_algorithm(Op::Gather, (block_rows * 4) as u64, gr, cfg.protocol, &algo, rdma)?;
        format!("{g}+{reduce_algo}")
    } else {
        reduce_algo.to_string()
    };
    let stats = Stats::from_samples(&samples);
    let op = match part {
        Partitioning::Column => "matvec-column".to_string(),
        Partitioning::Checkerboard { rows, cols } => format!("matvec-checkerboard-{rows}x{cols}"),
    };
    let row = ResultRow {
        op,
        algorithm,
        protocol: cfg.protocol.to_string(),
        transport: d.transport_kind().to_string(),
        ranks: p,
        size_bytes: (problem.rows * problem.cols * 4) as u64,
        mean_us: stats.mean_us,
        median_us: stats.median_us,
        p99_us: stats.p99_us,
        goodput_bps: 0,
        bytes_on_wire: wire / cfg.iterations as u64,
        drops,
        faults: d.page_faults(),
    };
    Ok(Some(MatvecReport { row, residual, result }))
}

fn mem(b: &Buffer) -> DataEndpoint {
    DataEndpoint::Memory(b.base_vaddr())
}

/// Waits for `ids` and returns the latest completion time.
fn finish(d: &mut dyn Driver, ids: &[(u32, RequestId)]) -> Result<SimTime, BenchError> {
    d.drive(ids, &mut |_, _| false)?;
    let latest = ids
        .iter()
        .filter_map(|&(r, id)| match d.node(r).status(id) {
            Some(crate::engine::RequestStatus::Complete { completed_at, .. }) => Some(*completed_at),
            _ => None,
        })
        .max()
        .unwrap_or_default();
    d.expect_complete(ids)?;
    Ok(latest)
}
