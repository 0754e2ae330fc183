//! A kernel on rank 0 feeds a send through a stream port in small chunks;
//! rank 1 receives into memory.

use cclo::bench::{BenchConfig, Driver, SimCluster};
use cclo::engine::{CcloRequest, DataEndpoint, Dtype, Node};
use cclo::platform::{lock, Location};

const PORT: u8 = 0;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut c = SimCluster::from_config(&BenchConfig::default())?;
    let data: Vec<u8> = (0..100_000u32).flat_map(|i| i.to_le_bytes()).collect();
    let dst = lock(c.node(1).platform()).alloc(Location::Device, data.len() as u64)?;

    let count = data.len() as u64 / 4;
    let t0 = c.settle()?;
    let send = c.node_mut(0).call_at(CcloRequest::send(0, 1, 0, DataEndpoint::Stream(PORT), Dtype::I32, count), t0)?;
    let recv =
        c.node_mut(1).call_at(CcloRequest::recv(0, 0, 0, DataEndpoint::Memory(dst.base_vaddr()), Dtype::I32, count), t0)?;

    let mut fed = 0;
    let mut pushes = 0;
    c.drive(&[(0, send), (1, recv)], &mut |rank, n: &mut Node| {
        if rank != 0 || fed == data.len() {
            return false;
        }
        let end = (fed + 3000).min(data.len());
        let taken = n.stream_push(PORT, &data[fed..end]).unwrap_or(0);
        fed += taken;
        pushes += (taken > 0) as u32;
        taken > 0
    })?;
    c.expect_complete(&[(0, send), (1, recv)])?;

    assert_eq!(lock(c.node(1).platform()).host_read(&dst)?, data);
    println!("streamed {} bytes in {pushes} pushes, finished at {:.3} us", data.len(), c.now().as_micros_f64());
    Ok(())
}
