//! Datagrams on a fabric that reorders and drops. Reordering is absorbed by
//! reassembly; a lost datagram turns into a receive timeout.

use cclo::bench::{run_collective, BenchConfig, Driver, SimCluster, TransportKind};
use cclo::engine::{CcloRequest, DataEndpoint, Dtype, Op, RequestStatus};
use cclo::platform::{lock, Location};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = BenchConfig {
        ranks: 4,
        transport: TransportKind::DatagramSim,
        reorder_window: 8,
        sizes: vec![64 * 1024],
        iterations: 5,
        ..BenchConfig::default()
    };
    let mut c = SimCluster::from_config(&cfg)?;
    let row = run_collective(&mut c, &cfg, Op::Reduce)?.remove(0);
    println!("reorder window 8: {} reduce of {} bytes verified in {:.3} us", row.algorithm, row.size_bytes, row.mean_us);

    let cfg = BenchConfig { ranks: 2, loss: 0.2, reorder_window: 1, ..cfg };
    let mut c = SimCluster::from_config(&cfg)?;
    let bytes = 64 * 1024;
    let src = lock(c.node(0).platform()).alloc(Location::Device, bytes)?;
    let dst = lock(c.node(1).platform()).alloc(Location::Device, bytes)?;
    let ids = c.run_all(&[
        CcloRequest::send(0, 1, 0, DataEndpoint::Memory(src.base_vaddr()), Dtype::I32, bytes / 4),
        CcloRequest::recv(0, 0, 0, DataEndpoint::Memory(dst.base_vaddr()), Dtype::I32, bytes / 4),
    ])?;
    match c.node(1).status(ids[1]) {
        Some(RequestStatus::Failed { error, at }) => {
            println!("loss 0.2: receive failed at {:.3} us: {error}", at.as_micros_f64())
        }
        other => println!("loss 0.2: receive ended as {other:?}"),
    }
    println!("fabric dropped {} datagrams", c.drops());
    Ok(())
}
