//! Four engines on localhost sockets, one thread each, running a barrier and
//! a broadcast over TCP and then over UDP.

use cclo::bench::{run_threaded, BenchConfig, Driver, TransportKind};
use cclo::engine::{CcloRequest, DataEndpoint, Dtype};
use cclo::platform::{lock, Location};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for transport in [TransportKind::Stream, TransportKind::Datagram] {
        let cfg = BenchConfig { ranks: 4, transport, ..BenchConfig::default() };
        let report = run_threaded(&cfg, |node| {
            let rank = node.rank();
            let buf = lock(node.node(rank).platform()).alloc(Location::Device, 4096)?;
            if rank == 0 {
                lock(node.node(0).platform()).host_write(&buf, 0, &[9u8; 4096])?;
            }
            let t0 = node.settle()?;
            let id = node.engine().call(CcloRequest::bcast(0, 0, DataEndpoint::Memory(buf.base_vaddr()), Dtype::I32, 1024))?;
            node.wait(&[(rank, id)])?;
            let ok = lock(node.node(rank).platform()).host_read(&buf)?.iter().all(|&b| b == 9);
            Ok((rank, ok, (node.node(rank).now() - t0).as_micros_f64()))
        })?;
        for (rank, ok, us) in report {
            println!("{transport} rank {rank}: bcast {} after {us:.1} us", if ok { "correct" } else { "WRONG" });
        }
    }
    Ok(())
}
