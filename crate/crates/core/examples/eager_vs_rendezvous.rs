//! One send between two ranks on the simulated RDMA fabric under each
//! protocol, with the frames each one put on the wire.

use cclo::bench::{BenchConfig, Driver, SimCluster, TransportKind};
use cclo::collectives::Protocol;
use cclo::engine::{CcloRequest, DataEndpoint, Dtype};
use cclo::platform::{lock, Location};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bytes = 256 * 1024u64;
    for protocol in [Protocol::Eager, Protocol::Rendezvous] {
        let cfg = BenchConfig { transport: TransportKind::RdmaSim, protocol, ..BenchConfig::default() };
        let mut c = SimCluster::from_config(&cfg)?;
        let src = lock(c.node(0).platform()).alloc(Location::Device, bytes)?;
        let dst = lock(c.node(1).platform()).alloc(Location::Device, bytes)?;
        lock(c.node(0).platform()).host_write(&src, 0, &vec![7u8; bytes as usize])?;

        let count = bytes / 4;
        let ids = c.run_all(&[
            CcloRequest::send(0, 1, 3, DataEndpoint::Memory(src.base_vaddr()), Dtype::I32, count),
            CcloRequest::recv(0, 0, 3, DataEndpoint::Memory(dst.base_vaddr()), Dtype::I32, count),
        ])?;
        let latency = c.node(1).latency(ids[1]).ok_or("receive did not complete")?;
        assert!(lock(c.node(1).platform()).host_read(&dst)?.iter().all(|&b| b == 7));

        println!("{protocol}: {bytes} bytes in {:.3} us", latency.as_micros_f64());
        for w in c.fabric().wire_log() {
            println!(
                "  {:>10.3} us  {} -> {}  {:<9} {:<10} payload {:>7}  wire {:>7}",
                w.sent_at.as_micros_f64(),
                w.src,
                w.dst,
                format!("{:?}", w.kind),
                w.msg_type.map_or("-".to_string(), |t| format!("{t:?}")),
                w.payload_bytes,
                w.wire_bytes,
            );
        }
    }
    Ok(())
}
