//! Every collective on eight simulated ranks under both protocols, with the
//! algorithm the selection table picked at each size.

use cclo::bench::{run_collective, BenchConfig, SimCluster, TransportKind};
use cclo::collectives::Protocol;
use cclo::engine::Op;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for protocol in [Protocol::Eager, Protocol::Rendezvous] {
        let cfg = BenchConfig {
            ranks: 8,
            transport: TransportKind::RdmaSim,
            protocol,
            sizes: vec![1024, 8 * 1024, 128 * 1024],
            iterations: 5,
            warmup: 1,
            ..BenchConfig::default()
        };
        let mut c = SimCluster::from_config(&cfg)?;
        println!("{protocol}");
        for op in [Op::Bcast, Op::Reduce, Op::Gather, Op::AllToAll, Op::Barrier] {
            for row in run_collective(&mut c, &cfg, op)? {
                println!(
                    "  {:<10} {:>7} B  {:<19} {:>10.3} us  {:>9} B on the wire",
                    row.op, row.size_bytes, row.algorithm, row.mean_us, row.bytes_on_wire
                );
            }
        }
    }
    Ok(())
}
