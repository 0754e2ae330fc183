//! Send/recv sweep over the simulated transports, written as CSV to stdout.

use cclo::bench::{run_sendrecv, write_csv, BenchConfig, SimCluster, TransportKind};
use cclo::collectives::Protocol;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sizes = (2..=20).step_by(2).map(|p| 1u64 << p).collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (transport, protocol) in [
        (TransportKind::Sim, Protocol::Eager),
        (TransportKind::DatagramSim, Protocol::Eager),
        (TransportKind::RdmaSim, Protocol::Eager),
        (TransportKind::RdmaSim, Protocol::Rendezvous),
    ] {
        let cfg = BenchConfig { transport, protocol, sizes: sizes.clone(), iterations: 20, ..BenchConfig::default() };
        let mut c = SimCluster::from_config(&cfg)?;
        rows.extend(run_sendrecv(&mut c, &cfg)?);
    }
    write_csv(&rows, std::io::stdout())?;
    Ok(())
}
