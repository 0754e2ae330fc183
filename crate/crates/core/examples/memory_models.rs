//! Send/recv latency with device-resident and host-resident buffers under the
//! shared virtual memory model and the partitioned model.

use cclo::bench::{run_sendrecv, BenchConfig, SimCluster};
use cclo::platform::{Location, MemoryModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sizes = vec![64, 4096, 256 * 1024];
    println!("{:<15} {:<7} {:>8} {:>12}", "model", "buffers", "bytes", "mean_us");
    for model in [MemoryModel::SharedVirtual, MemoryModel::Partitioned] {
        for buffers in [Location::Device, Location::Host] {
            let cfg = BenchConfig {
                memory_model: model,
                buffer_location: buffers,
                sizes: sizes.clone(),
                iterations: 20,
                ..BenchConfig::default()
            };
            let mut c = SimCluster::from_config(&cfg)?;
            for row in run_sendrecv(&mut c, &cfg)? {
                println!("{:<15} {:<7} {:>8} {:>12.3}", format!("{model:?}"), format!("{buffers:?}"), row.size_bytes, row.mean_us);
            }
        }
    }
    Ok(())
}
