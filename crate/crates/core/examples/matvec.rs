//! Distributed vector-matrix product with column and checkerboard
//! partitioning, checked against the single-node product.

use cclo::bench::{run_matvec, BenchConfig, MatvecProblem, Partitioning, SimCluster};
use cclo::engine::Dtype;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let problem = MatvecProblem::random(512, 512, 7);
    for (ranks, part) in [
        (4, Partitioning::Column),
        (8, Partitioning::Column),
        (4, Partitioning::Checkerboard { rows: 2, cols: 2 }),
        (8, Partitioning::Checkerboard { rows: 2, cols: 4 }),
    ] {
        let cfg = BenchConfig { ranks, dtype: Dtype::F32, iterations: 3, ..BenchConfig::default() };
        let mut c = SimCluster::from_config(&cfg)?;
        let report = run_matvec(&mut c, &cfg, &problem, part)?.ok_or("rank 0 is local")?;
        println!(
            "{:<26} {:<22} residual {:.2e}  {:>9.3} us",
            report.row.op, report.row.algorithm, report.residual, report.row.mean_us
        );
    }
    Ok(())
}
