mod common;

use proptest::prelude::*;

use cclo::bench::{run_collective, BenchConfig, SimCluster, TransportKind};
use cclo::collectives::{Algorithm, Protocol};
use cclo::engine::{Dtype, Op, ReduceFn};
use cclo::transport::WireKind;

use common::{Case, Outputs};

fn outputs(case: &Case, transport: TransportKind) -> (Outputs, Vec<WireKind>) {
    let mut c = SimCluster::from_config(&case.config(transport)).unwrap();
    let out = case.execute(&mut c, false).unwrap_or_else(|e| panic!("{}: {e}", case.describe()));
    for (r, got) in &out {
        if let Some(got) = got {
            case.check(*r, got).unwrap_or_else(|e| panic!("{} rank {r}: {e}", case.describe()));
        }
    }
    (out, c.fabric().wire_log().iter().map(|w| w.kind).collect())
}

fn rooted_algorithms(op: Op) -> Vec<Algorithm> {
    match op {
        Op::Bcast => vec![Algorithm::OneToAll, Algorithm::RecursiveDoubling],
        _ => vec![Algorithm::AllToOne, Algorithm::BinaryTree, Algorithm::Ring],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn results_do_not_depend_on_the_algorithm(
        op in prop::sample::select(vec![Op::Bcast, Op::Reduce, Op::Gather]),
        ranks in 2u32..9,
        root_pick: u32,
        count in 1u64..3000,
        wide: bool,
        max: bool,
        seed: u64,
    ) {
        let dtype = if wide { Dtype::I64 } else { Dtype::I32 };
        let mut base = Case::new(op, ranks, dtype, count, Protocol::Rendezvous, None);
        base.root = root_pick % ranks;
        base.func = if max { ReduceFn::Max } else { ReduceFn::Sum };
        base.data_seed = seed;
        let mut seen = None;
        for algo in rooted_algorithms(op) {
            let case = Case { algorithm: Some(algo), ..base.clone() };
            let (out, _) = outputs(&case, TransportKind::RdmaSim);
            match &seen {
                None => seen = Some(out),
                Some(first) => prop_assert_eq!(first, &out, "{}", case.describe()),
            }
        }
    }

    #[test]
    fn results_do_not_depend_on_the_protocol(
        op in prop::sample::select(vec![Op::Send, Op::Bcast, Op::Reduce, Op::Gather, Op::AllToAll]),
        ranks in 2u32..7,
        count in 1u64..1500,
        seed: u64,
    ) {
        let mut base = Case::new(op, ranks, Dtype::I32, count, Protocol::Eager, None);
        base.data_seed = seed;
        let (eager, eager_kinds) = outputs(&base, TransportKind::RdmaSim);
        let rndz = Case { protocol: Protocol::Rendezvous, ..base.clone() };
        let (rendezvous, rndz_kinds) = outputs(&rndz, TransportKind::RdmaSim);
        prop_assert_eq!(eager, rendezvous);
        prop_assert!(eager_kinds.iter().all(|&k| k == WireKind::RdmaSend));
        prop_assert!(rndz_kinds.contains(&WireKind::RdmaWrite));
    }
}

#[test]
fn every_algorithm_agrees_under_eager() {
    for op in [Op::Reduce, Op::Gather] {
        for ranks in [2, 3, 5, 8] {
            for algo in rooted_algorithms(op) {
                let mut case = Case::new(op, ranks, Dtype::I32, 64, Protocol::Eager, Some(algo));
                case.root = ranks - 1;
                outputs(&case, TransportKind::Sim);
            }
        }
    }
}

#[test]
fn float_reductions_stay_within_tolerance_across_algorithms() {
    for dtype in [Dtype::F32, Dtype::F64] {
        for algo in rooted_algorithms(Op::Reduce) {
            let case = Case::new(Op::Reduce, 7, dtype, 5000, Protocol::Rendezvous, Some(algo));
            outputs(&case, TransportKind::RdmaSim);
        }
    }
}

#[test]
fn tree_reduce_latency_plateaus() {
    let mut last = 0.0;
    for ranks in 2..=8 {
        let cfg = BenchConfig {
            ranks,
            transport: TransportKind::RdmaSim,
            protocol: Protocol::Rendezvous,
            sizes: vec![256 * 1024],
            iterations: 3,
            warmup: 0,
            ..BenchConfig::default()
        };
        let mut c = SimCluster::from_config(&cfg).unwrap();
        let row = run_collective(&mut c, &cfg, Op::Reduce).unwrap().remove(0);
        assert_eq!(row.algorithm, "binary-tree");
        assert!(row.mean_us >= last, "P={ranks}: {} after {last}", row.mean_us);
        last = row.mean_us;
    }
}

#[test]
fn single_rank_collectives_move_nothing() {
    for op in [Op::Bcast, Op::Reduce, Op::Gather, Op::AllToAll, Op::Barrier] {
        for protocol in [Protocol::Eager, Protocol::Rendezvous] {
            let count = if op == Op::Barrier { 0 } else { 33 };
            let case = Case::new(op, 1, Dtype::I64, count, protocol, None);
            let (_, kinds) = outputs(&case, TransportKind::RdmaSim);
            assert!(kinds.is_empty(), "{}: {kinds:?}", case.describe());
        }
    }
}
