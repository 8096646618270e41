mod common;

use cimtpu_core::cim::cim_cycles;
use cimtpu_core::dse::{pareto_front, SweepRow};
use cimtpu_core::hwconfig::parse_config;
use cimtpu_core::memory::pipeline_overlap;
use cimtpu_core::multidevice::{pipeline_latency, shard_graph};
use cimtpu_core::systolic::systolic_cycles;
use cimtpu_core::workload::{
    build_dit_block, build_llm_decode_layer, build_llm_prefill_layer, InferenceParams,
};
use cimtpu_core::{
    builtin_preset, CimGrid, GemmTile, LayerGraph, ModelConfig, Precision, Simulator,
};
use common::{gemm, scaled};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = (u64, u64, u64)> {
    (1u64..=300, 1u64..=600, 1u64..=600)
}

fn small_model() -> impl Strategy<Value = (ModelConfig, InferenceParams)> {
    (1u64..=4, 1u64..=3, 1u64..=8, 1u64..=4, 1u64..=64).prop_map(|(heads, dh, batch, seq, pos)| {
        let model = ModelConfig::llm("tiny", 2, heads * 2, heads * 2 * dh * 16);
        let params = InferenceParams {
            batch: batch * 4,
            seq_in: seq * 32,
            decode_pos: pos,
            ..InferenceParams::default()
        };
        (model, params)
    })
}

fn sweep_row(i: usize, latency: f64, energy: f64) -> SweepRow {
    SweepRow {
        name: format!("p{i}"),
        kind: "cim".into(),
        dims: "1x1".into(),
        mxu_count: 1,
        peak_macs_per_mxu: 1.0,
        peak_macs_total: 1.0,
        area_proxy: 1.0,
        feasible: true,
        latency_s: Some(latency),
        mxu_energy_j: Some(energy),
        total_energy_j: Some(energy),
        mxu_energy_per_mxu_j: Some(energy),
        area_proxy_per_mxu: 1.0,
        error: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn double_buffering_never_slower(pairs in prop::collection::vec((0u64..500, 0u64..500), 1..40)) {
        let (c, l): (Vec<u64>, Vec<u64>) = pairs.into_iter().unzip();
        let db = pipeline_overlap(&c, &l, true).unwrap();
        let serial = pipeline_overlap(&c, &l, false).unwrap();
        prop_assert!(db <= serial);
        prop_assert!(db >= c.iter().sum::<u64>().max(l.iter().sum()));
        prop_assert_eq!(serial, c.iter().sum::<u64>() + l.iter().sum::<u64>());
    }

    #[test]
    fn pipeline_bounds(stages in prop::collection::vec(1u64..10_000, 1..6), m in 1u64..16, p2p in 0u64..100) {
        let t = pipeline_latency(&stages, m, p2p).unwrap();
        let max = *stages.iter().max().unwrap();
        prop_assert!(t >= max * m);
        prop_assert!(t >= stages.iter().sum::<u64>());
    }

    #[test]
    fn systolic_monotone((m, k, n) in dims(), rows in 1u64..=64, cols in 1u64..=64) {
        let t = GemmTile::new(m, k, n);
        let c = systolic_cycles(rows, cols, &t);
        for bigger in [GemmTile::new(m + 1, k, n), GemmTile::new(m, k + 1, n), GemmTile::new(m, k, n + 1)] {
            prop_assert!(systolic_cycles(rows, cols, &bigger) >= c);
        }
    }

    #[test]
    fn cim_monotone((m, k, n) in (1u64..=40, 1u64..=600, 1u64..=300), r in 1u32..=4, c in 1u32..=4) {
        let g = CimGrid::with_dims(r, c);
        let t = GemmTile::new(m, k, n);
        let base = cim_cycles(&g, &t);
        for bigger in [GemmTile::new(m + 1, k, n), GemmTile::new(m, k + 1, n), GemmTile::new(m, k, n + 1)] {
            prop_assert!(cim_cycles(&g, &bigger) >= base, "{:?}", bigger);
        }
        prop_assert!(cim_cycles(&CimGrid::with_dims(r + 1, c), &t) <= base);
        prop_assert!(cim_cycles(&CimGrid::with_dims(r, c + 1), &t) <= base);
    }

    #[test]
    fn best_mapping_never_worse_than_unit_tiles((m, k, n) in (1u64..=48, 1u64..=48, 1u64..=48), cim in any::<bool>()) {
        let sim = Simulator::new(scaled(cim));
        let op = gemm(1, m, k, n, true);
        let best = sim.best_mapping(&op).unwrap().1.cycles;
        let unit = sim.evaluate_mapping(&op, &cimtpu_core::Mapping::unit()).unwrap().cost.cycles;
        prop_assert!(best <= unit);
    }

    #[test]
    fn sharding_conserves_work((model, params) in small_model(), tp in prop::sample::select(vec![1u64, 2, 4])) {
        for g in [build_llm_prefill_layer(&model, &params).unwrap(), build_llm_decode_layer(&model, &params).unwrap()] {
            let s = shard_graph(&g, tp).unwrap();
            let compute: u64 = s.ops.iter().filter(|o| o.is_gemm() || o.is_vector()).map(|o| o.flops()).sum();
            prop_assert_eq!(compute * tp, g.flops());
            prop_assert!(s.topo_order().is_ok());
        }
    }

    #[test]
    fn topological_order_respects_dependencies((model, params) in small_model()) {
        let g = build_llm_prefill_layer(&model, &params).unwrap();
        let order = g.topo_order().unwrap();
        let pos: std::collections::HashMap<&str, usize> =
            order.iter().enumerate().map(|(i, &j)| (g.ops[j].name.as_str(), i)).collect();
        for op in &g.ops {
            for d in &op.deps {
                prop_assert!(pos[d.as_str()] < pos[op.name.as_str()]);
            }
        }
    }

    #[test]
    fn pareto_front_is_idempotent(points in prop::collection::vec((1u32..50, 1u32..50), 1..20)) {
        let rows: Vec<SweepRow> = points
            .iter()
            .enumerate()
            .map(|(i, &(l, e))| sweep_row(i, f64::from(l), f64::from(e)))
            .collect();
        let front = pareto_front(&rows);
        prop_assert!(!front.is_empty());
        prop_assert_eq!(pareto_front(&front), front.clone());
        for f in &front {
            let dominated = rows.iter().any(|r| {
                let (a, b) = (r.latency_s.unwrap(), r.mxu_energy_j.unwrap());
                let (x, y) = (f.latency_s.unwrap(), f.mxu_energy_j.unwrap());
                a <= x && b <= y && (a < x || b < y)
            });
            prop_assert!(!dominated);
        }
    }

    #[test]
    fn config_round_trips(cim in any::<bool>(), count in 1u32..=16, vmem_kib in 1u64..=65536, hbm in 1.0f64..2000.0) {
        let mut cfg = builtin_preset(if cim { "cim-16x8-x4" } else { "tpuv4i-baseline" }).unwrap();
        cfg.mxu_count = count;
        cfg.vmem_bytes = vmem_kib * 1024;
        cfg.hbm_bw = hbm * 1e9;
        prop_assert_eq!(parse_config(&cfg.serialize()).unwrap(), cfg);
    }
}

#[test]
fn presets_round_trip() {
    for name in [
        "tpuv4i-baseline",
        "cim-16x8-x4",
        "design-a",
        "cim-8x8-x2",
        "cim-16x16-x8",
    ] {
        let cfg = builtin_preset(name).unwrap();
        assert_eq!(parse_config(&cfg.serialize()).unwrap(), cfg, "{name}");
    }
}

#[test]
fn reports_identical_across_thread_counts() {
    let g = build_dit_block(&ModelConfig::dit_xl_2(), &InferenceParams::default()).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            Simulator::new(builtin_preset("design-a").unwrap())
                .evaluate_graph(&g)
                .unwrap()
        })
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(
        serde_json::to_string(&one).unwrap(),
        serde_json::to_string(&run(3)).unwrap()
    );
}

#[test]
fn single_op_graph_total_is_the_op() {
    let sim = Simulator::new(builtin_preset("cim-16x8-x4").unwrap());
    let op = gemm(2, 64, 512, 256, true);
    let r = sim
        .evaluate_graph(&LayerGraph::new("one", vec![op.clone()]))
        .unwrap();
    assert_eq!(r.total, sim.evaluate_op(&op).unwrap().cost);
}

#[test]
fn bf16_never_faster_than_int8() {
    let sim = Simulator::new(builtin_preset("design-a").unwrap());
    for (m, k, n) in [(1, 4096, 4096), (128, 1024, 512), (8, 7168, 21504)] {
        let mut op = gemm(1, m, k, n, true);
        let int8 = sim.evaluate_op(&op).unwrap().cost.cycles;
        op.precision = Precision::Bf16;
        assert!(sim.evaluate_op(&op).unwrap().cost.cycles >= int8);
    }
}
