use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use cimtpu_bench::{decode_layer, dit_block, ffn_gemm};
use cimtpu_core::cim::cim_cycles;
use cimtpu_core::systolic::systolic_cycles;
use cimtpu_core::{builtin_preset, CimGrid, GemmTile, Simulator};

fn engines(c: &mut Criterion) {
    let tile = GemmTile::new(512, 2048, 1024);
    c.bench_function("systolic_cycles 128x128", |b| {
        b.iter(|| systolic_cycles(128, 128, black_box(&tile)))
    });
    let grid = CimGrid::with_dims(16, 8);
    c.bench_function("cim_cycles 16x8", |b| {
        b.iter(|| cim_cycles(black_box(&grid), black_box(&tile)))
    });
}

fn mapper(c: &mut Criterion) {
    let mut g = c.benchmark_group("best_mapping");
    g.sample_size(10);
    for name in ["tpuv4i-baseline", "cim-16x8-x4"] {
        let cfg = builtin_preset(name).unwrap();
        for m in [8, 1024] {
            let op = ffn_gemm(m);
            g.bench_function(format!("{name} ffn m={m}"), |b| {
                // fresh simulator so the engine cache starts cold
                b.iter(|| {
                    Simulator::new(cfg.clone())
                        .best_mapping(black_box(&op))
                        .unwrap()
                })
            });
        }
    }
    g.finish();
}

fn layers(c: &mut Criterion) {
    let mut g = c.benchmark_group("evaluate_graph");
    g.sample_size(10);
    let decode = decode_layer();
    let block = dit_block();
    for name in ["tpuv4i-baseline", "design-a"] {
        let cfg = builtin_preset(name).unwrap();
        g.bench_function(format!("{name} gpt3 decode"), |b| {
            b.iter(|| {
                Simulator::new(cfg.clone())
                    .evaluate_graph(black_box(&decode))
                    .unwrap()
            })
        });
        g.bench_function(format!("{name} dit block"), |b| {
            b.iter(|| {
                Simulator::new(cfg.clone())
                    .evaluate_graph(black_box(&block))
                    .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, engines, mapper, layers);
criterion_main!(benches);
