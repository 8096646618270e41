//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use cimtpu_core::{Category, CimGrid, MxuKind, OpKind, Operator, Precision, TpuConfig};

/// 4 KiB VMEM, 32 KiB CMEM, two 4x4 engines and narrow buses, so that
/// tiling decisions matter for GEMMs with dims up to 64.
pub fn scaled(cim: bool) -> TpuConfig {
    let mut c = TpuConfig::baseline();
    c.name = if cim { "scaled-cim" } else { "scaled-digital" }.to_string();
    c.mxu_count = 2;
    c.vmem_bytes = 4 * 1024;
    c.cmem_bytes = 32 * 1024;
    c.hbm_bw = 8.0 * c.frequency_hz;
    c.oci_bw = 16.0 * c.frequency_hz;
    c.mxu = if cim {
        MxuKind::CimGrid(CimGrid {
            grid_rows: 4,
            grid_cols: 4,
            core_inputs: 4,
            core_weight_cols: 32,
            weight_bits: 8,
            wave_cycles: 2,
            active_outputs_per_wave: 2,
            weight_io_bytes_per_cycle: 4,
            ..CimGrid::default()
        })
    } else {
        MxuKind::DigitalSystolic { rows: 4, cols: 4 }
    };
    c.validate().expect("scaled config is valid");
    c
}

pub fn gemm(batch: u64, m: u64, k: u64, n: u64, shared: bool) -> Operator {
    Operator::new(
        "g",
        OpKind::Gemm {
            batch,
            m,
            k,
            n,
            shared_weights: shared,
        },
        Precision::Int8,
        Category::Ffn,
    )
}

pub fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}
