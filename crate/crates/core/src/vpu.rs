//! Cycle model of vector operators on the VPU.
//!
//! Work is issued in chunks of `lanes` elements; each chunk pays the listed
//! per-operation cycle costs.

use crate::error::{Error, Result};
use crate::hwconfig::VpuConfig;
use crate::workload::OpKind;

fn chunks(elements: u64, v: &VpuConfig) -> u64 {
    elements.div_ceil(u64::from(v.lanes))
}

fn tree_depth(cols: u64, v: &VpuConfig) -> u64 {
    let width = cols.min(u64::from(v.lanes));
    u64::from(width.next_power_of_two().trailing_zeros())
}

/// Online softmax: one fused max/exp-sum pass, a cross-lane merge and a
/// normalizing pass per row.
pub fn softmax_cycles(v: &VpuConfig, rows: u64, cols: u64) -> u64 {
    let ch = chunks(cols, v);
    let pass1 = ch * u64::from(v.c_cmp + v.c_exp + v.c_add + v.c_mul);
    let reduce = tree_depth(cols, v) * u64::from(v.c_add);
    let pass2 = ch * u64::from(v.c_div);
    rows * (pass1 + reduce + pass2)
}

/// One-pass mean/variance, a cross-lane reduction, then normalization.
pub fn layernorm_cycles(v: &VpuConfig, rows: u64, cols: u64) -> u64 {
    let ch = chunks(cols, v);
    let pass1 = ch * u64::from(v.c_add + 2 * v.c_mul);
    let reduce = tree_depth(cols, v) * u64::from(v.c_add);
    let pass2 = ch * u64::from(v.c_add + v.c_mul + v.c_rsqrt);
    rows * (pass1 + reduce + pass2)
}

/// tanh approximation `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_cycles(v: &VpuConfig, elements: u64) -> u64 {
    chunks(elements, v) * u64::from(3 * v.c_mul + 2 * v.c_add + v.c_tanh)
}

pub fn elementwise_cycles(v: &VpuConfig, elements: u64, ops_per_element: u64) -> u64 {
    chunks(elements, v) * ops_per_element * u64::from(v.c_add)
}

/// Row-major view of a vector operator: `rows` independent rows of `cols`
/// elements. Chunked execution splits along rows.
pub fn vector_rows(kind: &OpKind) -> Option<(u64, u64)> {
    match *kind {
        OpKind::Softmax { rows, cols } | OpKind::LayerNorm { rows, cols } => Some((rows, cols)),
        OpKind::Gelu { elements } | OpKind::Elementwise { elements, .. } => Some((elements, 1)),
        _ => None,
    }
}

/// Cycles for `rows` rows of a vector operator (for elementwise operators a
/// row is one element).
pub fn vector_cycles(v: &VpuConfig, kind: &OpKind, rows: u64) -> Result<u64> {
    if rows == 0 {
        return Err(Error::Precondition("vector work must be >= 1".into()));
    }
    Ok(match *kind {
        OpKind::Softmax { cols, .. } => softmax_cycles(v, rows, cols),
        OpKind::LayerNorm { cols, .. } => layernorm_cycles(v, rows, cols),
        OpKind::Gelu { .. } => gelu_cycles(v, rows),
        OpKind::Elementwise {
            ops_per_element, ..
        } => elementwise_cycles(v, rows, ops_per_element),
        _ => return Err(Error::Precondition("not a vector operator".to_string())),
    })
}
