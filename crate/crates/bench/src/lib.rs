//! Shared inputs for the benchmarks.

use cimtpu_core::workload::{build_dit_block, build_llm_decode_layer, InferenceParams};
use cimtpu_core::{Category, LayerGraph, ModelConfig, OpKind, Operator, Precision};

pub fn ffn_gemm(m: u64) -> Operator {
    Operator::new(
        "ffn_up",
        OpKind::Gemm {
            batch: 1,
            m,
            k: 7168,
            n: 28672,
            shared_weights: true,
        },
        Precision::Int8,
        Category::Ffn,
    )
}

pub fn decode_layer() -> LayerGraph {
    build_llm_decode_layer(&ModelConfig::gpt3_30b(), &InferenceParams::default())
        .expect("builtin model")
}

pub fn dit_block() -> LayerGraph {
    build_dit_block(&ModelConfig::dit_xl_2(), &InferenceParams::default()).expect("builtin model")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_valid() {
        assert!(ffn_gemm(8).validate().is_ok());
        assert!(decode_layer().validate().is_ok());
        assert!(dit_block().validate().is_ok());
    }
}
