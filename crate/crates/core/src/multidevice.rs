//! Tensor- and pipeline-parallel execution over a ring of devices, and
//! end-to-end inference runs built from per-layer evaluations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{op_energy, Activity, EnergyBreakdown, Traffic};
use crate::error::{Error, Result};
use crate::mapper::Simulator;
use crate::memory::transfer_cycles;
use crate::workload::{
    build_dit_block, build_llm_decode_layer, build_llm_prefill_layer, Category, Family,
    InferenceParams, LayerGraph, ModelConfig, OpKind, Operator,
};

pub use crate::mapper::allreduce_cycles;

/// Diffusion steps per generated image unless stated otherwise.
pub const DEFAULT_DIT_STEPS: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelismPlan {
    pub tp_degree: u64,
    pub pp_stages: u64,
    pub microbatches: u64,
}

impl ParallelismPlan {
    /// Microbatches default to one per stage.
    pub fn new(tp_degree: u64, pp_stages: u64) -> Self {
        ParallelismPlan {
            tp_degree,
            pp_stages,
            microbatches: pp_stages.max(1),
        }
    }

    pub fn single() -> Self {
        Self::new(1, 1)
    }

    pub fn devices(&self) -> u64 {
        self.tp_degree * self.pp_stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.tp_degree == 0 || self.pp_stages == 0 || self.microbatches == 0 {
            return Err(Error::Precondition(
                "tp, pp and microbatches must all be >= 1".into(),
            ));
        }
        if ![1, 2, 4].contains(&self.devices()) {
            return Err(Error::Precondition(format!(
                "tp x pp must be 1, 2 or 4 devices (got {})",
                self.devices()
            )));
        }
        Ok(())
    }
}

fn split(what: &str, value: u64, tp: u64) -> Result<u64> {
    if !value.is_multiple_of(tp) {
        return Err(Error::Workload(format!(
            "{what} = {value} is not divisible by tensor-parallel degree {tp}"
        )));
    }
    Ok(value / tp)
}

/// Splits one layer over `tp` devices Megatron-style and returns the graph
/// run by each device. QKV, attention heads and the first FFN GEMM are split
/// by columns; the projection and second FFN GEMM are split by rows and
/// followed by an all-reduce of their output. Norms and elementwise work are
/// split by rows.
pub fn shard_graph(g: &LayerGraph, tp: u64) -> Result<LayerGraph> {
    if tp == 0 {
        return Err(Error::Precondition(
            "tensor-parallel degree must be >= 1".into(),
        ));
    }
    g.validate()?;
    if tp == 1 {
        return Ok(g.clone());
    }
    let mut ops = Vec::with_capacity(g.ops.len() + 2);
    let mut renamed: Vec<(String, String)> = Vec::new();
    for op in &g.ops {
        let mut s = op.clone();
        let name = op.name.as_str();
        let mut reduce = false;
        s.kind = match op.kind {
            OpKind::Gemm {
                batch,
                m,
                k,
                n,
                shared_weights,
            } => {
                let row_parallel = op.category == Category::Projection || name == "ffn_down";
                if !shared_weights {
                    OpKind::Gemm {
                        batch: split(&format!("{name} batch x heads"), batch, tp)?,
                        m,
                        k,
                        n,
                        shared_weights,
                    }
                } else if row_parallel {
                    reduce = true;
                    OpKind::Gemm {
                        batch,
                        m,
                        k: split(&format!("{name} K"), k, tp)?,
                        n,
                        shared_weights,
                    }
                } else {
                    OpKind::Gemm {
                        batch,
                        m,
                        k,
                        n: split(&format!("{name} N"), n, tp)?,
                        shared_weights,
                    }
                }
            }
            OpKind::Softmax { rows, cols } => OpKind::Softmax {
                rows: split(&format!("{name} rows"), rows, tp)?,
                cols,
            },
            OpKind::LayerNorm { rows, cols } => OpKind::LayerNorm {
                rows: split(&format!("{name} rows"), rows, tp)?,
                cols,
            },
            OpKind::Gelu { elements } => OpKind::Gelu {
                elements: split(&format!("{name} elements"), elements, tp)?,
            },
            OpKind::Elementwise {
                elements,
                ops_per_element,
            } => OpKind::Elementwise {
                elements: split(&format!("{name} elements"), elements, tp)?,
                ops_per_element,
            },
            OpKind::KvCacheUpdate { bytes } => OpKind::KvCacheUpdate {
                bytes: split(&format!("{name} bytes"), bytes, tp)?,
            },
            other => other,
        };
        s.deps = s
            .deps
            .iter()
            .map(|d| {
                renamed
                    .iter()
                    .find(|(from, _)| from == d)
                    .map_or_else(|| d.clone(), |(_, to)| to.clone())
            })
            .collect();
        ops.push(s);
        if reduce {
            let ar = format!("{name}_allreduce");
            ops.push(
                Operator::new(
                    &ar,
                    OpKind::AllReduce {
                        bytes: op.bytes().output,
                        group_size: tp,
                    },
                    op.precision,
                    Category::Communication,
                )
                .after(&[name]),
            );
            renamed.push((op.name.clone(), ar));
        }
    }
    let out = LayerGraph::new(&format!("{}/tp{tp}", g.name), ops);
    out.validate()?;
    Ok(out)
}

/// Synchronous pipeline: `(m + S - 1)` slots of the slowest stage plus
/// `S - 1` stage-to-stage transfers.
pub fn pipeline_latency(stage_cycles: &[u64], microbatches: u64, p2p_cycles: u64) -> Result<u64> {
    let s = stage_cycles.len() as u64;
    if s == 0 {
        return Err(Error::Precondition(
            "pipeline needs at least one stage".into(),
        ));
    }
    if microbatches == 0 {
        return Err(Error::Precondition("microbatches must be >= 1".into()));
    }
    let slowest = *stage_cycles.iter().max().expect("nonempty");
    Ok((microbatches + s - 1) * slowest + (s - 1) * p2p_cycles)
}

/// Cost of one phase (prefill, all decode steps, or all diffusion steps).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseCost {
    pub cycles: u64,
    pub seconds: f64,
    /// Summed over every device.
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub model: String,
    pub config: String,
    pub plan: ParallelismPlan,
    pub batch: u64,
    pub prefill: PhaseCost,
    pub decode: PhaseCost,
    pub latency_s: f64,
    /// Generated tokens per second (LLM) or images per second (DiT).
    pub throughput: f64,
    pub energy: EnergyBreakdown,
}

/// Cost of one pass of every layer through the plan for one microbatch shape.
struct PassCost {
    cycles: u64,
    energy: EnergyBreakdown,
}

fn pass_cost(
    sim: &Simulator,
    layer: &LayerGraph,
    n_layers: u64,
    plan: &ParallelismPlan,
    activation_bytes: u64,
) -> Result<PassCost> {
    let cfg = sim.config();
    let sharded = shard_graph(layer, plan.tp_degree)?;
    let report = sim.evaluate_graph(&sharded)?;
    let s = plan.pp_stages;
    let per_stage = n_layers.div_ceil(s);
    let stage_cycles = per_stage * report.total.cycles;
    let (p2p, p2p_energy) = if s > 1 {
        if cfg.ici_links == 0 {
            return Err(Error::Infeasible {
                op: "stage transfer".into(),
                reason: "pipeline stages need an ICI link".into(),
            });
        }
        let c = transfer_cycles(
            activation_bytes,
            cfg.ici_link_bytes_per_cycle(),
            cfg.transfer_latency_cycles,
        )?;
        let e = op_energy(
            cfg,
            &Activity {
                traffic: Traffic {
                    ici_bytes: activation_bytes,
                    ..Traffic::default()
                },
                ..Activity::default()
            },
        );
        (c, e)
    } else {
        (0, EnergyBreakdown::default())
    };
    let cycles = pipeline_latency(&vec![stage_cycles; s as usize], plan.microbatches, p2p)?;
    let m = plan.microbatches;
    let energy = report
        .total
        .energy
        .scaled((n_layers * plan.tp_degree * m) as f64)
        + p2p_energy.scaled(((s - 1) * m * plan.tp_degree) as f64);
    Ok(PassCost { cycles, energy })
}

fn microbatch(params: &InferenceParams, plan: &ParallelismPlan) -> Result<InferenceParams> {
    plan.validate()?;
    if !params.batch.is_multiple_of(plan.microbatches) {
        return Err(Error::Workload(format!(
            "batch {} is not divisible into {} microbatches",
            params.batch, plan.microbatches
        )));
    }
    Ok(InferenceParams {
        batch: params.batch / plan.microbatches,
        ..*params
    })
}

/// Bytes of KV cache held by each device at the end of generation.
pub fn kv_bytes_per_device(
    model: &ModelConfig,
    params: &InferenceParams,
    plan: &ParallelismPlan,
) -> u64 {
    let tokens = params.seq_in + params.out_len;
    let per_layer = model.kv_bytes_per_layer(params.batch, tokens, params.precision);
    model.n_layers.div_ceil(plan.pp_stages) * per_layer / plan.tp_degree
}

/// Prefill of `seq_in` tokens followed by `out_len` decode steps, each step
/// attending to the context it has grown to.
pub fn llm_end_to_end(
    sim: &Simulator,
    model: &ModelConfig,
    params: &InferenceParams,
    plan: &ParallelismPlan,
) -> Result<EndToEndReport> {
    if model.family != Family::Llm {
        return Err(Error::Workload(format!(
            "`{}` is not a language model",
            model.name
        )));
    }
    let cfg = sim.config();
    let mb = microbatch(params, plan)?;
    let kv = kv_bytes_per_device(model, params, plan);
    if kv > cfg.hbm_bytes {
        return Err(Error::Capacity(format!(
            "KV cache needs {kv} B per device but HBM holds {} B",
            cfg.hbm_bytes
        )));
    }
    let e = params.precision.bytes();

    let prefill_layer = build_llm_prefill_layer(model, &mb)?;
    let pre = pass_cost(
        sim,
        &prefill_layer,
        model.n_layers,
        plan,
        mb.batch * mb.seq_in * model.d_model * e,
    )?;
    let prefill = PhaseCost {
        cycles: pre.cycles,
        seconds: cfg.seconds(pre.cycles),
        energy: pre.energy,
    };

    let steps: Vec<Result<PassCost>> = (1..=params.out_len)
        .into_par_iter()
        .map(|pos| {
            let step = InferenceParams {
                decode_pos: pos,
                ..mb
            };
            let layer = build_llm_decode_layer(model, &step)?;
            pass_cost(
                sim,
                &layer,
                model.n_layers,
                plan,
                mb.batch * model.d_model * e,
            )
        })
        .collect();
    let mut decode = PhaseCost::default();
    for s in steps {
        let s = s?;
        decode.cycles += s.cycles;
        decode.energy += s.energy;
    }
    decode.seconds = cfg.seconds(decode.cycles);

    let latency_s = cfg.seconds(prefill.cycles + decode.cycles);
    let throughput = if latency_s > 0.0 {
        (params.batch * params.out_len) as f64 / latency_s
    } else {
        0.0
    };
    Ok(EndToEndReport {
        model: model.name.clone(),
        config: cfg.name.clone(),
        plan: *plan,
        batch: params.batch,
        prefill,
        decode,
        latency_s,
        throughput,
        energy: prefill.energy + decode.energy,
    })
}

/// `n_steps` denoising steps, each a pass of every DiT block. Reported in the
/// `decode` phase; `prefill` is empty.
pub fn dit_end_to_end(
    sim: &Simulator,
    model: &ModelConfig,
    params: &InferenceParams,
    plan: &ParallelismPlan,
    n_steps: u64,
) -> Result<EndToEndReport> {
    if model.family != Family::Dit {
        return Err(Error::Workload(format!(
            "`{}` is not a diffusion transformer",
            model.name
        )));
    }
    if n_steps == 0 {
        return Err(Error::Precondition("diffusion steps must be >= 1".into()));
    }
    let cfg = sim.config();
    let mb = microbatch(params, plan)?;
    let block = build_dit_block(model, &mb)?;
    let tokens = model.dit_tokens(params.image_resolution)?;
    let act = mb.batch * tokens * model.d_model * params.precision.bytes();
    let step = pass_cost(sim, &block, model.n_layers, plan, act)?;
    let cycles = step.cycles * n_steps;
    let decode = PhaseCost {
        cycles,
        seconds: cfg.seconds(cycles),
        energy: step.energy.scaled(n_steps as f64),
    };
    let latency_s = decode.seconds;
    Ok(EndToEndReport {
        model: model.name.clone(),
        config: cfg.name.clone(),
        plan: *plan,
        batch: params.batch,
        prefill: PhaseCost::default(),
        decode,
        latency_s,
        throughput: params.batch as f64 / latency_s,
        energy: decode.energy,
    })
}

/// Runs either model family end to end.
pub fn end_to_end(
    sim: &Simulator,
    model: &ModelConfig,
    params: &InferenceParams,
    plan: &ParallelismPlan,
    dit_steps: u64,
) -> Result<EndToEndReport> {
    match model.family {
        Family::Llm => llm_end_to_end(sim, model, params, plan),
        Family::Dit => dit_end_to_end(sim, model, params, plan, dit_steps),
    }
}

/// Plans evaluated per device count: a single device, then pure tensor and
/// pure pipeline parallelism for 2 and 4 devices.
pub fn scaling_plans() -> Vec<ParallelismPlan> {
    vec![
        ParallelismPlan::single(),
        ParallelismPlan::new(2, 1),
        ParallelismPlan::new(1, 2),
        ParallelismPlan::new(4, 1),
        ParallelismPlan::new(1, 4),
    ]
}

/// One row of a device-scaling study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub devices: u64,
    pub plan: ParallelismPlan,
    pub report: EndToEndReport,
}

/// Weak scaling: every device keeps `per_device_batch` sequences.
pub fn scaling_study(
    sim: &Simulator,
    model: &ModelConfig,
    params: &InferenceParams,
    per_device_batch: u64,
    dit_steps: u64,
) -> Result<Vec<ScalingRow>> {
    scaling_plans()
        .into_iter()
        .map(|plan| {
            let p = InferenceParams {
                batch: per_device_batch * plan.devices(),
                ..*params
            };
            Ok(ScalingRow {
                devices: plan.devices(),
                plan,
                report: end_to_end(sim, model, &p, &plan, dit_steps)?,
            })
        })
        .collect()
}

/// Best throughput among the plans for each device count, in device order.
pub fn best_by_devices(rows: &[ScalingRow]) -> Vec<(u64, &ScalingRow)> {
    let mut out: Vec<(u64, &ScalingRow)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(d, _)| *d == r.devices) {
            Some(slot) if r.report.throughput > slot.1.report.throughput => slot.1 = r,
            Some(_) => {}
            None => out.push((r.devices, r)),
        }
    }
    out.sort_by_key(|(d, _)| *d);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwconfig::builtin_preset;

    fn gpt3() -> (ModelConfig, InferenceParams) {
        (ModelConfig::gpt3_30b(), InferenceParams::default())
    }

    #[test]
    fn tp1_is_identity() {
        let (m, p) = gpt3();
        let g = build_llm_prefill_layer(&m, &p).unwrap();
        let s = shard_graph(&g, 1).unwrap();
        assert_eq!(s.ops, g.ops);
        assert!(!s
            .ops
            .iter()
            .any(|o| matches!(o.kind, OpKind::AllReduce { .. })));
    }

    #[test]
    fn tp2_halves_heads_and_reduces_twice() {
        let (m, p) = gpt3();
        let g = build_llm_prefill_layer(&m, &p).unwrap();
        let s = shard_graph(&g, 2).unwrap();
        let qk = s.get("qk").unwrap();
        assert!(matches!(qk.kind, OpKind::Gemm { batch, .. } if batch == 8 * 28));
        let reduces: Vec<_> = s
            .ops
            .iter()
            .filter_map(|o| match o.kind {
                OpKind::AllReduce { bytes, group_size } => Some((bytes, group_size)),
                _ => None,
            })
            .collect();
        assert_eq!(reduces, vec![(8 * 1024 * 7168, 2), (8 * 1024 * 7168, 2)]);
        assert_eq!(s.flops() * 2, g.flops());
        // consumers now wait on the all-reduce
        assert_eq!(
            s.get("residual1").unwrap().deps,
            vec!["proj_allreduce".to_string()]
        );
    }

    #[test]
    fn indivisible_shard_rejected() {
        let m = ModelConfig::llm("odd", 2, 3, 96);
        let g = build_llm_prefill_layer(
            &m,
            &InferenceParams {
                batch: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(shard_graph(&g, 2).is_err());
    }

    #[test]
    fn pipeline_formula() {
        assert_eq!(pipeline_latency(&[10], 3, 99).unwrap(), 30);
        assert_eq!(pipeline_latency(&[5, 5, 5, 5], 4, 0).unwrap(), 35);
        assert_eq!(pipeline_latency(&[5, 9], 2, 1).unwrap(), 3 * 9 + 1);
        assert!(pipeline_latency(&[], 2, 0).is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(ParallelismPlan::new(2, 2).validate().is_ok());
        assert!(ParallelismPlan::new(3, 1).validate().is_err());
        assert!(ParallelismPlan::new(4, 2).validate().is_err());
        assert_eq!(ParallelismPlan::new(1, 4).microbatches, 4);
    }

    #[test]
    fn prefill_only_when_no_output() {
        let cfg = builtin_preset("design-a").unwrap();
        let sim = Simulator::new(cfg);
        let (m, mut p) = gpt3();
        p.out_len = 0;
        let r = llm_end_to_end(&sim, &m, &p, &ParallelismPlan::single()).unwrap();
        assert_eq!(r.decode.cycles, 0);
        assert!(r.prefill.cycles > 0);
        assert_eq!(r.throughput, 0.0);
    }

    #[test]
    fn kv_overflow_is_a_capacity_error() {
        let mut cfg = builtin_preset("design-a").unwrap();
        cfg.hbm_bytes = 1 << 20;
        let sim = Simulator::new(cfg);
        let (m, p) = gpt3();
        let err = llm_end_to_end(&sim, &m, &p, &ParallelismPlan::single()).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }
}
