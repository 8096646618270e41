//! Design-space sweeps over hardware configurations.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwconfig::{MxuKind, TpuConfig};
use crate::mapper::Simulator;
use crate::multidevice::{end_to_end, shard_graph, ParallelismPlan, DEFAULT_DIT_STEPS};
use crate::workload::{
    build_dit_block, build_llm_decode_layer, build_llm_prefill_layer, Family, InferenceParams,
    LayerGraph, ModelConfig,
};

/// Bumped whenever sweep columns change.
pub const SWEEP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefill,
    Decode,
    Block,
    End2end,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prefill" => Some(Stage::Prefill),
            "decode" => Some(Stage::Decode),
            "block" => Some(Stage::Block),
            "end2end" => Some(Stage::End2end),
            _ => None,
        }
    }
}

/// What every configuration in a sweep is asked to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub model: ModelConfig,
    pub stage: Stage,
    pub params: InferenceParams,
    pub plan: ParallelismPlan,
    pub dit_steps: u64,
}

impl WorkloadSpec {
    pub fn end_to_end(model: ModelConfig, params: InferenceParams) -> Self {
        WorkloadSpec {
            model,
            stage: Stage::End2end,
            params,
            plan: ParallelismPlan::single(),
            dit_steps: DEFAULT_DIT_STEPS,
        }
    }
}

/// Latency and energy of a workload on one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadCost {
    pub latency_s: f64,
    pub mxu_energy_j: f64,
    pub total_energy_j: f64,
}

/// Single-layer stages report one device's layer; end-to-end runs the plan.
pub fn run_workload(sim: &Simulator, w: &WorkloadSpec) -> Result<WorkloadCost> {
    if w.stage == Stage::End2end {
        let r = end_to_end(sim, &w.model, &w.params, &w.plan, w.dit_steps)?;
        return Ok(WorkloadCost {
            latency_s: r.latency_s,
            mxu_energy_j: r.energy.mxu_j,
            total_energy_j: r.energy.total(),
        });
    }
    let r = sim.evaluate_graph(&workload_layer(w)?)?;
    Ok(WorkloadCost {
        latency_s: r.total.seconds,
        mxu_energy_j: r.total.energy.mxu_j,
        total_energy_j: r.total.energy.total(),
    })
}

/// The per-device layer a workload runs. End-to-end workloads are
/// represented by their prefill layer (LLM) or diffusion block (DiT).
pub fn workload_layer(w: &WorkloadSpec) -> Result<LayerGraph> {
    let layer = match (w.stage, w.model.family) {
        (Stage::Prefill | Stage::End2end, Family::Llm) => {
            build_llm_prefill_layer(&w.model, &w.params)?
        }
        (Stage::Decode, Family::Llm) => build_llm_decode_layer(&w.model, &w.params)?,
        (Stage::Block | Stage::End2end, Family::Dit) => build_dit_block(&w.model, &w.params)?,
        (stage, family) => {
            return Err(Error::Workload(format!(
                "stage {stage:?} does not apply to a {family:?} model"
            )))
        }
    };
    shard_graph(&layer, w.plan.tp_degree)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    /// `digital` or `cim`.
    pub kind: String,
    /// Array rows x cols (digital) or core grid rows x cols (CIM).
    pub dims: String,
    pub mxu_count: u32,
    pub peak_macs_per_mxu: f64,
    pub peak_macs_total: f64,
    pub area_proxy: f64,
    pub feasible: bool,
    pub latency_s: Option<f64>,
    pub mxu_energy_j: Option<f64>,
    pub total_energy_j: Option<f64>,
    pub mxu_energy_per_mxu_j: Option<f64>,
    pub area_proxy_per_mxu: f64,
    pub error: Option<String>,
}

impl SweepRow {
    fn new(cfg: &TpuConfig, cost: Result<WorkloadCost>) -> Self {
        let (kind, dims) = match cfg.mxu {
            MxuKind::DigitalSystolic { rows, cols } => ("digital", format!("{rows}x{cols}")),
            MxuKind::CimGrid(g) => ("cim", format!("{}x{}", g.grid_rows, g.grid_cols)),
        };
        let count = f64::from(cfg.mxu_count);
        let (feasible, cost, error) = match cost {
            Ok(c) => (true, Some(c), None),
            Err(e) => (false, None, Some(e.to_string())),
        };
        SweepRow {
            name: cfg.name.clone(),
            kind: kind.to_string(),
            dims,
            mxu_count: cfg.mxu_count,
            peak_macs_per_mxu: cfg.peak_macs_per_mxu(),
            peak_macs_total: cfg.peak_macs_total(),
            area_proxy: cfg.area_proxy(),
            feasible,
            latency_s: cost.map(|c| c.latency_s),
            mxu_energy_j: cost.map(|c| c.mxu_energy_j),
            total_energy_j: cost.map(|c| c.total_energy_j),
            mxu_energy_per_mxu_j: cost.map(|c| c.mxu_energy_j / count),
            area_proxy_per_mxu: cfg.area_proxy() / count,
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub workload: WorkloadSpec,
    pub rows: Vec<SweepRow>,
}

/// Evaluates every configuration; rows follow grid order. A configuration
/// that cannot run the workload yields a row with `feasible = false`.
pub fn sweep(grid: &[TpuConfig], w: &WorkloadSpec) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::Precondition("sweep grid is empty".into()));
    }
    for cfg in grid {
        cfg.validate()?;
    }
    let rows = grid
        .par_iter()
        .map(|cfg| {
            let sim = Simulator::new(cfg.clone());
            let cost = run_workload(&sim, w).and_then(|c| {
                if c.latency_s.is_finite() {
                    Ok(c)
                } else {
                    Err(Error::Precondition("non-finite latency".into()))
                }
            });
            match cost {
                Err(e) if !(e.is_infeasible() || matches!(e, Error::Workload(_))) => Err(e),
                cost => Ok(SweepRow::new(cfg, cost)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        schema_version: SWEEP_SCHEMA_VERSION,
        workload: w.clone(),
        rows,
    })
}

fn dominates(a: &SweepRow, b: &SweepRow) -> bool {
    match (a.latency_s, a.mxu_energy_j, b.latency_s, b.mxu_energy_j) {
        (Some(la), Some(ea), Some(lb), Some(eb)) => la <= lb && ea <= eb && (la < lb || ea < eb),
        _ => false,
    }
}

/// Feasible rows not dominated in (latency, MXU energy), in table order.
pub fn pareto_front(rows: &[SweepRow]) -> Vec<SweepRow> {
    rows.iter()
        .filter(|r| r.feasible)
        .filter(|r| !rows.iter().any(|o| o.feasible && dominates(o, r)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub name: String,
    /// Row latency over baseline latency.
    pub latency_ratio: Option<f64>,
    pub mxu_energy_ratio: Option<f64>,
    pub total_energy_ratio: Option<f64>,
    /// Baseline latency over row latency.
    pub speedup: Option<f64>,
    /// Baseline MXU energy over row MXU energy.
    pub mxu_energy_reduction: Option<f64>,
}

/// Every row relative to `baseline`, which must be a feasible row.
pub fn compare_to_baseline(rows: &[SweepRow], baseline: &SweepRow) -> Result<Vec<RatioRow>> {
    let (Some(bl), Some(be), Some(bt)) = (
        baseline.latency_s,
        baseline.mxu_energy_j,
        baseline.total_energy_j,
    ) else {
        return Err(Error::Precondition(format!(
            "baseline `{}` is infeasible",
            baseline.name
        )));
    };
    let ratio = |x: Option<f64>, base: f64| x.map(|v| v / base);
    let inv = |x: Option<f64>, base: f64| x.filter(|v| *v > 0.0).map(|v| base / v);
    Ok(rows
        .iter()
        .map(|r| RatioRow {
            name: r.name.clone(),
            latency_ratio: ratio(r.latency_s, bl),
            mxu_energy_ratio: ratio(r.mxu_energy_j, be),
            total_energy_ratio: ratio(r.total_energy_j, bt),
            speedup: inv(r.latency_s, bl),
            mxu_energy_reduction: inv(r.mxu_energy_j, be),
        })
        .collect())
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

pub fn to_json(table: &SweepTable) -> Result<String> {
    serde_json::to_string_pretty(table).map_err(|e| Error::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwconfig::builtin_preset;

    fn row(name: &str, lat: f64, e: f64) -> SweepRow {
        let mut r = SweepRow::new(
            &TpuConfig::baseline(),
            Ok(WorkloadCost {
                latency_s: lat,
                mxu_energy_j: e,
                total_energy_j: 2.0 * e,
            }),
        );
        r.name = name.to_string();
        r
    }

    #[test]
    fn pareto_basics() {
        let a = row("a", 1.0, 5.0);
        assert_eq!(pareto_front(std::slice::from_ref(&a)), vec![a.clone()]);
        let rows = vec![
            a.clone(),
            row("b", 2.0, 6.0),
            row("c", 2.0, 1.0),
            row("d", 1.0, 5.0),
        ];
        let front = pareto_front(&rows);
        let names: Vec<_> = front.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["a", "c", "d"]);
        assert_eq!(pareto_front(&front), front);
    }

    #[test]
    fn baseline_against_itself() {
        let b = row("b", 3.0, 4.0);
        let r = compare_to_baseline(std::slice::from_ref(&b), &b).unwrap();
        assert_eq!(r[0].latency_ratio, Some(1.0));
        assert_eq!(r[0].mxu_energy_ratio, Some(1.0));
        assert_eq!(r[0].speedup, Some(1.0));
        assert_eq!(r[0].mxu_energy_reduction, Some(1.0));
    }

    #[test]
    fn single_point_equals_direct_run() {
        let cfg = builtin_preset("design-a").unwrap();
        let w = WorkloadSpec {
            stage: Stage::Decode,
            ..WorkloadSpec::end_to_end(ModelConfig::gpt3_30b(), InferenceParams::default())
        };
        let t = sweep(std::slice::from_ref(&cfg), &w).unwrap();
        assert_eq!(t.rows.len(), 1);
        let direct = run_workload(&Simulator::new(cfg), &w).unwrap();
        assert_eq!(t.rows[0].latency_s, Some(direct.latency_s));
        assert_eq!(t.rows[0].mxu_energy_j, Some(direct.mxu_energy_j));
    }

    #[test]
    fn infeasible_rows_are_flagged() {
        let mut tiny = TpuConfig::baseline();
        tiny.name = "tiny".into();
        tiny.vmem_bytes = 4;
        let w = WorkloadSpec {
            stage: Stage::Decode,
            ..WorkloadSpec::end_to_end(ModelConfig::gpt3_30b(), InferenceParams::default())
        };
        let t = sweep(&[TpuConfig::baseline(), tiny], &w).unwrap();
        assert!(t.rows[0].feasible);
        assert!(!t.rows[1].feasible && t.rows[1].latency_s.is_none());
        assert!(t.rows[1].error.is_some());
        let mut csv = Vec::new();
        write_csv(&t.rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("name,kind,dims,"));
    }

    #[test]
    fn wrong_stage_for_family() {
        let w = WorkloadSpec {
            stage: Stage::Block,
            ..WorkloadSpec::end_to_end(ModelConfig::gpt3_30b(), InferenceParams::default())
        };
        assert!(run_workload(&Simulator::new(TpuConfig::baseline()), &w).is_err());
    }
}
