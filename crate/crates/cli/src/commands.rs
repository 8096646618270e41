use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use cimtpu_core::dse::{
    compare_to_baseline, pareto_front, sweep, workload_layer, RatioRow, Stage, SweepRow,
    WorkloadSpec, SWEEP_SCHEMA_VERSION,
};
use cimtpu_core::hwconfig::{parse_config, PRESET_NAMES, TABLE_V_PRESETS};
use cimtpu_core::mapper::TraceEntry;
use cimtpu_core::multidevice::{end_to_end, EndToEndReport};
use cimtpu_core::{builtin_preset, load_config, LayerReport, ModelConfig, Simulator, TpuConfig};

use crate::args::{Format, OutputArgs, PresetsArgs, SimulateArgs, SweepArgs};
use crate::render;

/// Version of the `simulate` JSON document.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Io(String),
}

impl Failure {
    /// Unreadable inputs and unwritable outputs count as bad arguments.
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Io(_) => 2,
            Failure::Infeasible(_) => 3,
        }
    }
}

impl From<cimtpu_core::Error> for Failure {
    fn from(e: cimtpu_core::Error) -> Self {
        if e.is_infeasible() {
            Failure::Infeasible(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<cimtpu_core::ConfigError> for Failure {
    fn from(e: cimtpu_core::ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn io_err(what: &Path, e: io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", what.display()))
}

fn stamp(on: bool) -> Option<u64> {
    on.then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    })
}

fn emit(out: &OutputArgs, body: &str) -> Result<(), Failure> {
    match &out.output {
        Some(path) => fs::write(path, body).map_err(|e| io_err(path, e)),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(body.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::Io(format!("stdout: {e}")))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

#[derive(Debug, Serialize)]
pub struct SimulateReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub config: Value,
    pub assumption_flags: Vec<String>,
    pub workload: WorkloadSpec,
    /// The per-device layer; for end-to-end runs, the prefill layer or DiT block.
    pub layer: LayerReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_to_end: Option<EndToEndReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at_unix_s: Option<u64>,
}

pub fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    let spec = a.workload.spec()?;
    spec.plan.validate()?;
    let sim = Simulator::new(cfg.clone());
    let graph = workload_layer(&spec)?;
    let layer = sim.evaluate_graph(&graph)?;
    let e2e = match spec.stage {
        Stage::End2end => Some(end_to_end(
            &sim,
            &spec.model,
            &spec.params,
            &spec.plan,
            spec.dit_steps,
        )?),
        _ => None,
    };

    if let Some(path) = &a.trace_mappings {
        let mut trace: Vec<TraceEntry> = Vec::new();
        for op in &graph.ops {
            sim.evaluate_op_traced(op, &mut trace)?;
        }
        fs::write(path, to_json(&trace)).map_err(|e| io_err(path, e))?;
    }

    let report = SimulateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "simulate",
        config: cfg.to_json(),
        assumption_flags: cfg.assumption_flags(),
        workload: spec,
        layer,
        end_to_end: e2e,
        generated_at_unix_s: stamp(a.output.stamp),
    };
    let body = match a.output.format {
        Format::Json => to_json(&report),
        Format::Csv => render::simulate_csv(&report),
        Format::Text => render::simulate_text(&cfg, &report),
    };
    emit(&a.output, &body)
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub workload: WorkloadSpec,
    pub rows: Vec<SweepRow>,
    /// Names of rows not dominated in (latency, MXU energy).
    pub pareto_front: Vec<String>,
    pub baseline: Option<String>,
    pub ratios: Vec<RatioRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at_unix_s: Option<u64>,
}

/// Reads a grid document: a JSON array whose entries are preset names,
/// paths to config documents, or inline config documents.
pub fn load_grid(path: &Path) -> Result<Vec<TpuConfig>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let Value::Array(items) = doc else {
        return Err(Failure::Usage(format!(
            "{}: grid must be a JSON array",
            path.display()
        )));
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| match item {
            Value::String(s) => Ok(load_config(s)?),
            Value::Object(_) => Ok(parse_config(&item.to_string())?),
            _ => Err(Failure::Usage(format!(
                "grid entry {i}: expected a name, path or object"
            ))),
        })
        .collect()
}

pub fn table_v_grid() -> Vec<TpuConfig> {
    std::iter::once("tpuv4i-baseline")
        .chain(TABLE_V_PRESETS.iter().copied())
        .map(|n| builtin_preset(n).expect("builtin preset"))
        .collect()
}

pub fn run_sweep(a: &SweepArgs) -> Result<(), Failure> {
    let grid = match &a.grid {
        Some(path) => load_grid(path)?,
        None => table_v_grid(),
    };
    let spec = a.workload.spec()?;
    spec.plan.validate()?;
    let table = sweep(&grid, &spec)?;

    let baseline = match &a.baseline {
        Some(name) => match table.rows.iter().find(|r| &r.name == name) {
            Some(r) => Some(r),
            None => {
                return Err(Failure::Usage(format!(
                    "baseline `{name}` is not in the grid"
                )))
            }
        },
        None => table.rows.iter().find(|r| r.name == "tpuv4i-baseline"),
    };
    let ratios = match baseline {
        Some(b) if b.feasible => compare_to_baseline(&table.rows, b)?,
        _ => Vec::new(),
    };
    let report = SweepReport {
        schema_version: SWEEP_SCHEMA_VERSION,
        command: "sweep",
        workload: table.workload.clone(),
        pareto_front: pareto_front(&table.rows)
            .into_iter()
            .map(|r| r.name)
            .collect(),
        baseline: baseline.map(|b| b.name.clone()),
        ratios,
        rows: table.rows,
        generated_at_unix_s: stamp(a.output.stamp),
    };
    let body = match a.output.format {
        Format::Json => to_json(&report),
        Format::Csv => render::sweep_csv(&report.rows)?,
        Format::Text => render::sweep_text(&report),
    };
    emit(&a.output, &body)
}

#[derive(Debug, Serialize)]
struct PresetEntry {
    name: &'static str,
    kind: &'static str,
    dims: String,
    mxu_count: u32,
    peak_macs_total: f64,
}

#[derive(Debug, Serialize)]
struct ModelEntry {
    name: String,
    n_layers: u64,
    n_heads: u64,
    d_model: u64,
}

pub fn presets(a: &PresetsArgs) -> Result<(), Failure> {
    let configs: Vec<PresetEntry> = PRESET_NAMES
        .iter()
        .map(|&name| {
            let cfg = builtin_preset(name).expect("builtin preset");
            let (kind, dims) = render::mxu_shape(&cfg);
            PresetEntry {
                name,
                kind,
                dims,
                mxu_count: cfg.mxu_count,
                peak_macs_total: cfg.peak_macs_total(),
            }
        })
        .collect();
    let models: Vec<ModelEntry> = [ModelConfig::gpt3_30b(), ModelConfig::dit_xl_2()]
        .into_iter()
        .map(|m| ModelEntry {
            name: m.name,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
        })
        .collect();
    let body = match a.format {
        Format::Json => to_json(&serde_json::json!({ "configs": configs, "models": models })),
        Format::Csv | Format::Text => {
            let mut s = String::new();
            for c in &configs {
                s += &format!(
                    "config  {:<16} {:<8} {:>7} x{:<2} {:>8.0} MACs/cycle\n",
                    c.name, c.kind, c.dims, c.mxu_count, c.peak_macs_total
                );
            }
            for m in &models {
                s += &format!(
                    "model   {:<16} {} layers, {} heads, d_model {}\n",
                    m.name, m.n_layers, m.n_heads, m.d_model
                );
            }
            s
        }
    };
    let mut stdout = io::stdout().lock();
    stdout
        .write_all(body.as_bytes())
        .map_err(|e| Failure::Io(format!("stdout: {e}")))
}
