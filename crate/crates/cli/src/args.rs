use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cimtpu_core::dse::{Stage, WorkloadSpec};
use cimtpu_core::multidevice::{ParallelismPlan, DEFAULT_DIT_STEPS};
use cimtpu_core::workload::InferenceParams;
use cimtpu_core::{ModelConfig, Precision};

#[derive(Debug, Parser)]
#[command(
    name = "cimtpu",
    version,
    about = "Latency and energy model for TPU-class accelerators with digital or compute-in-memory matrix units"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate one workload on one configuration.
    Simulate(SimulateArgs),
    /// Evaluate one workload across a grid of configurations.
    Sweep(SweepArgs),
    /// List built-in configurations and models.
    Presets(PresetsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Prefill,
    Decode,
    Block,
    End2end,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Prefill => Stage::Prefill,
            StageArg::Decode => Stage::Decode,
            StageArg::Block => Stage::Block,
            StageArg::End2end => Stage::End2end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Int8,
    Bf16,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Int8 => Precision::Int8,
            PrecisionArg::Bf16 => Precision::Bf16,
        }
    }
}

/// Model, stage, inference shape and parallelism plan.
#[derive(Debug, Args)]
pub struct WorkloadArgs {
    /// Built-in model (gpt3-30b, dit-xl-2) or path to a model JSON document.
    #[arg(long)]
    pub model: String,
    #[arg(long, value_enum, default_value = "end2end")]
    pub stage: StageArg,
    #[arg(long, default_value_t = 8)]
    pub batch: u64,
    /// Prompt length (LLM).
    #[arg(long, default_value_t = 1024)]
    pub seq_in: u64,
    /// Generated tokens (LLM end-to-end).
    #[arg(long, default_value_t = 512)]
    pub out_len: u64,
    /// Context position of a single decode step.
    #[arg(long, default_value_t = 256)]
    pub decode_pos: u64,
    /// Image side in pixels (DiT).
    #[arg(long, default_value_t = 512)]
    pub resolution: u64,
    #[arg(long, value_enum, default_value = "int8")]
    pub precision: PrecisionArg,
    /// Tensor-parallel degree.
    #[arg(long, default_value_t = 1)]
    pub tp: u64,
    /// Pipeline stages.
    #[arg(long, default_value_t = 1)]
    pub pp: u64,
    /// Microbatches in flight; defaults to the number of pipeline stages.
    #[arg(long)]
    pub microbatches: Option<u64>,
    /// Diffusion steps (DiT end-to-end).
    #[arg(long, default_value_t = DEFAULT_DIT_STEPS)]
    pub dit_steps: u64,
}

impl WorkloadArgs {
    pub fn spec(&self) -> cimtpu_core::Result<WorkloadSpec> {
        let mut plan = ParallelismPlan::new(self.tp, self.pp);
        if let Some(m) = self.microbatches {
            plan.microbatches = m;
        }
        Ok(WorkloadSpec {
            model: ModelConfig::load(&self.model)?,
            stage: self.stage.into(),
            params: InferenceParams {
                batch: self.batch,
                seq_in: self.seq_in,
                decode_pos: self.decode_pos,
                out_len: self.out_len,
                image_resolution: self.resolution,
                precision: self.precision.into(),
            },
            plan,
            dit_steps: self.dit_steps,
        })
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Add a generation timestamp to JSON reports.
    #[arg(long)]
    pub stamp: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Preset name or path to a hardware JSON document.
    #[arg(long)]
    pub config: String,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Dump every mapping candidate the search evaluated as JSON.
    #[arg(long)]
    pub trace_mappings: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("grid_source").required(true))]
pub struct SweepArgs {
    /// The nine-point CIM architecture grid plus the digital baseline.
    #[arg(long, group = "grid_source")]
    pub table_v: bool,
    /// JSON array of preset names, config paths or inline config documents.
    #[arg(long, group = "grid_source")]
    pub grid: Option<PathBuf>,
    /// Row used for baseline-relative ratios; defaults to tpuv4i-baseline
    /// when the grid contains it.
    #[arg(long)]
    pub baseline: Option<String>,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct PresetsArgs {
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
}
