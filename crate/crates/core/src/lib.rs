//! Analytical latency and energy model for TPU-class inference accelerators
//! whose matrix units are either digital systolic arrays or grids of
//! compute-in-memory cores.

pub mod cim;
pub mod dse;
pub mod energy;
pub mod error;
pub mod hwconfig;
pub mod mapper;
pub mod memory;
pub mod multidevice;
pub mod systolic;
pub mod vpu;
pub mod workload;

pub use energy::{EnergyBreakdown, Traffic};
pub use error::{ConfigError, Error, Result};
pub use hwconfig::{builtin_preset, load_config, CimGrid, MxuKind, TpuConfig, VpuConfig};
pub use mapper::{
    best_mapping, brute_force_best, enumerate_mappings, evaluate_graph, evaluate_mapping, Engine,
    LatencyEnergy, LayerReport, Mapping, OpResult, Simulator, Tile3,
};
pub use systolic::GemmTile;
pub use workload::{Category, LayerGraph, ModelConfig, OpKind, Operator, Precision};
