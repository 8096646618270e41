//! Hardware description of a TPU-class inference chip.
//!
//! A [`TpuConfig`] captures the matrix units (either digital weight-stationary
//! systolic arrays or grids of digital compute-in-memory cores), the vector
//! unit, the VMEM/CMEM/HBM hierarchy, inter-chip links and the per-event
//! energy table. Configurations are loaded from JSON documents that may start
//! from a named preset and override individual fields.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ConfigError;

pub const KB: u64 = 1_000;
pub const MB: u64 = 1_000_000;
pub const GB: u64 = 1_000_000_000;
pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

/// Clock used by every preset (TPUv4i nominal clock).
pub const DEFAULT_FREQUENCY_HZ: f64 = 1.05e9;
/// CMEM<->VMEM bandwidth used when a document does not give one.
pub const DEFAULT_OCI_BW: f64 = 1024.0e9;
pub const DEFAULT_BURST_BYTES: u64 = 64;

/// Joules per MAC of the digital systolic MXU: 2 ops/MAC at 0.77 TOPS/W.
pub const MAC_ENERGY_DIGITAL: f64 = 2.597e-12;
/// Joules per MAC of the CIM-MXU: 2 ops/MAC at 7.26 TOPS/W.
pub const MAC_ENERGY_CIM: f64 = 0.2755e-12;
/// Area efficiency advantage of the CIM-MXU over the digital MXU.
pub const CIM_AREA_ADVANTAGE: f64 = 2.02;

/// Names accepted by [`builtin_preset`], in listing order.
pub const PRESET_NAMES: &[&str] = &[
    "tpuv4i-baseline",
    "cim-16x8-x4",
    "design-a",
    "design-b",
    "cim-8x8-x2",
    "cim-8x8-x4",
    "cim-8x8-x8",
    "cim-16x8-x2",
    "cim-16x8-x8",
    "cim-16x16-x2",
    "cim-16x16-x4",
    "cim-16x16-x8",
];

/// Preset names forming the 3x3 architecture exploration grid.
pub const TABLE_V_PRESETS: &[&str] = &[
    "cim-8x8-x2",
    "cim-8x8-x4",
    "cim-8x8-x8",
    "cim-16x8-x2",
    "cim-16x8-x4",
    "cim-16x8-x8",
    "cim-16x16-x2",
    "cim-16x16-x4",
    "cim-16x16-x8",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpuConfig {
    pub name: String,
    pub frequency_hz: f64,
    pub mxu_count: u32,
    pub mxu: MxuKind,
    pub vpu: VpuConfig,
    pub vmem_bytes: u64,
    pub cmem_bytes: u64,
    pub hbm_bytes: u64,
    /// Main memory bandwidth, bytes per second.
    pub hbm_bw: f64,
    /// On-chip interconnect (CMEM<->VMEM) bandwidth, bytes per second.
    pub oci_bw: f64,
    pub ici_links: u32,
    /// Bandwidth of one inter-chip link, bytes per second.
    pub ici_link_bw: f64,
    /// DRAM burst size used for coalescing strided tile rows.
    pub burst_bytes: u64,
    /// Fixed latency added to every memory transfer.
    pub transfer_latency_cycles: u64,
    pub energy: EnergyTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MxuKind {
    DigitalSystolic { rows: u32, cols: u32 },
    CimGrid(CimGrid),
}

/// A 2-D systolic grid of bit-serial, weight-stationary CIM cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CimGrid {
    pub grid_rows: u32,
    pub grid_cols: u32,
    /// Input channels per core (K handled by one core).
    pub core_inputs: u32,
    /// Bit columns per core; `core_weight_cols / weight_bits` weights per input.
    pub core_weight_cols: u32,
    pub weight_bits: u32,
    /// Cycles of one bit-serial wave.
    pub wave_cycles: u32,
    /// Output channels a core evaluates concurrently during a wave.
    pub active_outputs_per_wave: u32,
    pub input_bus_bits: u32,
    /// Bytes a core column's weight port writes per cycle.
    pub weight_io_bytes_per_cycle: u32,
    pub fp_pre_cycles: u32,
    pub fp_post_cycles: u32,
}

impl Default for CimGrid {
    fn default() -> Self {
        CimGrid {
            grid_rows: 16,
            grid_cols: 8,
            core_inputs: 128,
            core_weight_cols: 256,
            weight_bits: 8,
            wave_cycles: 8,
            active_outputs_per_wave: 8,
            input_bus_bits: 32,
            weight_io_bytes_per_cycle: 32,
            fp_pre_cycles: 2,
            fp_post_cycles: 2,
        }
    }
}

impl CimGrid {
    pub fn with_dims(grid_rows: u32, grid_cols: u32) -> Self {
        CimGrid {
            grid_rows,
            grid_cols,
            ..CimGrid::default()
        }
    }

    /// Logical output channels stored per core.
    pub fn core_outputs(&self) -> u32 {
        self.core_weight_cols / self.weight_bits
    }

    /// Bytes held by one SRAM row of a core (one input channel across all
    /// stored outputs).
    pub fn row_bytes(&self) -> u32 {
        (self.core_weight_cols / 8).max(1)
    }

    /// Cycles the weight port needs to write one SRAM row.
    pub fn row_write_cycles(&self) -> u64 {
        u64::from(self.row_bytes()).div_ceil(u64::from(self.weight_io_bytes_per_cycle))
    }

    pub fn peak_macs_per_cycle(&self) -> f64 {
        f64::from(self.grid_rows)
            * f64::from(self.grid_cols)
            * f64::from(self.core_inputs)
            * f64::from(self.active_outputs_per_wave)
            / f64::from(self.wave_cycles)
    }

    pub fn cores(&self) -> u32 {
        self.grid_rows * self.grid_cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpuConfig {
    pub lanes: u32,
    pub c_add: u32,
    pub c_mul: u32,
    pub c_cmp: u32,
    pub c_exp: u32,
    pub c_tanh: u32,
    pub c_div: u32,
    pub c_rsqrt: u32,
}

impl Default for VpuConfig {
    fn default() -> Self {
        VpuConfig {
            lanes: 8 * 128,
            c_add: 1,
            c_mul: 1,
            c_cmp: 1,
            c_exp: 4,
            c_tanh: 4,
            c_div: 4,
            c_rsqrt: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTable {
    pub mac_energy_digital: f64,
    pub mac_energy_cim: f64,
    /// Fraction of a MAC's energy burnt by each provisioned but idle MAC slot
    /// per cycle while the MXUs are allocated to an operator.
    pub mxu_idle_factor: f64,
    pub vpu_op_energy: f64,
    pub vmem_energy: f64,
    pub cmem_energy: f64,
    pub hbm_energy: f64,
    pub ici_energy: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        EnergyTable {
            mac_energy_digital: MAC_ENERGY_DIGITAL,
            mac_energy_cim: MAC_ENERGY_CIM,
            mxu_idle_factor: 0.15,
            vpu_op_energy: 0.5e-12,
            vmem_energy: 0.10e-12,
            cmem_energy: 0.30e-12,
            hbm_energy: 4.0e-12,
            ici_energy: 10.0e-12,
        }
    }
}

impl EnergyTable {
    /// Every entry multiplied by `s`, except the dimensionless idle factor.
    pub fn scaled(&self, s: f64) -> Self {
        EnergyTable {
            mac_energy_digital: self.mac_energy_digital * s,
            mac_energy_cim: self.mac_energy_cim * s,
            mxu_idle_factor: self.mxu_idle_factor,
            vpu_op_energy: self.vpu_op_energy * s,
            vmem_energy: self.vmem_energy * s,
            cmem_energy: self.cmem_energy * s,
            hbm_energy: self.hbm_energy * s,
            ici_energy: self.ici_energy * s,
        }
    }
}

impl TpuConfig {
    /// TPUv4i-like chip with four 128x128 digital MXUs.
    pub fn baseline() -> Self {
        TpuConfig {
            name: "tpuv4i-baseline".to_string(),
            frequency_hz: DEFAULT_FREQUENCY_HZ,
            mxu_count: 4,
            mxu: MxuKind::DigitalSystolic {
                rows: 128,
                cols: 128,
            },
            vpu: VpuConfig::default(),
            vmem_bytes: 16 * MIB,
            cmem_bytes: 128 * MIB,
            hbm_bytes: 8 * GIB,
            hbm_bw: 614.0 * GB as f64,
            oci_bw: DEFAULT_OCI_BW,
            ici_links: 2,
            ici_link_bw: 100.0 * GB as f64,
            burst_bytes: DEFAULT_BURST_BYTES,
            transfer_latency_cycles: 0,
            energy: EnergyTable::default(),
        }
    }

    /// Same chip with `mxu_count` CIM-MXUs of `rows x cols` cores.
    pub fn cim(name: &str, rows: u32, cols: u32, mxu_count: u32) -> Self {
        TpuConfig {
            name: name.to_string(),
            mxu_count,
            mxu: MxuKind::CimGrid(CimGrid::with_dims(rows, cols)),
            ..TpuConfig::baseline()
        }
    }

    pub fn peak_macs_per_mxu(&self) -> f64 {
        match self.mxu {
            MxuKind::DigitalSystolic { rows, cols } => f64::from(rows) * f64::from(cols),
            MxuKind::CimGrid(g) => g.peak_macs_per_cycle(),
        }
    }

    pub fn peak_macs_total(&self) -> f64 {
        self.peak_macs_per_mxu() * f64::from(self.mxu_count)
    }

    pub fn mac_energy(&self) -> f64 {
        match self.mxu {
            MxuKind::DigitalSystolic { .. } => self.energy.mac_energy_digital,
            MxuKind::CimGrid(_) => self.energy.mac_energy_cim,
        }
    }

    pub fn is_cim(&self) -> bool {
        matches!(self.mxu, MxuKind::CimGrid(_))
    }

    /// Area proxy in digital-MAC equivalents.
    pub fn area_proxy(&self) -> f64 {
        match self.mxu {
            MxuKind::DigitalSystolic { .. } => self.peak_macs_total(),
            MxuKind::CimGrid(_) => self.peak_macs_total() / CIM_AREA_ADVANTAGE,
        }
    }

    pub fn hbm_bytes_per_cycle(&self) -> f64 {
        self.hbm_bw / self.frequency_hz
    }

    pub fn oci_bytes_per_cycle(&self) -> f64 {
        self.oci_bw / self.frequency_hz
    }

    pub fn ici_link_bytes_per_cycle(&self) -> f64 {
        self.ici_link_bw / self.frequency_hz
    }

    pub fn seconds(&self, cycles: u64) -> f64 {
        cycles as f64 / self.frequency_hz
    }

    /// Fields that carry modelling assumptions rather than published values.
    pub fn assumption_flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        if self.oci_bw == DEFAULT_OCI_BW {
            flags.push("oci_bw: assumed 1024 GB/s (not published)".to_string());
        }
        if self.burst_bytes == DEFAULT_BURST_BYTES {
            flags.push("burst_bytes: assumed 64 B".to_string());
        }
        if self.frequency_hz == DEFAULT_FREQUENCY_HZ {
            flags.push("frequency: assumed 1.05 GHz".to_string());
        }
        let e = EnergyTable::default();
        if self.energy.vmem_energy == e.vmem_energy
            || self.energy.cmem_energy == e.cmem_energy
            || self.energy.hbm_energy == e.hbm_energy
        {
            flags.push("memory energies: placeholder values".to_string());
        }
        flags
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn inv(field: &str, invariant: &str) -> ConfigError {
            ConfigError::Invariant {
                field: field.to_string(),
                invariant: invariant.to_string(),
            }
        }
        let positive_f = |v: f64, f: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(inv(f, "must be > 0"))
            }
        };
        positive_f(self.frequency_hz, "hardware.frequency_hz")?;
        if self.mxu_count < 1 {
            return Err(inv("hardware.mxu_count", "must be >= 1"));
        }
        for (v, f) in [
            (self.vmem_bytes, "memory.vmem_bytes"),
            (self.cmem_bytes, "memory.cmem_bytes"),
            (self.hbm_bytes, "memory.hbm_bytes"),
            (self.burst_bytes, "memory.burst_bytes"),
        ] {
            if v == 0 {
                return Err(inv(f, "capacity must be > 0"));
            }
        }
        positive_f(self.hbm_bw, "memory.hbm_bw")?;
        positive_f(self.oci_bw, "memory.oci_bw")?;
        positive_f(self.ici_link_bw, "memory.ici_link_bw")?;
        if self.vmem_bytes >= self.cmem_bytes {
            return Err(inv("memory.vmem_bytes", "vmem_bytes < cmem_bytes"));
        }
        if self.cmem_bytes >= self.hbm_bytes {
            return Err(inv("memory.cmem_bytes", "cmem_bytes < hbm_bytes"));
        }
        match self.mxu {
            MxuKind::DigitalSystolic { rows, cols } => {
                if rows < 1 || cols < 1 {
                    return Err(inv("mxu.rows", "rows, cols >= 1"));
                }
            }
            MxuKind::CimGrid(g) => {
                for (v, f) in [
                    (g.grid_rows, "mxu.grid_rows"),
                    (g.grid_cols, "mxu.grid_cols"),
                    (g.core_inputs, "mxu.core_inputs"),
                    (g.core_weight_cols, "mxu.core_weight_cols"),
                    (g.weight_bits, "mxu.weight_bits"),
                    (g.wave_cycles, "mxu.wave_cycles"),
                    (g.active_outputs_per_wave, "mxu.active_outputs_per_wave"),
                    (g.input_bus_bits, "mxu.input_bus_bits"),
                    (g.weight_io_bytes_per_cycle, "mxu.weight_io_bytes_per_cycle"),
                ] {
                    if v < 1 {
                        return Err(inv(f, "must be >= 1"));
                    }
                }
                if u64::from(g.active_outputs_per_wave) * u64::from(g.weight_bits)
                    > u64::from(g.core_weight_cols)
                {
                    return Err(inv(
                        "mxu.active_outputs_per_wave",
                        "active_outputs_per_wave * weight_bits <= core_weight_cols",
                    ));
                }
            }
        }
        let v = &self.vpu;
        if v.lanes < 1 {
            return Err(inv("vpu.lanes", "must be >= 1"));
        }
        for (c, f) in [
            (v.c_add, "vpu.c_add"),
            (v.c_mul, "vpu.c_mul"),
            (v.c_cmp, "vpu.c_cmp"),
            (v.c_exp, "vpu.c_exp"),
            (v.c_tanh, "vpu.c_tanh"),
            (v.c_div, "vpu.c_div"),
            (v.c_rsqrt, "vpu.c_rsqrt"),
        ] {
            if c < 1 {
                return Err(inv(f, "cycle costs must be >= 1"));
            }
        }
        let e = &self.energy;
        for (x, f) in [
            (e.mac_energy_digital, "energy.mac_energy_digital"),
            (e.mac_energy_cim, "energy.mac_energy_cim"),
            (e.mxu_idle_factor, "energy.mxu_idle_factor"),
            (e.vpu_op_energy, "energy.vpu_op_energy"),
            (e.vmem_energy, "energy.vmem_energy"),
            (e.cmem_energy, "energy.cmem_energy"),
            (e.hbm_energy, "energy.hbm_energy"),
            (e.ici_energy, "energy.ici_energy"),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(inv(f, "energies must be >= 0"));
            }
        }
        Ok(())
    }

    /// Full JSON document for this config. Parsing it back yields `self`.
    pub fn to_json(&self) -> Value {
        let mxu = match self.mxu {
            MxuKind::DigitalSystolic { rows, cols } => {
                json!({ "kind": "digital_systolic", "rows": rows, "cols": cols })
            }
            MxuKind::CimGrid(g) => json!({
                "kind": "cim_grid",
                "grid_rows": g.grid_rows,
                "grid_cols": g.grid_cols,
                "core_inputs": g.core_inputs,
                "core_weight_cols": g.core_weight_cols,
                "weight_bits": g.weight_bits,
                "wave_cycles": g.wave_cycles,
                "active_outputs_per_wave": g.active_outputs_per_wave,
                "input_bus_bits": g.input_bus_bits,
                "weight_io_bytes_per_cycle": g.weight_io_bytes_per_cycle,
                "fp_pre_cycles": g.fp_pre_cycles,
                "fp_post_cycles": g.fp_post_cycles,
            }),
        };
        json!({
            "hardware": {
                "name": self.name,
                "frequency_hz": self.frequency_hz,
                "mxu_count": self.mxu_count,
                "ici_links": self.ici_links,
            },
            "mxu": mxu,
            "vpu": serde_json::to_value(self.vpu).expect("plain struct"),
            "memory": {
                "vmem_bytes": self.vmem_bytes,
                "cmem_bytes": self.cmem_bytes,
                "hbm_bytes": self.hbm_bytes,
                "hbm_bw": self.hbm_bw,
                "oci_bw": self.oci_bw,
                "ici_link_bw": self.ici_link_bw,
                "burst_bytes": self.burst_bytes,
                "transfer_latency_cycles": self.transfer_latency_cycles,
            },
            "energy": serde_json::to_value(self.energy).expect("plain struct"),
        })
    }

    pub fn serialize(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("json value")
    }
}

/// Looks up one of the built-in configurations.
pub fn builtin_preset(name: &str) -> Result<TpuConfig, ConfigError> {
    let cfg = match name {
        "tpuv4i-baseline" => TpuConfig::baseline(),
        "design-a" => TpuConfig::cim("design-a", 8, 8, 4),
        "design-b" => TpuConfig::cim("design-b", 16, 8, 8),
        other => {
            let (rows, cols, count) =
                parse_grid_preset(other).ok_or_else(|| ConfigError::UnknownPreset(other.into()))?;
            TpuConfig::cim(other, rows, cols, count)
        }
    };
    Ok(cfg)
}

fn parse_grid_preset(name: &str) -> Option<(u32, u32, u32)> {
    if !PRESET_NAMES.contains(&name) {
        return None;
    }
    let rest = name.strip_prefix("cim-")?;
    let (dims, count) = rest.split_once("-x")?;
    let (r, c) = dims.split_once('x')?;
    Some((r.parse().ok()?, c.parse().ok()?, count.parse().ok()?))
}

// --- document parsing -------------------------------------------------------

/// A byte count or bandwidth written either as a number or as a string with a
/// decimal (KB/MB/GB) or binary (KiB/MiB/GiB) suffix, optionally ending in `/s`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Quantity(f64);

impl<'de> Deserialize<'de> for Quantity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Quantity(v)),
            Raw::Text(s) => parse_quantity(&s)
                .map(Quantity)
                .map_err(serde::de::Error::custom),
        }
    }
}

/// Parses `"16MiB"`, `"614 GB/s"`, `"4096"`, ...
pub fn parse_quantity(text: &str) -> Result<f64, String> {
    let s = text.trim();
    let s = s.strip_suffix("/s").unwrap_or(s).trim_end();
    let split = s.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("`{text}` is not a number with an optional size suffix"))?;
    let scale = match unit.trim() {
        "" | "B" => 1.0,
        "KB" => KB as f64,
        "MB" => MB as f64,
        "GB" => GB as f64,
        "KiB" => KIB as f64,
        "MiB" => MIB as f64,
        "GiB" => GIB as f64,
        other => return Err(format!("unknown size suffix `{other}` in `{text}`")),
    };
    Ok(value * scale)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    preset: Option<String>,
    hardware: Option<HardwareDoc>,
    mxu: Option<MxuDoc>,
    vpu: Option<VpuDoc>,
    memory: Option<MemoryDoc>,
    energy: Option<EnergyDoc>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HardwareDoc {
    name: Option<String>,
    frequency_hz: Option<f64>,
    mxu_count: Option<u32>,
    ici_links: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MxuDoc {
    kind: Option<String>,
    rows: Option<u32>,
    cols: Option<u32>,
    grid_rows: Option<u32>,
    grid_cols: Option<u32>,
    core_inputs: Option<u32>,
    core_weight_cols: Option<u32>,
    weight_bits: Option<u32>,
    wave_cycles: Option<u32>,
    active_outputs_per_wave: Option<u32>,
    input_bus_bits: Option<u32>,
    weight_io_bytes_per_cycle: Option<u32>,
    fp_pre_cycles: Option<u32>,
    fp_post_cycles: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VpuDoc {
    lanes: Option<u32>,
    c_add: Option<u32>,
    c_mul: Option<u32>,
    c_cmp: Option<u32>,
    c_exp: Option<u32>,
    c_tanh: Option<u32>,
    c_div: Option<u32>,
    c_rsqrt: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryDoc {
    vmem_bytes: Option<Quantity>,
    cmem_bytes: Option<Quantity>,
    hbm_bytes: Option<Quantity>,
    hbm_bw: Option<Quantity>,
    oci_bw: Option<Quantity>,
    ici_link_bw: Option<Quantity>,
    burst_bytes: Option<Quantity>,
    transfer_latency_cycles: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnergyDoc {
    mac_energy_digital: Option<f64>,
    mac_energy_cim: Option<f64>,
    mxu_idle_factor: Option<f64>,
    vpu_op_energy: Option<f64>,
    vmem_energy: Option<f64>,
    cmem_energy: Option<f64>,
    hbm_energy: Option<f64>,
    ici_energy: Option<f64>,
}

fn byte_count(q: Quantity, field: &str) -> Result<u64, ConfigError> {
    if q.0 < 0.0 || q.0.fract() != 0.0 || !q.0.is_finite() {
        return Err(ConfigError::InvalidValue {
            field: field.to_string(),
            message: format!("{} is not a whole number of bytes", q.0),
        });
    }
    Ok(q.0 as u64)
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Parses a JSON hardware document. A `preset` key selects the base config;
/// otherwise the TPUv4i baseline supplies every omitted field.
pub fn parse_config(text: &str) -> Result<TpuConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: ConfigDoc = match serde_path_to_error::deserialize(de) {
        Ok(doc) => doc,
        Err(err) => return Err(classify(err)),
    };
    let mut cfg = match &doc.preset {
        Some(name) => builtin_preset(name)?,
        None => TpuConfig::baseline(),
    };
    if doc.preset.is_none()
        && doc
            .hardware
            .as_ref()
            .and_then(|h| h.name.as_ref())
            .is_none()
    {
        cfg.name = "custom".to_string();
    }
    if let Some(h) = doc.hardware {
        if let Some(name) = h.name {
            cfg.name = name;
        }
        set(&mut cfg.frequency_hz, h.frequency_hz);
        set(&mut cfg.mxu_count, h.mxu_count);
        set(&mut cfg.ici_links, h.ici_links);
    }
    if let Some(m) = doc.mxu {
        cfg.mxu = merge_mxu(cfg.mxu, m)?;
    }
    if let Some(v) = doc.vpu {
        let p = &mut cfg.vpu;
        set(&mut p.lanes, v.lanes);
        set(&mut p.c_add, v.c_add);
        set(&mut p.c_mul, v.c_mul);
        set(&mut p.c_cmp, v.c_cmp);
        set(&mut p.c_exp, v.c_exp);
        set(&mut p.c_tanh, v.c_tanh);
        set(&mut p.c_div, v.c_div);
        set(&mut p.c_rsqrt, v.c_rsqrt);
    }
    if let Some(m) = doc.memory {
        if let Some(q) = m.vmem_bytes {
            cfg.vmem_bytes = byte_count(q, "memory.vmem_bytes")?;
        }
        if let Some(q) = m.cmem_bytes {
            cfg.cmem_bytes = byte_count(q, "memory.cmem_bytes")?;
        }
        if let Some(q) = m.hbm_bytes {
            cfg.hbm_bytes = byte_count(q, "memory.hbm_bytes")?;
        }
        if let Some(q) = m.burst_bytes {
            cfg.burst_bytes = byte_count(q, "memory.burst_bytes")?;
        }
        set(&mut cfg.hbm_bw, m.hbm_bw.map(|q| q.0));
        set(&mut cfg.oci_bw, m.oci_bw.map(|q| q.0));
        set(&mut cfg.ici_link_bw, m.ici_link_bw.map(|q| q.0));
        set(&mut cfg.transfer_latency_cycles, m.transfer_latency_cycles);
    }
    if let Some(e) = doc.energy {
        let t = &mut cfg.energy;
        set(&mut t.mac_energy_digital, e.mac_energy_digital);
        set(&mut t.mac_energy_cim, e.mac_energy_cim);
        set(&mut t.mxu_idle_factor, e.mxu_idle_factor);
        set(&mut t.vpu_op_energy, e.vpu_op_energy);
        set(&mut t.vmem_energy, e.vmem_energy);
        set(&mut t.cmem_energy, e.cmem_energy);
        set(&mut t.hbm_energy, e.hbm_energy);
        set(&mut t.ici_energy, e.ici_energy);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn merge_mxu(base: MxuKind, m: MxuDoc) -> Result<MxuKind, ConfigError> {
    let base = match m.kind.as_deref() {
        None => base,
        Some("digital_systolic") => match base {
            MxuKind::DigitalSystolic { .. } => base,
            _ => MxuKind::DigitalSystolic {
                rows: 128,
                cols: 128,
            },
        },
        Some("cim_grid") => match base {
            MxuKind::CimGrid(_) => base,
            _ => MxuKind::CimGrid(CimGrid::default()),
        },
        Some(other) => {
            return Err(ConfigError::InvalidValue {
                field: "mxu.kind".into(),
                message: format!("`{other}` is not one of digital_systolic, cim_grid"),
            })
        }
    };
    let misplaced = |field: &str| ConfigError::InvalidValue {
        field: format!("mxu.{field}"),
        message: "not applicable to this MXU kind".into(),
    };
    match base {
        MxuKind::DigitalSystolic { mut rows, mut cols } => {
            let cim_fields = [
                ("grid_rows", m.grid_rows),
                ("grid_cols", m.grid_cols),
                ("core_inputs", m.core_inputs),
                ("core_weight_cols", m.core_weight_cols),
                ("weight_bits", m.weight_bits),
                ("wave_cycles", m.wave_cycles),
                ("active_outputs_per_wave", m.active_outputs_per_wave),
                ("input_bus_bits", m.input_bus_bits),
                ("weight_io_bytes_per_cycle", m.weight_io_bytes_per_cycle),
                ("fp_pre_cycles", m.fp_pre_cycles),
                ("fp_post_cycles", m.fp_post_cycles),
            ];
            if let Some((f, _)) = cim_fields.iter().find(|(_, v)| v.is_some()) {
                return Err(misplaced(f));
            }
            set(&mut rows, m.rows);
            set(&mut cols, m.cols);
            Ok(MxuKind::DigitalSystolic { rows, cols })
        }
        MxuKind::CimGrid(mut g) => {
            if m.rows.is_some() {
                return Err(misplaced("rows"));
            }
            if m.cols.is_some() {
                return Err(misplaced("cols"));
            }
            set(&mut g.grid_rows, m.grid_rows);
            set(&mut g.grid_cols, m.grid_cols);
            set(&mut g.core_inputs, m.core_inputs);
            set(&mut g.core_weight_cols, m.core_weight_cols);
            set(&mut g.weight_bits, m.weight_bits);
            set(&mut g.wave_cycles, m.wave_cycles);
            set(&mut g.active_outputs_per_wave, m.active_outputs_per_wave);
            set(&mut g.input_bus_bits, m.input_bus_bits);
            set(
                &mut g.weight_io_bytes_per_cycle,
                m.weight_io_bytes_per_cycle,
            );
            set(&mut g.fp_pre_cycles, m.fp_pre_cycles);
            set(&mut g.fp_post_cycles, m.fp_post_cycles);
            Ok(MxuKind::CimGrid(g))
        }
    }
}

fn classify(err: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let path = err.path().to_string();
    let inner = err.into_inner();
    use serde_json::error::Category;
    match inner.classify() {
        Category::Syntax | Category::Eof | Category::Io => ConfigError::Syntax {
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        },
        Category::Data => {
            let msg = inner.to_string();
            if let Some(rest) = msg.strip_prefix("unknown field `") {
                let key = rest.split('`').next().unwrap_or_default();
                let full = if path == "." || path.is_empty() {
                    key.to_string()
                } else {
                    // the path already points at the offending key
                    path.clone()
                };
                ConfigError::UnknownKey(full)
            } else {
                ConfigError::InvalidValue {
                    field: path,
                    message: msg,
                }
            }
        }
    }
}

/// Loads a config from either a preset name or a path to a JSON document.
pub fn load_config(spec: &str) -> Result<TpuConfig, crate::Error> {
    if PRESET_NAMES.contains(&spec) {
        return Ok(builtin_preset(spec)?);
    }
    let text = std::fs::read_to_string(spec)
        .map_err(|e| crate::Error::Io(format!("cannot read config `{spec}`: {e}")))?;
    Ok(parse_config(&text)?)
}
