//! Activity-based energy accounting.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwconfig::TpuConfig;
use crate::mapper::Simulator;
use crate::workload::LayerGraph;

/// Joules per component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub mxu_j: f64,
    pub vpu_j: f64,
    pub vmem_j: f64,
    pub cmem_j: f64,
    pub hbm_j: f64,
    pub ici_j: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.mxu_j + self.vpu_j + self.vmem_j + self.cmem_j + self.hbm_j + self.ici_j
    }

    pub fn scaled(&self, s: f64) -> Self {
        EnergyBreakdown {
            mxu_j: self.mxu_j * s,
            vpu_j: self.vpu_j * s,
            vmem_j: self.vmem_j * s,
            cmem_j: self.cmem_j * s,
            hbm_j: self.hbm_j * s,
            ici_j: self.ici_j * s,
        }
    }

    pub fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("mxu", self.mxu_j),
            ("vpu", self.vpu_j),
            ("vmem", self.vmem_j),
            ("cmem", self.cmem_j),
            ("hbm", self.hbm_j),
            ("ici", self.ici_j),
        ]
    }
}

impl Add for EnergyBreakdown {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for EnergyBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        self.mxu_j += rhs.mxu_j;
        self.vpu_j += rhs.vpu_j;
        self.vmem_j += rhs.vmem_j;
        self.cmem_j += rhs.cmem_j;
        self.hbm_j += rhs.hbm_j;
        self.ici_j += rhs.ici_j;
    }
}

/// Bytes moved per level by one operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Traffic {
    pub hbm_bytes: u64,
    pub cmem_bytes: u64,
    pub vmem_bytes: u64,
    pub ici_bytes: u64,
}

/// Activity counts of one operator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Activity {
    pub traffic: Traffic,
    /// MACs executed on the MXUs.
    pub macs: u64,
    /// Cycles the MXUs are held by the operator (0 for non-MXU operators).
    pub mxu_cycles: u64,
    /// Lane operations executed on the VPU.
    pub vpu_ops: u64,
}

/// Energy of one operator. MXU energy charges every useful MAC at full cost
/// and every idle MAC slot of the allocated MXUs at `mxu_idle_factor` of it.
pub fn op_energy(cfg: &TpuConfig, a: &Activity) -> EnergyBreakdown {
    let e = &cfg.energy;
    let mac = cfg.mac_energy();
    let idle_slots = if a.mxu_cycles > 0 {
        (a.mxu_cycles as f64 * cfg.peak_macs_total() - a.macs as f64).max(0.0)
    } else {
        0.0
    };
    EnergyBreakdown {
        mxu_j: mac * (a.macs as f64 + e.mxu_idle_factor * idle_slots),
        vpu_j: a.vpu_ops as f64 * e.vpu_op_energy,
        vmem_j: a.traffic.vmem_bytes as f64 * e.vmem_energy,
        cmem_j: a.traffic.cmem_bytes as f64 * e.cmem_energy,
        hbm_j: a.traffic.hbm_bytes as f64 * e.hbm_energy,
        ici_j: a.traffic.ici_bytes as f64 * e.ici_energy,
    }
}

/// MXU energy of a layer under `a` divided by that under `b`, each with its
/// best mappings.
pub fn mxu_energy_ratio(g: &LayerGraph, a: &TpuConfig, b: &TpuConfig) -> Result<f64> {
    let ea = Simulator::new(a.clone())
        .evaluate_graph(g)?
        .total
        .energy
        .mxu_j;
    let eb = Simulator::new(b.clone())
        .evaluate_graph(g)?
        .total
        .energy
        .mxu_j;
    if eb <= 0.0 {
        return Err(Error::Precondition(format!(
            "`{}` spends no MXU energy on `{}`",
            b.name, g.name
        )));
    }
    Ok(ea / eb)
}
