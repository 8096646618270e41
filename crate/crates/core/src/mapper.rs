//! Mapping search and evaluation.
//!
//! A GEMM is tiled twice: CMEM tiles are streamed from HBM, VMEM tiles are
//! streamed from CMEM into the MXUs. Tiles are uniform; edge tiles are costed
//! as full tiles. Independent GEMM instances (attention heads, batch entries
//! with private operands) may run concurrently in `batch_groups` groups, each
//! group splitting the output columns of a VMEM tile over its share of the
//! MXUs. Vector operators stream row chunks through VMEM to the VPU.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cim::cim_cycles;
use crate::energy::{op_energy, Activity, EnergyBreakdown, Traffic};
use crate::error::{Error, Result};
use crate::hwconfig::{MxuKind, TpuConfig};
use crate::memory::{coalesced_bytes, fits, pipeline_blocks, transfer_cycles, Run};
use crate::systolic::{systolic_cycles, GemmTile};
use crate::vpu::{vector_cycles, vector_rows};
use crate::workload::{Category, LayerGraph, OpKind, Operator, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tile3 {
    pub m: u64,
    pub k: u64,
    pub n: u64,
}

impl Tile3 {
    pub fn new(m: u64, k: u64, n: u64) -> Self {
        Tile3 { m, k, n }
    }

    /// Elements of the A, B and C tiles.
    fn footprint(&self) -> u64 {
        self.m * self.k + self.k * self.n + self.m * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Mxu,
    Vpu,
    Dma,
    Ici,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mapping {
    pub engine: Engine,
    pub transpose: bool,
    pub batch_groups: u64,
    pub cmem: Tile3,
    pub vmem: Tile3,
    pub db_cmem: bool,
    pub db_vmem: bool,
}

impl Mapping {
    /// The 1x1x1 mapping without double buffering.
    pub fn unit() -> Self {
        Mapping {
            engine: Engine::Mxu,
            transpose: false,
            batch_groups: 1,
            cmem: Tile3::new(1, 1, 1),
            vmem: Tile3::new(1, 1, 1),
            db_cmem: false,
            db_vmem: false,
        }
    }

    fn key(&self) -> (bool, u64, Tile3, Tile3, bool, bool) {
        (
            self.transpose,
            self.batch_groups,
            self.cmem,
            self.vmem,
            self.db_cmem,
            self.db_vmem,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyEnergy {
    pub cycles: u64,
    pub seconds: f64,
    pub energy: EnergyBreakdown,
    pub utilization: f64,
}

/// Everything known about one evaluated operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpResult {
    pub engine: Engine,
    pub mapping: Option<Mapping>,
    pub cost: LatencyEnergy,
    pub traffic: Traffic,
    /// max(compute bound, bandwidth bound) in cycles.
    pub lower_bound: u64,
}

/// One evaluated candidate, recorded when tracing is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub op: String,
    pub mapping: Mapping,
    pub cycles: u64,
    pub energy_j: f64,
}

// --- GEMM problem -------------------------------------------------------------

/// GEMM after folding shared-weight batches and applying the orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Problem {
    inst: u64,
    m: u64,
    k: u64,
    n: u64,
    precision: Precision,
    shared: bool,
}

impl Problem {
    fn from_op(op: &Operator) -> Option<Self> {
        let g = op.gemm_shape()?;
        let shared = matches!(
            op.kind,
            OpKind::Gemm {
                shared_weights: true,
                ..
            }
        );
        Some(Problem {
            inst: g.instances,
            m: g.m,
            k: g.k,
            n: g.n,
            precision: op.precision,
            shared,
        })
    }

    /// Activation-by-activation products may swap operand roles.
    fn can_transpose(&self) -> bool {
        !self.shared && self.m != self.n
    }

    fn oriented(&self, transpose: bool) -> Self {
        if transpose {
            Problem {
                m: self.n,
                n: self.m,
                ..*self
            }
        } else {
            *self
        }
    }

    fn e(&self) -> u64 {
        self.precision.bytes()
    }

    fn macs(&self) -> u64 {
        self.inst * self.m * self.k * self.n
    }

    fn unique_bytes(&self) -> u64 {
        let weights = if self.shared {
            self.k * self.n
        } else {
            self.inst * self.k * self.n
        };
        (self.inst * (self.m * self.k + self.m * self.n) + weights) * self.e()
    }
}

const PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Bytes moved between two levels for tile counts `[m, k, n]` and per-fetch
/// tile bytes `[a, b, c]`, for the cheapest loop order. A tile is re-fetched
/// whenever a loop it depends on, or any loop outside that one, advances.
/// Output tiles revisited across a K loop are written back and re-read.
fn order_traffic(counts: [u64; 3], bytes: [u64; 3]) -> u64 {
    const DEPS: [[bool; 3]; 3] = [
        [true, true, false],
        [false, true, true],
        [true, false, true],
    ];
    let mut best = u64::MAX;
    for perm in PERMS {
        let mut fetches = [1u64; 3];
        for (t, deps) in DEPS.iter().enumerate() {
            if let Some(p) = (0..3).rev().find(|&i| deps[perm[i]] && counts[perm[i]] > 1) {
                fetches[t] = (0..=p).map(|i| counts[perm[i]]).product();
            }
        }
        let c_tiles = counts[0] * counts[2];
        let traffic =
            fetches[0] * bytes[0] + fetches[1] * bytes[1] + (2 * fetches[2] - c_tiles) * bytes[2];
        best = best.min(traffic);
    }
    best
}

/// Search space used when picking a mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Space {
    /// Power-of-two, native-multiple and balanced tile sizes.
    Pruned,
    /// Every nested divisor tiling.
    Divisors,
}

#[derive(Debug, Clone, Copy)]
struct Eval {
    cycles: u64,
    energy: EnergyBreakdown,
    traffic: Traffic,
}

fn better(a: (u64, f64, &Mapping), b: (u64, f64, &Mapping)) -> bool {
    (a.0, a.1) < (b.0, b.1) || ((a.0, a.1) == (b.0, b.1) && a.2.key() < b.2.key())
}

fn divisors(d: u64) -> Vec<u64> {
    let mut out: Vec<u64> = (1..=d)
        .take_while(|i| i * i <= d)
        .filter(|i| d.is_multiple_of(*i))
        .collect();
    let more: Vec<u64> = out
        .iter()
        .rev()
        .map(|i| d / i)
        .filter(|&q| q * q != d)
        .collect();
    out.extend(more);
    out
}

/// Candidate tile sizes along a dimension of length `d`.
fn tile_candidates(d: u64, native: u64) -> Vec<u64> {
    let mut c = vec![d];
    let mut p = 1;
    while p <= d {
        c.push(p);
        c.push(d.div_ceil(p));
        p *= 2;
    }
    for j in 1..=4 {
        if native * j <= d {
            c.push(native * j);
        }
    }
    let mut p = native;
    while p <= d {
        c.push(p);
        p *= 2;
    }
    for j in 3..=8 {
        c.push(d.div_ceil(j));
    }
    c.sort_unstable();
    c.dedup();
    c
}

/// Candidate CMEM extents along a dimension given the VMEM extent `v`.
fn outer_candidates(d: u64, v: u64) -> Vec<u64> {
    let mut c = vec![d];
    let mut p = v;
    while p <= d {
        c.push(p);
        p *= 2;
    }
    if 3 * v <= d {
        c.push(3 * v);
    }
    for j in 2..=8 {
        let b = d.div_ceil(j);
        if b >= v {
            c.push(b);
        }
    }
    let mut p = 2;
    while p <= d {
        let b = d.div_ceil(p);
        if b >= v {
            c.push(b);
        }
        p *= 2;
    }
    c.sort_unstable();
    c.dedup();
    c
}

/// Cached engine timings and operator results for one configuration.
pub struct Simulator {
    cfg: TpuConfig,
    engine_cache: Mutex<HashMap<(u64, u64, u64, Precision), u64>>,
    op_cache: Mutex<HashMap<(OpKind, Precision), OpResult>>,
}

impl Simulator {
    pub fn new(cfg: TpuConfig) -> Self {
        Simulator {
            cfg,
            engine_cache: Mutex::new(HashMap::new()),
            op_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &TpuConfig {
        &self.cfg
    }

    /// Cycles of one MXU on an `m x k x n` tile.
    pub fn engine_cycles(&self, m: u64, k: u64, n: u64, precision: Precision) -> u64 {
        let tile = GemmTile::new(m, k, n).with_precision(precision);
        let g = match self.cfg.mxu {
            // closed form; cheaper than a cache lookup
            MxuKind::DigitalSystolic { rows, cols } => {
                return systolic_cycles(u64::from(rows), u64::from(cols), &tile)
            }
            MxuKind::CimGrid(g) => g,
        };
        let key = (m, k, n, precision);
        if let Some(&c) = self.engine_cache.lock().unwrap().get(&key) {
            return c;
        }
        let c = cim_cycles(&g, &tile);
        self.engine_cache.lock().unwrap().insert(key, c);
        c
    }

    fn native(&self) -> (u64, u64) {
        match self.cfg.mxu {
            MxuKind::DigitalSystolic { rows, cols } => (u64::from(rows), u64::from(cols)),
            MxuKind::CimGrid(g) => (
                u64::from(g.grid_rows) * u64::from(g.core_inputs),
                u64::from(g.grid_cols) * u64::from(g.core_outputs()),
            ),
        }
    }

    fn hbm_bpc(&self) -> f64 {
        self.cfg.hbm_bytes_per_cycle()
    }

    fn oci_bpc(&self) -> f64 {
        self.cfg.oci_bytes_per_cycle()
    }

    fn xfer(&self, bytes: u64, bpc: f64) -> u64 {
        transfer_cycles(bytes, bpc, self.cfg.transfer_latency_cycles).expect("validated bandwidth")
    }

    // --- GEMM evaluation ---------------------------------------------------------

    fn gemm_feasible(&self, p: &Problem, map: &Mapping) -> std::result::Result<(), String> {
        let (c, v) = (map.cmem, map.vmem);
        let e = p.e();
        if map.engine != Engine::Mxu {
            return Err("GEMMs run on the MXUs".into());
        }
        if map.transpose && !p.can_transpose() {
            return Err("operand roles of this GEMM cannot be swapped".into());
        }
        let o = p.oriented(map.transpose);
        for (vv, cc, d) in [(v.m, c.m, o.m), (v.k, c.k, o.k), (v.n, c.n, o.n)] {
            if vv == 0 || vv > cc || cc > d {
                return Err(format!(
                    "tile sizes must satisfy 1 <= vmem <= cmem <= dim ({vv}, {cc}, {d})"
                ));
            }
        }
        let bg = map.batch_groups;
        if bg == 0 || u64::from(self.cfg.mxu_count) % bg != 0 || bg > o.inst {
            return Err(format!(
                "batch_groups {bg} must divide mxu_count and not exceed the instances"
            ));
        }
        if !fits(bg * e * c.footprint(), self.cfg.cmem_bytes, map.db_cmem) {
            return Err("CMEM tile exceeds capacity".into());
        }
        if !fits(bg * e * v.footprint(), self.cfg.vmem_bytes, map.db_vmem) {
            return Err("VMEM tile exceeds capacity".into());
        }
        Ok(())
    }

    /// Cost of an already validated mapping; `p` is in the mapping's orientation.
    fn gemm_eval(&self, p: &Problem, map: &Mapping) -> Eval {
        let v = map.vmem;
        let share = u64::from(self.cfg.mxu_count) / map.batch_groups;
        let eng = self.engine_cycles(v.m, v.k, v.n.div_ceil(share), p.precision);
        self.gemm_eval_bounded(p, map, eng, u64::MAX)
            .expect("unbounded")
    }

    /// Cost of a mapping whose VMEM tile takes `eng` cycles on its MXU share,
    /// or `None` once its compute or HBM time alone exceeds `cutoff`.
    fn gemm_eval_bounded(&self, p: &Problem, map: &Mapping, eng: u64, cutoff: u64) -> Option<Eval> {
        let cfg = &self.cfg;
        let e = p.e();
        let (c, v) = (map.cmem, map.vmem);
        let bg = map.batch_groups;
        let full = p.inst / bg;
        let rem = p.inst % bg;

        let c2 = [c.m.div_ceil(v.m), c.k.div_ceil(v.k), c.n.div_ceil(v.n)];
        let it2 = c2[0] * c2[1] * c2[2];
        let c1 = [p.m.div_ceil(c.m), p.k.div_ceil(c.k), p.n.div_ceil(c.n)];
        let it1 = c1[0] * c1[1] * c1[2];
        if (full + u64::from(rem > 0)) * it1 * it2 * eng > cutoff {
            return None;
        }

        let burst = cfg.burst_bytes;
        let a_tile = coalesced_bytes(c.m, c.k * e, p.k * e, burst);
        let b_tile = coalesced_bytes(c.k, c.n * e, p.n * e, burst);
        let c_tile = coalesced_bytes(c.m, c.n * e, p.n * e, burst);
        let bytes1 = order_traffic(c1, [a_tile, b_tile, c_tile]);
        if ((bytes1 * p.inst) as f64 / self.hbm_bpc()).floor() as u64 > cutoff {
            return None;
        }
        let bytes2 = order_traffic(c2, [v.m * v.k * e, v.k * v.n * e, v.m * v.n * e]);

        let round = |r: u64| -> Run {
            let l2 = self.xfer((bytes2 * r).div_ceil(it2), self.oci_bpc());
            let t2 = pipeline_blocks(&[(1, &[Run::new(it2, eng, l2)])], map.db_vmem);
            let l1 = self.xfer((bytes1 * r).div_ceil(it1), self.hbm_bpc());
            Run::new(it1, t2, l1)
        };
        let full_run = [round(bg)];
        let rem_run = [if rem > 0 {
            round(rem)
        } else {
            Run::new(0, 0, 0)
        }];
        let cycles = pipeline_blocks(
            &[(full, &full_run[..]), (u64::from(rem > 0), &rem_run[..])],
            map.db_cmem,
        );

        let engine_bytes = v.footprint() * e + v.m * v.n * e;
        let traffic = Traffic {
            hbm_bytes: bytes1 * p.inst,
            cmem_bytes: bytes1 * p.inst + bytes2 * it1 * p.inst,
            vmem_bytes: bytes2 * it1 * p.inst + engine_bytes * it2 * it1 * p.inst,
            ici_bytes: 0,
        };
        let energy = op_energy(
            cfg,
            &Activity {
                traffic,
                macs: p.macs(),
                mxu_cycles: cycles,
                vpu_ops: 0,
            },
        );
        Some(Eval {
            cycles,
            energy,
            traffic,
        })
    }

    /// Lower bound on any mapping that uses this VMEM tile.
    fn vmem_bound(&self, p: &Problem, v: Tile3, bg: u64, eng: u64) -> u64 {
        let tiles = p.m.div_ceil(v.m) * p.k.div_ceil(v.k) * p.n.div_ceil(v.n);
        p.inst.div_ceil(bg) * tiles * eng
    }

    fn search_gemm(
        &self,
        op: &Operator,
        space: Space,
        mut trace: Option<&mut Vec<TraceEntry>>,
    ) -> Result<(Mapping, Eval)> {
        let base = Problem::from_op(op).expect("gemm");
        let cfg = &self.cfg;
        let e = base.e();
        let (native_k, native_n) = self.native();
        let mem_bound = self.xfer(base.unique_bytes(), self.hbm_bpc());

        struct Cand {
            bound: u64,
            eng: u64,
            transpose: bool,
            bg: u64,
            vmem: Tile3,
            db_vmem: bool,
        }
        let mut cands = Vec::new();
        let orientations: &[bool] = if base.can_transpose() {
            &[false, true]
        } else {
            &[false]
        };
        for &transpose in orientations {
            let p = base.oriented(transpose);
            let dims = |d: u64, native: u64| match space {
                Space::Pruned => tile_candidates(d, native),
                Space::Divisors => divisors(d),
            };
            let (cm, ck, cn) = (
                dims(p.m, native_k),
                dims(p.k, native_k),
                dims(p.n, native_n),
            );
            for bg in divisors(u64::from(cfg.mxu_count)) {
                if bg > p.inst {
                    continue;
                }
                for &vm in &cm {
                    for &vk in &ck {
                        for &vn in &cn {
                            let vmem = Tile3::new(vm, vk, vn);
                            let ws = bg * e * vmem.footprint();
                            let db_vmem = if fits(ws, cfg.vmem_bytes, true) {
                                true
                            } else if fits(ws, cfg.vmem_bytes, false) {
                                false
                            } else {
                                continue;
                            };
                            let eng = self.engine_cycles(
                                vm,
                                vk,
                                vn.div_ceil(u64::from(cfg.mxu_count) / bg),
                                p.precision,
                            );
                            let bound = self.vmem_bound(&p, vmem, bg, eng).max(mem_bound);
                            cands.push(Cand {
                                bound,
                                eng,
                                transpose,
                                bg,
                                vmem,
                                db_vmem,
                            });
                        }
                    }
                }
            }
        }
        cands.sort_by_key(|c| (c.bound, c.transpose, c.bg, c.vmem));

        let mut best: Option<(Mapping, Eval)> = None;
        for cand in &cands {
            if let Some((_, b)) = &best {
                if cand.bound > b.cycles {
                    break;
                }
            }
            let p = base.oriented(cand.transpose);
            let v = cand.vmem;
            let outer = |d: u64, vv: u64| match space {
                Space::Pruned => outer_candidates(d, vv),
                Space::Divisors => divisors(d)
                    .into_iter()
                    .filter(|c| c % vv == 0 && *c >= vv)
                    .collect(),
            };
            if space == Space::Divisors
                && (!p.m.is_multiple_of(v.m)
                    || !p.k.is_multiple_of(v.k)
                    || !p.n.is_multiple_of(v.n))
            {
                continue;
            }
            let (om, ok, on) = (outer(p.m, v.m), outer(p.k, v.k), outer(p.n, v.n));
            for &mc in &om {
                for &kc in &ok {
                    for &nc in &on {
                        let cmem = Tile3::new(mc, kc, nc);
                        let ws = cand.bg * e * cmem.footprint();
                        let db_cmem = if fits(ws, cfg.cmem_bytes, true) {
                            true
                        } else if fits(ws, cfg.cmem_bytes, false) {
                            false
                        } else {
                            continue;
                        };
                        let map = Mapping {
                            engine: Engine::Mxu,
                            transpose: cand.transpose,
                            batch_groups: cand.bg,
                            cmem,
                            vmem: v,
                            db_cmem,
                            db_vmem: cand.db_vmem,
                        };
                        let cutoff = match (&best, trace.is_some()) {
                            (Some((_, b)), false) => b.cycles,
                            _ => u64::MAX,
                        };
                        let Some(ev) = self.gemm_eval_bounded(&p, &map, cand.eng, cutoff) else {
                            continue;
                        };
                        if let Some(t) = trace.as_deref_mut() {
                            t.push(TraceEntry {
                                op: op.name.clone(),
                                mapping: map,
                                cycles: ev.cycles,
                                energy_j: ev.energy.total(),
                            });
                        }
                        let replace = match &best {
                            None => true,
                            Some((bm, b)) => better(
                                (ev.cycles, ev.energy.total(), &map),
                                (b.cycles, b.energy.total(), bm),
                            ),
                        };
                        if replace {
                            best = Some((map, ev));
                        }
                    }
                }
            }
        }
        best.ok_or_else(|| Error::Infeasible {
            op: op.name.clone(),
            reason: format!(
                "no tiling fits VMEM ({} B) and CMEM ({} B)",
                cfg.vmem_bytes, cfg.cmem_bytes
            ),
        })
    }

    // --- vector and transfer operators ---------------------------------------------

    fn vector_eval(&self, op: &Operator, chunk: u64, db: bool) -> Result<Eval> {
        let cfg = &self.cfg;
        let (rows, cols) = vector_rows(&op.kind).expect("vector op");
        let e = op.precision.bytes();
        let bytes = op.bytes();
        let row_bytes = 2 * cols * e;
        let chunk_cost = |r: u64| -> Result<Run> {
            let b = r * row_bytes;
            let l = self
                .xfer(b, self.hbm_bpc())
                .max(self.xfer(b, self.oci_bpc()));
            Ok(Run::new(1, vector_cycles(&cfg.vpu, &op.kind, r)?, l))
        };
        let full = [chunk_cost(chunk)?];
        let rem_rows = rows % chunk;
        let rem = [if rem_rows > 0 {
            chunk_cost(rem_rows)?
        } else {
            Run::new(0, 0, 0)
        }];
        let params = self.xfer(bytes.weight, self.hbm_bpc());
        let cycles = params
            + pipeline_blocks(
                &[
                    (rows / chunk, &full[..]),
                    (u64::from(rem_rows > 0), &rem[..]),
                ],
                db,
            );
        let moved = bytes.input + bytes.output;
        let traffic = Traffic {
            hbm_bytes: moved + bytes.weight,
            cmem_bytes: 2 * moved + bytes.weight,
            vmem_bytes: 2 * moved + bytes.weight,
            ici_bytes: 0,
        };
        let energy = op_energy(
            cfg,
            &Activity {
                traffic,
                macs: 0,
                mxu_cycles: 0,
                vpu_ops: op.flops(),
            },
        );
        Ok(Eval {
            cycles,
            energy,
            traffic,
        })
    }

    fn search_vector(&self, op: &Operator) -> Result<(Mapping, Eval)> {
        let cfg = &self.cfg;
        let (rows, cols) = vector_rows(&op.kind).expect("vector op");
        let e = op.precision.bytes();
        let row_bytes = 2 * cols * e;
        let params = 2 * cols * e * u64::from(matches!(op.kind, OpKind::LayerNorm { .. }));
        let lanes = u64::from(cfg.vpu.lanes);
        let mut chunks = tile_candidates(rows, lanes);
        for db in [true, false] {
            let usable = if db {
                cfg.vmem_bytes / 2
            } else {
                cfg.vmem_bytes
            };
            if usable > params {
                let most = ((usable - params) / row_bytes).min(rows);
                if most >= 1 {
                    chunks.push(most);
                    if most >= lanes {
                        chunks.push(most / lanes * lanes);
                    }
                }
            }
        }
        chunks.sort_unstable();
        chunks.dedup();
        let mut best: Option<(Mapping, Eval)> = None;
        for &chunk in &chunks {
            let ws = chunk * row_bytes + params;
            let db = if fits(ws, cfg.vmem_bytes, true) {
                true
            } else if fits(ws, cfg.vmem_bytes, false) {
                false
            } else {
                continue;
            };
            let ev = self.vector_eval(op, chunk, db)?;
            let tile = Tile3::new(chunk, cols, 1);
            let map = Mapping {
                engine: Engine::Vpu,
                transpose: false,
                batch_groups: 1,
                cmem: tile,
                vmem: tile,
                db_cmem: db,
                db_vmem: db,
            };
            if best.as_ref().is_none_or(|(_, b)| ev.cycles < b.cycles) {
                best = Some((map, ev));
            }
        }
        best.ok_or_else(|| Error::Infeasible {
            op: op.name.clone(),
            reason: format!("one row of {cols} elements does not fit VMEM"),
        })
    }

    fn transfer_eval(&self, op: &Operator) -> Result<(Engine, Eval)> {
        let cfg = &self.cfg;
        let (engine, cycles, traffic) = match op.kind {
            OpKind::KvCacheUpdate { bytes } => (
                Engine::Dma,
                self.xfer(bytes, self.hbm_bpc()),
                Traffic {
                    hbm_bytes: bytes,
                    cmem_bytes: bytes,
                    vmem_bytes: bytes,
                    ici_bytes: 0,
                },
            ),
            OpKind::AllReduce { bytes, group_size } => {
                let sent = ring_bytes(bytes, group_size);
                let cycles = if group_size < 2 {
                    0
                } else {
                    if cfg.ici_links == 0 {
                        return Err(Error::Infeasible {
                            op: op.name.clone(),
                            reason: "all-reduce needs at least one ICI link".into(),
                        });
                    }
                    allreduce_cycles(
                        bytes,
                        group_size,
                        cfg.ici_link_bytes_per_cycle(),
                        cfg.ici_links,
                    )?
                    .ceil() as u64
                };
                (
                    Engine::Ici,
                    cycles,
                    Traffic {
                        hbm_bytes: 0,
                        cmem_bytes: 0,
                        vmem_bytes: 0,
                        ici_bytes: sent,
                    },
                )
            }
            OpKind::PointToPoint { bytes } => {
                if cfg.ici_links == 0 {
                    return Err(Error::Infeasible {
                        op: op.name.clone(),
                        reason: "point-to-point transfer needs an ICI link".into(),
                    });
                }
                (
                    Engine::Ici,
                    self.xfer(bytes, cfg.ici_link_bytes_per_cycle()),
                    Traffic {
                        hbm_bytes: 0,
                        cmem_bytes: 0,
                        vmem_bytes: 0,
                        ici_bytes: bytes,
                    },
                )
            }
            _ => unreachable!("not a transfer operator"),
        };
        let energy = op_energy(
            cfg,
            &Activity {
                traffic,
                ..Activity::default()
            },
        );
        Ok((
            engine,
            Eval {
                cycles,
                energy,
                traffic,
            },
        ))
    }

    // --- public API ----------------------------------------------------------------

    /// max(compute bound, bandwidth bound) for an operator, in cycles.
    pub fn lower_bound(&self, op: &Operator) -> u64 {
        let cfg = &self.cfg;
        match op.kind {
            OpKind::Gemm { .. } => {
                let p = Problem::from_op(op).expect("gemm");
                let compute = (p.macs() as f64 / cfg.peak_macs_total()).ceil() as u64;
                compute.max(self.xfer(p.unique_bytes(), self.hbm_bpc()))
            }
            OpKind::Softmax { .. }
            | OpKind::LayerNorm { .. }
            | OpKind::Gelu { .. }
            | OpKind::Elementwise { .. } => {
                let (rows, cols) = vector_rows(&op.kind).expect("vector");
                let compute = (rows * cols).div_ceil(u64::from(cfg.vpu.lanes));
                let b = op.bytes();
                let moved = b.input + b.output;
                // chunk transfers and parameter loads are separate transfers
                let memory = self.xfer(moved, self.hbm_bpc()) + self.xfer(b.weight, self.hbm_bpc());
                compute.max(memory)
            }
            _ => self.transfer_eval(op).map(|(_, ev)| ev.cycles).unwrap_or(0),
        }
    }

    fn finish(
        &self,
        op: &Operator,
        engine: Engine,
        mapping: Option<Mapping>,
        ev: Eval,
    ) -> OpResult {
        let cfg = &self.cfg;
        let lower_bound = self.lower_bound(op);
        let utilization = if ev.cycles == 0 {
            1.0
        } else {
            match engine {
                Engine::Mxu => op.macs() as f64 / (ev.cycles as f64 * cfg.peak_macs_total()),
                Engine::Vpu => {
                    let (rows, cols) = vector_rows(&op.kind).expect("vector");
                    (rows * cols) as f64 / (ev.cycles as f64 * f64::from(cfg.vpu.lanes))
                }
                Engine::Dma | Engine::Ici => (lower_bound as f64 / ev.cycles as f64).min(1.0),
            }
        };
        OpResult {
            engine,
            mapping,
            cost: LatencyEnergy {
                cycles: ev.cycles,
                seconds: cfg.seconds(ev.cycles),
                energy: ev.energy,
                utilization,
            },
            traffic: ev.traffic,
            lower_bound,
        }
    }

    /// Best mapping of one operator (cached by shape).
    pub fn evaluate_op(&self, op: &Operator) -> Result<OpResult> {
        op.validate()?;
        let key = (op.kind, op.precision);
        if let Some(r) = self.op_cache.lock().unwrap().get(&key) {
            return Ok(r.clone());
        }
        let r = self.evaluate_op_uncached(op, None)?;
        self.op_cache.lock().unwrap().insert(key, r.clone());
        Ok(r)
    }

    /// Like [`Simulator::evaluate_op`], recording every GEMM candidate costed.
    pub fn evaluate_op_traced(
        &self,
        op: &Operator,
        trace: &mut Vec<TraceEntry>,
    ) -> Result<OpResult> {
        op.validate()?;
        self.evaluate_op_uncached(op, Some(trace))
    }

    fn evaluate_op_uncached(
        &self,
        op: &Operator,
        trace: Option<&mut Vec<TraceEntry>>,
    ) -> Result<OpResult> {
        if op.is_gemm() {
            let (map, ev) = self.search_gemm(op, Space::Pruned, trace)?;
            Ok(self.finish(op, Engine::Mxu, Some(map), ev))
        } else if op.is_vector() {
            let (map, ev) = self.search_vector(op)?;
            Ok(self.finish(op, Engine::Vpu, Some(map), ev))
        } else {
            let (engine, ev) = self.transfer_eval(op)?;
            Ok(self.finish(op, engine, None, ev))
        }
    }

    /// Exhaustive search over nested divisor tilings.
    pub fn brute_force_best(&self, op: &Operator) -> Result<(Mapping, LatencyEnergy)> {
        op.validate()?;
        let p = Problem::from_op(op)
            .ok_or_else(|| Error::Precondition("brute force search applies to GEMMs".into()))?;
        if p.m.max(p.k).max(p.n) > BRUTE_FORCE_MAX_DIM {
            return Err(Error::Precondition(format!(
                "brute force search limited to dims <= {BRUTE_FORCE_MAX_DIM}"
            )));
        }
        let (map, ev) = self.search_gemm(op, Space::Divisors, None)?;
        let r = self.finish(op, Engine::Mxu, Some(map), ev);
        Ok((map, r.cost))
    }

    /// Like [`Simulator::evaluate_op`] for a tiled operator, without touching
    /// the operator cache.
    pub fn best_mapping(&self, op: &Operator) -> Result<(Mapping, LatencyEnergy)> {
        op.validate()?;
        let r = self.evaluate_op_uncached(op, None)?;
        let map = r.mapping.ok_or_else(|| {
            Error::Precondition(format!("operator `{}` has no tiling mapping", op.name))
        })?;
        Ok((map, r.cost))
    }

    /// Cost of a caller-chosen mapping.
    pub fn evaluate_mapping(&self, op: &Operator, map: &Mapping) -> Result<OpResult> {
        op.validate()?;
        if op.is_gemm() {
            let p = Problem::from_op(op).expect("gemm");
            self.gemm_feasible(&p, map)
                .map_err(|reason| Error::Infeasible {
                    op: op.name.clone(),
                    reason,
                })?;
            let ev = self.gemm_eval(&p.oriented(map.transpose), map);
            Ok(self.finish(op, Engine::Mxu, Some(*map), ev))
        } else if op.is_vector() {
            let (rows, cols) = vector_rows(&op.kind).expect("vector");
            let e = op.precision.bytes();
            let params = 2 * cols * e * u64::from(matches!(op.kind, OpKind::LayerNorm { .. }));
            let chunk = map.vmem.m;
            if map.engine != Engine::Vpu || chunk == 0 || chunk > rows {
                return Err(Error::Infeasible {
                    op: op.name.clone(),
                    reason: "vector mappings run on the VPU with 1 <= chunk rows <= rows".into(),
                });
            }
            if !fits(
                chunk * 2 * cols * e + params,
                self.cfg.vmem_bytes,
                map.db_vmem,
            ) {
                return Err(Error::Infeasible {
                    op: op.name.clone(),
                    reason: "chunk exceeds VMEM".into(),
                });
            }
            let ev = self.vector_eval(op, chunk, map.db_vmem)?;
            Ok(self.finish(op, Engine::Vpu, Some(*map), ev))
        } else {
            Err(Error::Precondition(format!(
                "operator `{}` has no tiling mapping",
                op.name
            )))
        }
    }

    /// Every mapping the pruned search may consider for a GEMM.
    pub fn enumerate_mappings(&self, op: &Operator) -> Result<Vec<Mapping>> {
        op.validate()?;
        let base = Problem::from_op(op)
            .ok_or_else(|| Error::Precondition("mapspace enumeration applies to GEMMs".into()))?;
        let cfg = &self.cfg;
        let e = base.e();
        let (native_k, native_n) = self.native();
        let mut out = Vec::new();
        let orientations: &[bool] = if base.can_transpose() {
            &[false, true]
        } else {
            &[false]
        };
        for &transpose in orientations {
            let p = base.oriented(transpose);
            for bg in divisors(u64::from(cfg.mxu_count))
                .into_iter()
                .filter(|&b| b <= p.inst)
            {
                for vm in tile_candidates(p.m, native_k) {
                    for vk in tile_candidates(p.k, native_k) {
                        for vn in tile_candidates(p.n, native_n) {
                            let vmem = Tile3::new(vm, vk, vn);
                            let vws = bg * e * vmem.footprint();
                            let Some(db_vmem) = db_choice(vws, cfg.vmem_bytes) else {
                                continue;
                            };
                            for mc in outer_candidates(p.m, vm) {
                                for kc in outer_candidates(p.k, vk) {
                                    for nc in outer_candidates(p.n, vn) {
                                        let cmem = Tile3::new(mc, kc, nc);
                                        let cws = bg * e * cmem.footprint();
                                        let Some(db_cmem) = db_choice(cws, cfg.cmem_bytes) else {
                                            continue;
                                        };
                                        out.push(Mapping {
                                            engine: Engine::Mxu,
                                            transpose,
                                            batch_groups: bg,
                                            cmem,
                                            vmem,
                                            db_cmem,
                                            db_vmem,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Infeasible {
                op: op.name.clone(),
                reason: "no tiling fits the memory hierarchy".into(),
            });
        }
        Ok(out)
    }

    /// Evaluates every operator and schedules them one after another in
    /// dependency order.
    pub fn evaluate_graph(&self, g: &LayerGraph) -> Result<LayerReport> {
        g.validate()?;
        let order = g.topo_order()?;
        let results: Vec<Result<OpResult>> = order
            .par_iter()
            .map(|&i| self.evaluate_op(&g.ops[i]))
            .collect();
        let mut ops = Vec::with_capacity(order.len());
        for (&i, r) in order.iter().zip(results) {
            let op = &g.ops[i];
            ops.push(OpReport {
                name: op.name.clone(),
                category: op.category,
                kind: op.kind,
                precision: op.precision,
                flops: op.flops(),
                result: r?,
            });
        }
        Ok(LayerReport::assemble(&g.name, ops, &self.cfg))
    }
}

pub const BRUTE_FORCE_MAX_DIM: u64 = 256;

fn db_choice(ws: u64, cap: u64) -> Option<bool> {
    if fits(ws, cap, true) {
        Some(true)
    } else if fits(ws, cap, false) {
        Some(false)
    } else {
        None
    }
}

/// Bytes each device sends in a ring all-reduce.
pub fn ring_bytes(bytes: u64, n: u64) -> u64 {
    if n < 2 {
        return 0;
    }
    (2 * (n - 1) * bytes).div_ceil(n)
}

/// Ring all-reduce time `2 (n - 1) / n * bytes / (links * link_bw)`.
pub fn allreduce_cycles(bytes: u64, n: u64, link_bytes_per_cycle: f64, links: u32) -> Result<f64> {
    if n < 2 {
        return Err(Error::Precondition(
            "all-reduce needs a group of at least 2".into(),
        ));
    }
    if links == 0 || link_bytes_per_cycle.is_nan() || link_bytes_per_cycle <= 0.0 {
        return Err(Error::Precondition("all-reduce needs ICI bandwidth".into()));
    }
    Ok(2.0 * (n - 1) as f64 / n as f64 * bytes as f64 / (f64::from(links) * link_bytes_per_cycle))
}

// --- reports ------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub name: String,
    pub category: Category,
    pub kind: OpKind,
    pub precision: Precision,
    pub flops: u64,
    pub result: OpResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: Category,
    pub cycles: u64,
    pub share: f64,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub ops: Vec<OpReport>,
    pub categories: Vec<CategoryShare>,
    pub total: LatencyEnergy,
    pub macs: u64,
    pub flops: u64,
}

impl LayerReport {
    fn assemble(name: &str, ops: Vec<OpReport>, cfg: &TpuConfig) -> Self {
        let cycles: u64 = ops.iter().map(|o| o.result.cost.cycles).sum();
        let mut energy = EnergyBreakdown::default();
        for o in &ops {
            energy += o.result.cost.energy;
        }
        let macs: u64 = ops
            .iter()
            .filter(|o| o.result.engine == Engine::Mxu)
            .map(|o| match o.kind {
                OpKind::Gemm { batch, m, k, n, .. } => batch * m * k * n,
                _ => 0,
            })
            .sum();
        let flops = ops.iter().map(|o| o.flops).sum();
        let mut categories = Vec::new();
        for cat in Category::ALL {
            let mine: Vec<&OpReport> = ops.iter().filter(|o| o.category == cat).collect();
            if mine.is_empty() {
                continue;
            }
            let c: u64 = mine.iter().map(|o| o.result.cost.cycles).sum();
            let mut e = EnergyBreakdown::default();
            for o in &mine {
                e += o.result.cost.energy;
            }
            categories.push(CategoryShare {
                category: cat,
                cycles: c,
                share: if cycles == 0 {
                    0.0
                } else {
                    c as f64 / cycles as f64
                },
                energy: e,
            });
        }
        let utilization = if cycles == 0 {
            0.0
        } else {
            macs as f64 / (cycles as f64 * cfg.peak_macs_total())
        };
        LayerReport {
            name: name.to_string(),
            ops,
            categories,
            total: LatencyEnergy {
                cycles,
                seconds: cfg.seconds(cycles),
                energy,
                utilization,
            },
            macs,
            flops,
        }
    }

    pub fn share(&self, cat: Category) -> f64 {
        self.categories
            .iter()
            .find(|c| c.category == cat)
            .map_or(0.0, |c| c.share)
    }

    pub fn category_cycles(&self, cat: Category) -> u64 {
        self.categories
            .iter()
            .find(|c| c.category == cat)
            .map_or(0, |c| c.cycles)
    }

    /// Share of layer cycles spent in softmax operators.
    pub fn softmax_share(&self) -> f64 {
        let c: u64 = self
            .ops
            .iter()
            .filter(|o| matches!(o.kind, OpKind::Softmax { .. }))
            .map(|o| o.result.cost.cycles)
            .sum();
        c as f64 / self.total.cycles as f64
    }

    pub fn op(&self, name: &str) -> Option<&OpReport> {
        self.ops.iter().find(|o| o.name == name)
    }

    /// Cycles of the QKV, projection and FFN GEMMs over the layer.
    pub fn weight_gemm_share(&self) -> f64 {
        let c: u64 = self
            .ops
            .iter()
            .filter(|o| o.category.is_weight_gemm() && o.result.engine == Engine::Mxu)
            .map(|o| o.result.cost.cycles)
            .sum();
        c as f64 / self.total.cycles as f64
    }
}

// --- free-function API ----------------------------------------------------------------

pub fn enumerate_mappings(op: &Operator, cfg: &TpuConfig) -> Result<Vec<Mapping>> {
    Simulator::new(cfg.clone()).enumerate_mappings(op)
}

pub fn evaluate_mapping(op: &Operator, map: &Mapping, cfg: &TpuConfig) -> Result<LatencyEnergy> {
    Simulator::new(cfg.clone())
        .evaluate_mapping(op, map)
        .map(|r| r.cost)
}

pub fn best_mapping(op: &Operator, cfg: &TpuConfig) -> Result<(Mapping, LatencyEnergy)> {
    Simulator::new(cfg.clone()).best_mapping(op)
}

pub fn brute_force_best(op: &Operator, cfg: &TpuConfig) -> Result<(Mapping, LatencyEnergy)> {
    Simulator::new(cfg.clone()).brute_force_best(op)
}

pub fn evaluate_graph(g: &LayerGraph, cfg: &TpuConfig) -> Result<LayerReport> {
    Simulator::new(cfg.clone()).evaluate_graph(g)
}
