//! Transfer timing for the HBM -> CMEM -> VMEM hierarchy, double-buffered
//! pipelines and burst coalescing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    HbmCmem,
    CmemVmem,
    VmemCompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferLeg {
    pub level: Level,
    pub bytes: u64,
    /// Bytes per cycle.
    pub bandwidth: f64,
}

/// `ceil(bytes / bandwidth) + latency`; an empty transfer costs nothing.
pub fn transfer_cycles(bytes: u64, bytes_per_cycle: f64, latency: u64) -> Result<u64> {
    if !(bytes_per_cycle > 0.0 && bytes_per_cycle.is_finite()) {
        return Err(Error::Precondition(format!(
            "transfer bandwidth must be > 0 (got {bytes_per_cycle})"
        )));
    }
    if bytes == 0 {
        return Ok(0);
    }
    Ok(ceil_div_f(bytes as f64, bytes_per_cycle) + latency)
}

pub fn leg_cycles(leg: &TransferLeg, latency: u64) -> Result<u64> {
    transfer_cycles(leg.bytes, leg.bandwidth, latency)
}

/// Ceiling of `a / b` that is robust to the division landing a hair above an
/// integer because of rounding.
pub(crate) fn ceil_div_f(a: f64, b: f64) -> u64 {
    let q = a / b;
    let r = q.round();
    if (q - r).abs() <= 1e-9 * q.max(1.0) {
        r as u64
    } else {
        q.ceil() as u64
    }
}

/// Two-stage load/compute pipeline over `n` steps.
///
/// Double-buffered: the first load is exposed, then step `i` overlaps its
/// compute with the load of step `i + 1`, and the last compute is exposed.
/// Otherwise every load and compute is serialized.
pub fn pipeline_overlap(compute: &[u64], load: &[u64], double_buffered: bool) -> Result<u64> {
    if compute.len() != load.len() {
        return Err(Error::Precondition(format!(
            "pipeline lists differ in length ({} vs {})",
            compute.len(),
            load.len()
        )));
    }
    if compute.is_empty() {
        return Err(Error::Precondition(
            "pipeline needs at least one step".into(),
        ));
    }
    if !double_buffered {
        return Ok(compute.iter().sum::<u64>() + load.iter().sum::<u64>());
    }
    let n = compute.len();
    let mut total = load[0];
    for i in 0..n {
        let next = if i + 1 < n { load[i + 1] } else { 0 };
        total += compute[i].max(next);
    }
    Ok(total)
}

/// `count` consecutive identical pipeline steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Run {
    pub count: u64,
    pub compute: u64,
    pub load: u64,
}

impl Run {
    pub fn new(count: u64, compute: u64, load: u64) -> Self {
        Run {
            count,
            compute,
            load,
        }
    }
}

/// [`pipeline_overlap`] over a sequence given as blocks, each block being a
/// list of runs repeated `reps` times. Runs with `count == 0` and blocks with
/// `reps == 0` are skipped.
pub fn pipeline_blocks(blocks: &[(u64, &[Run])], double_buffered: bool) -> u64 {
    if !double_buffered {
        return blocks
            .iter()
            .map(|(reps, runs)| {
                reps * runs
                    .iter()
                    .map(|r| r.count * (r.compute + r.load))
                    .sum::<u64>()
            })
            .sum();
    }
    let mut total = 0u64;
    let mut prev: Option<u64> = None;
    for &(reps, runs) in blocks {
        let mut live = runs.iter().filter(|r| r.count > 0);
        let Some(first) = live.next() else { continue };
        if reps == 0 {
            continue;
        }
        let mut internal = 0u64;
        let mut last = first;
        internal += (first.count - 1) * first.compute.max(first.load);
        for r in live {
            internal += last.compute.max(r.load);
            internal += (r.count - 1) * r.compute.max(r.load);
            last = r;
        }
        let first_load = first.load;
        let last_compute = last.compute;
        total += match prev {
            None => first_load,
            Some(c) => c.max(first_load),
        };
        total += internal + (reps - 1) * (last_compute.max(first_load) + internal);
        prev = Some(last_compute);
    }
    total + prev.unwrap_or(0)
}

/// Convenience for a single block of runs.
pub fn pipeline_runs(runs: &[Run], double_buffered: bool) -> u64 {
    pipeline_blocks(&[(1, runs)], double_buffered)
}

/// DRAM bytes moved for `rows` tile rows of `row_bytes` each, where rows of
/// the backing tensor are `contiguous_row_bytes` long. A tile spanning whole
/// rows is one contiguous stream; otherwise every row is padded to a burst.
pub fn coalesced_bytes(rows: u64, row_bytes: u64, contiguous_row_bytes: u64, burst: u64) -> u64 {
    let burst = burst.max(1);
    if row_bytes >= contiguous_row_bytes {
        (rows * row_bytes).div_ceil(burst) * burst
    } else {
        rows * row_bytes.div_ceil(burst) * burst
    }
}

/// Whether a working set fits at a level; double buffering halves capacity.
pub fn fits(working_set: u64, capacity: u64, double_buffered: bool) -> bool {
    let usable = if double_buffered {
        capacity / 2
    } else {
        capacity
    };
    working_set <= usable
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfers() {
        assert_eq!(transfer_cycles(0, 614.0, 0).unwrap(), 0);
        assert_eq!(transfer_cycles(614, 614.0, 0).unwrap(), 1);
        assert_eq!(transfer_cycles(615, 614.0, 3).unwrap(), 5);
        assert!(transfer_cycles(1, 0.0, 0).is_err());
        // 614 GB/s at 1.05 GHz moves a 1 MiB tile in ceil(1048576 / 584.76) cycles
        let bpc = 614e9 / 1.05e9;
        assert_eq!(transfer_cycles(1 << 20, bpc, 0).unwrap(), 1794);
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(pipeline_overlap(&[7], &[5], true).unwrap(), 12);
        assert_eq!(pipeline_overlap(&[7], &[5], false).unwrap(), 12);
        assert_eq!(pipeline_overlap(&[10, 10], &[4, 4], true).unwrap(), 24);
        assert_eq!(pipeline_overlap(&[10, 10], &[4, 4], false).unwrap(), 28);
        assert!(pipeline_overlap(&[1, 2], &[1], true).is_err());
    }

    #[test]
    fn blocks_match_flat_pipeline() {
        let a = [Run::new(3, 5, 9), Run::new(1, 2, 1)];
        let b = [Run::new(2, 8, 4)];
        let blocks: [(u64, &[Run]); 2] = [(2, &a), (3, &b)];
        let mut c = Vec::new();
        let mut l = Vec::new();
        for (reps, runs) in blocks {
            for _ in 0..reps {
                for r in runs {
                    for _ in 0..r.count {
                        c.push(r.compute);
                        l.push(r.load);
                    }
                }
            }
        }
        for db in [false, true] {
            assert_eq!(
                pipeline_blocks(&blocks, db),
                pipeline_overlap(&c, &l, db).unwrap()
            );
        }
    }

    #[test]
    fn coalescing() {
        assert_eq!(coalesced_bytes(10, 64, 128, 64), 640);
        assert_eq!(coalesced_bytes(10, 16, 128, 64), 640);
        assert_eq!(coalesced_bytes(10, 16, 16, 64), 192);
    }

    #[test]
    fn capacity_rule() {
        assert!(fits(100, 100, false));
        assert!(!fits(100, 100, true));
        assert!(fits(50, 100, true));
    }
}
