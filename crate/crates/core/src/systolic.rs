//! Timing of a digital weight-stationary systolic array.
//!
//! Each fold loads an `R x C` weight block by shifting it down the columns
//! (`R` cycles, not overlapped with compute), then streams the `M` input rows
//! through the skewed array and drains the partial sums.

use crate::error::{Error, Result};
use crate::workload::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GemmTile {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub precision: Precision,
}

impl GemmTile {
    pub fn new(m: u64, k: u64, n: u64) -> Self {
        GemmTile {
            m,
            k,
            n,
            precision: Precision::Int8,
        }
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }

    pub fn macs(&self) -> u64 {
        self.m * self.k * self.n
    }
}

pub fn systolic_folds(rows: u64, cols: u64, t: &GemmTile) -> u64 {
    t.k.div_ceil(rows) * t.n.div_ceil(cols)
}

/// Cycles for one tile on an `rows x cols` array.
pub fn systolic_cycles(rows: u64, cols: u64, t: &GemmTile) -> u64 {
    systolic_folds(rows, cols, t) * (2 * rows + t.m + cols - 2)
}

pub fn systolic_utilization(rows: u64, cols: u64, t: &GemmTile) -> f64 {
    t.macs() as f64 / (rows as f64 * cols as f64 * systolic_cycles(rows, cols, t) as f64)
}

pub const ORACLE_MAX_ARRAY: u64 = 32;
pub const ORACLE_MAX_DIM: u64 = 64;

/// Result of the register-level simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRun {
    pub cycles: u64,
    /// Row-major `M x N` product computed by the simulated array.
    pub output: Vec<i64>,
}

/// Register-level simulation of the array computing `a (M x K) * w (K x N)`.
pub fn systolic_simulate(
    rows: usize,
    cols: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[i64],
    w: &[i64],
) -> OracleRun {
    assert_eq!(a.len(), m * k);
    assert_eq!(w.len(), k * n);
    let mut output = vec![0i64; m * n];
    let mut cycles = 0u64;
    for k0 in (0..k).step_by(rows) {
        for n0 in (0..n).step_by(cols) {
            // weight fill: one row enters the top of every column per cycle
            let mut pe_w = vec![vec![0i64; cols]; rows];
            for step in 0..rows {
                for r in (1..rows).rev() {
                    pe_w[r] = pe_w[r - 1].clone();
                }
                let src = rows - 1 - step;
                for (c, slot) in pe_w[0].iter_mut().enumerate() {
                    let (kk, nn) = (k0 + src, n0 + c);
                    *slot = if kk < k && nn < n { w[kk * n + nn] } else { 0 };
                }
                cycles += 1;
            }
            // stream and drain
            let mut inp: Vec<Vec<Option<(usize, i64)>>> = vec![vec![None; cols]; rows];
            let mut psum: Vec<Vec<Option<(usize, i64)>>> = vec![vec![None; cols]; rows];
            let mut collected = 0usize;
            let mut t = 0usize;
            while collected < m * cols {
                let mut next_in = vec![vec![None; cols]; rows];
                let mut next_ps = vec![vec![None; cols]; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        let x = if c == 0 {
                            // row r is skewed by r cycles
                            t.checked_sub(r).filter(|&i| i < m).map(|i| {
                                let kk = k0 + r;
                                (i, if kk < k { a[i * k + kk] } else { 0 })
                            })
                        } else {
                            inp[r][c - 1]
                        };
                        next_in[r][c] = x;
                        if let Some((i, xv)) = x {
                            let above = if r == 0 {
                                0
                            } else {
                                let (ti, v) = psum[r - 1][c].expect("psum wavefront");
                                assert_eq!(ti, i, "psum and input wavefronts diverged");
                                v
                            };
                            next_ps[r][c] = Some((i, above + pe_w[r][c] * xv));
                        }
                    }
                }
                inp = next_in;
                psum = next_ps;
                cycles += 1;
                t += 1;
                for c in 0..cols {
                    if let Some((i, v)) = psum[rows - 1][c] {
                        collected += 1;
                        if n0 + c < n {
                            output[i * n + n0 + c] += v;
                        }
                    }
                }
            }
        }
    }
    OracleRun { cycles, output }
}

/// Arrays and tiles on which [`systolic_cycles`] must equal
/// [`systolic_oracle`] exactly: every array up to 4x4 and every M, K, N in
/// {1, 2, 3, 5, 8}.
pub fn oracle_grid() -> Vec<(u64, u64, GemmTile)> {
    const DIMS: [u64; 5] = [1, 2, 3, 5, 8];
    let mut out = Vec::new();
    for rows in 1..=4 {
        for cols in 1..=4 {
            for m in DIMS {
                for k in DIMS {
                    for n in DIMS {
                        out.push((rows, cols, GemmTile::new(m, k, n)));
                    }
                }
            }
        }
    }
    out
}

/// Cycle count of [`systolic_simulate`] on deterministic operands.
pub fn systolic_oracle(rows: u64, cols: u64, t: &GemmTile) -> Result<u64> {
    if rows > ORACLE_MAX_ARRAY
        || cols > ORACLE_MAX_ARRAY
        || t.m > ORACLE_MAX_DIM
        || t.k > ORACLE_MAX_DIM
        || t.n > ORACLE_MAX_DIM
    {
        return Err(Error::Precondition(format!(
            "systolic oracle limited to {ORACLE_MAX_ARRAY}x{ORACLE_MAX_ARRAY} arrays and dims <= {ORACLE_MAX_DIM}"
        )));
    }
    if rows == 0 || cols == 0 || t.m == 0 || t.k == 0 || t.n == 0 {
        return Err(Error::Precondition("dimensions must be >= 1".into()));
    }
    let (m, k, n) = (t.m as usize, t.k as usize, t.n as usize);
    let a: Vec<i64> = (0..m * k).map(|i| (i % 7) as i64 - 3).collect();
    let w: Vec<i64> = (0..k * n).map(|i| (i % 5) as i64 - 2).collect();
    Ok(systolic_simulate(rows as usize, cols as usize, m, k, n, &a, &w).cycles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_examples() {
        assert_eq!(systolic_cycles(1, 1, &GemmTile::new(1, 1, 1)), 2);
        assert_eq!(systolic_cycles(2, 2, &GemmTile::new(2, 2, 2)), 6);
        assert_eq!(systolic_cycles(128, 128, &GemmTile::new(1, 128, 128)), 383);
    }

    #[test]
    fn oracle_small() {
        assert_eq!(systolic_oracle(1, 1, &GemmTile::new(1, 1, 1)).unwrap(), 2);
        assert_eq!(systolic_oracle(2, 2, &GemmTile::new(2, 2, 2)).unwrap(), 6);
        assert!(systolic_oracle(64, 64, &GemmTile::new(1, 1, 1)).is_err());
    }

    #[test]
    fn oracle_computes_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<i64> = (0..m * k).map(|i| i as i64 + 1).collect();
        let w: Vec<i64> = (0..k * n).map(|i| 2 * i as i64 - 7).collect();
        let run = systolic_simulate(2, 3, m, k, n, &a, &w);
        for i in 0..m {
            for j in 0..n {
                let expect: i64 = (0..k).map(|kk| a[i * k + kk] * w[kk * n + j]).sum();
                assert_eq!(run.output[i * n + j], expect);
            }
        }
    }

    #[test]
    fn utilization_bounds() {
        assert_eq!(systolic_utilization(1, 1, &GemmTile::new(1, 1, 1)), 0.5);
        assert!(systolic_utilization(8, 8, &GemmTile::new(512, 512, 512)) >= 0.9);
        assert!(systolic_utilization(128, 128, &GemmTile::new(1, 128, 128)) < 0.01);
    }

    #[test]
    fn fold_additivity() {
        for m in 1..6 {
            for n in 1..=4 {
                let one = systolic_cycles(4, 4, &GemmTile::new(m, 4, n));
                let two = systolic_cycles(4, 4, &GemmTile::new(m, 8, n));
                assert_eq!(two, 2 * one);
            }
        }
    }

    #[test]
    fn scalar_array() {
        for m in 1..5u64 {
            for k in 1..4u64 {
                for n in 1..4u64 {
                    let c = systolic_cycles(1, 1, &GemmTile::new(m, k, n));
                    assert_eq!(c, k * n * (m + 1));
                }
            }
        }
    }
}
