//! CSV and plain-text views of the JSON reports.

use std::fmt::Write as _;

use cimtpu_core::dse::SweepRow;
use cimtpu_core::{MxuKind, TpuConfig};

use crate::commands::{Failure, SimulateReport, SweepReport};

pub fn mxu_shape(cfg: &TpuConfig) -> (&'static str, String) {
    match cfg.mxu {
        MxuKind::DigitalSystolic { rows, cols } => ("digital", format!("{rows}x{cols}")),
        MxuKind::CimGrid(g) => ("cim", format!("{}x{}", g.grid_rows, g.grid_cols)),
    }
}

fn lower<T: std::fmt::Debug>(e: T) -> String {
    format!("{e:?}").to_lowercase()
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4e}"))
}

pub fn simulate_csv(r: &SimulateReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "op",
        "category",
        "engine",
        "cycles",
        "seconds",
        "utilization",
        "energy_j",
        "mxu_energy_j",
        "hbm_bytes",
    ])
    .expect("in-memory csv");
    for o in &r.layer.ops {
        let c = &o.result.cost;
        w.write_record([
            o.name.clone(),
            o.category.as_str().into(),
            lower(o.result.engine),
            c.cycles.to_string(),
            c.seconds.to_string(),
            c.utilization.to_string(),
            c.energy.total().to_string(),
            c.energy.mxu_j.to_string(),
            o.result.traffic.hbm_bytes.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

pub fn simulate_text(cfg: &TpuConfig, r: &SimulateReport) -> String {
    let (kind, dims) = mxu_shape(cfg);
    let w = &r.workload;
    let p = &w.params;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "config    {} ({kind} {dims}, {} MXUs, {:.0} MACs/cycle)",
        cfg.name,
        cfg.mxu_count,
        cfg.peak_macs_total()
    );
    let _ = writeln!(
        s,
        "workload  {} {}, batch {}, seq_in {}, out_len {}, decode_pos {}, {}, tp {} pp {} microbatches {}",
        w.model.name,
        lower(w.stage),
        p.batch,
        p.seq_in,
        p.out_len,
        p.decode_pos,
        lower(p.precision),
        w.plan.tp_degree,
        w.plan.pp_stages,
        w.plan.microbatches
    );
    let l = &r.layer;
    let _ = writeln!(s, "\nlayer {} per device", l.name);
    let _ = writeln!(
        s,
        "{:<18} {:>14} {:>8} {:>12}",
        "category", "cycles", "share", "energy_j"
    );
    for c in &l.categories {
        let _ = writeln!(
            s,
            "{:<18} {:>14} {:>7.1}% {:>12.4e}",
            c.category.as_str(),
            c.cycles,
            c.share * 100.0,
            c.energy.total()
        );
    }
    let _ = writeln!(
        s,
        "\n{:<22} {:<5} {:>14} {:>6} {:>12}",
        "operator", "eng", "cycles", "util", "energy_j"
    );
    for o in &l.ops {
        let c = &o.result.cost;
        let _ = writeln!(
            s,
            "{:<22} {:<5} {:>14} {:>5.1}% {:>12.4e}",
            o.name,
            lower(o.result.engine),
            c.cycles,
            c.utilization * 100.0,
            c.energy.total()
        );
    }
    let _ = writeln!(
        s,
        "{:<22} {:<5} {:>14} {:>6} {:>12.4e}   ({:.4e} s)",
        "total",
        "",
        l.total.cycles,
        "",
        l.total.energy.total(),
        l.total.seconds
    );
    if let Some(e) = &r.end_to_end {
        let _ = writeln!(s, "\nend to end");
        let _ = writeln!(
            s,
            "  prefill   {:.4e} s  {:.4e} J",
            e.prefill.seconds,
            e.prefill.energy.total()
        );
        let _ = writeln!(
            s,
            "  decode    {:.4e} s  {:.4e} J",
            e.decode.seconds,
            e.decode.energy.total()
        );
        let _ = writeln!(s, "  latency   {:.4e} s", e.latency_s);
        let _ = writeln!(s, "  throughput {:.4} per s", e.throughput);
        let _ = writeln!(
            s,
            "  MXU energy {:.4e} J of {:.4e} J",
            e.energy.mxu_j,
            e.energy.total()
        );
    }
    if !r.assumption_flags.is_empty() {
        let _ = writeln!(s, "\nassumptions");
        for f in &r.assumption_flags {
            let _ = writeln!(s, "  {f}");
        }
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String, Failure> {
    let mut buf = Vec::new();
    cimtpu_core::dse::write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("utf-8"))
}

pub fn sweep_text(r: &SweepReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:<8} {:>6} {:>4} {:>10} {:>12} {:>12} {:>12}  flags",
        "config", "kind", "dims", "mxus", "peak_macs", "latency_s", "mxu_energy_j", "total_j"
    );
    for row in &r.rows {
        let mut flags = Vec::new();
        if r.pareto_front.contains(&row.name) {
            flags.push("pareto".to_string());
        }
        if let Some(e) = &row.error {
            flags.push(format!("infeasible: {e}"));
        }
        let _ = writeln!(
            s,
            "{:<18} {:<8} {:>6} {:>4} {:>10.0} {:>12} {:>12} {:>12}  {}",
            row.name,
            row.kind,
            row.dims,
            row.mxu_count,
            row.peak_macs_total,
            opt(row.latency_s),
            opt(row.mxu_energy_j),
            opt(row.total_energy_j),
            flags.join(", ")
        );
    }
    if let Some(b) = &r.baseline {
        let _ = writeln!(s, "\nrelative to {b}");
        let _ = writeln!(
            s,
            "{:<18} {:>10} {:>14}",
            "config", "speedup", "mxu_energy_cut"
        );
        for q in &r.ratios {
            let f = |x: Option<f64>| x.map_or_else(|| "-".into(), |v| format!("{v:.2}x"));
            let _ = writeln!(
                s,
                "{:<18} {:>10} {:>14}",
                q.name,
                f(q.speedup),
                f(q.mxu_energy_reduction)
            );
        }
    }
    s
}
