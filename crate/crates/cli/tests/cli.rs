use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cimtpu(args: &[&str]) -> Output {
    cimtpu_env(args, &[])
}

fn cimtpu_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cimtpu"));
    cmd.args(args).env_remove("CIMTPU_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json stdout")
}

fn assert_schema(name: &str, doc: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("schema")
        .join(name);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator
        .iter_errors(doc)
        .map(|e| format!("{e} at {}", e.instance_path()))
        .collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}");
}

const PREFILL: &[&str] = &[
    "simulate",
    "--config",
    "tpuv4i-baseline",
    "--model",
    "gpt3-30b",
    "--stage",
    "prefill",
    "--batch",
    "8",
    "--seq-in",
    "1024",
];

#[test]
fn prefill_report_has_category_breakdown() {
    let doc = json(&cimtpu(PREFILL));
    assert_schema("simulate-report.schema.json", &doc);
    let cats: Vec<&str> = doc["layer"]["categories"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["category"].as_str().unwrap())
        .collect();
    for c in ["qkv", "attention", "projection", "ffn"] {
        assert!(cats.contains(&c), "{c} missing from {cats:?}");
    }
    assert_eq!(doc["config"]["hardware"]["name"], "tpuv4i-baseline");
    assert!(!doc["assumption_flags"].as_array().unwrap().is_empty());
    assert!(doc.get("end_to_end").is_none());
    assert!(doc.get("generated_at_unix_s").is_none());
}

#[test]
fn missing_model_is_a_usage_error() {
    let o = cimtpu(&[
        "simulate",
        "--config",
        "tpuv4i-baseline",
        "--stage",
        "prefill",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--model"));
    assert!(o.stdout.is_empty());
}

#[test]
fn bad_values_are_usage_errors() {
    for args in [
        &[
            "simulate",
            "--config",
            "no-such-preset",
            "--model",
            "gpt3-30b",
        ][..],
        &[
            "simulate", "--config", "design-a", "--model", "gpt3-30b", "--tp", "3",
        ],
        &[
            "simulate",
            "--config",
            "design-a",
            "--model",
            "gpt3-30b",
            "--precision",
            "fp4",
        ],
        &[
            "simulate", "--config", "design-a", "--model", "dit-xl-2", "--stage", "prefill",
        ],
        &["sweep", "--model", "gpt3-30b"],
        &[
            "sweep",
            "--table-v",
            "--model",
            "gpt3-30b",
            "--stage",
            "decode",
            "--baseline",
            "nope",
        ],
    ] {
        assert_eq!(code(&cimtpu(args)), 2, "{args:?}");
    }
    let o = cimtpu_env(&["presets"], &[("CIMTPU_THREADS", "zero")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn single_decode_step() {
    let doc = json(&cimtpu(&[
        "simulate",
        "--config",
        "cim-16x8-x4",
        "--model",
        "gpt3-30b",
        "--stage",
        "decode",
        "--decode-pos",
        "256",
    ]));
    assert_schema("simulate-report.schema.json", &doc);
    assert_eq!(doc["workload"]["stage"], "decode");
    assert_eq!(doc["workload"]["params"]["decode_pos"], 256);
    assert!(doc["layer"]["name"].as_str().unwrap().contains("decode"));
    assert!(doc.get("end_to_end").is_none());
}

#[test]
fn end_to_end_report_validates() {
    let doc = json(&cimtpu(&[
        "simulate",
        "--config",
        "design-a",
        "--model",
        "gpt3-30b",
        "--seq-in",
        "128",
        "--out-len",
        "8",
        "--tp",
        "2",
        "--stamp",
    ]));
    assert_schema("simulate-report.schema.json", &doc);
    let e = &doc["end_to_end"];
    assert!(e["latency_s"].as_f64().unwrap() > 0.0);
    assert_eq!(e["plan"]["tp_degree"], 2);
    assert!(doc["generated_at_unix_s"].as_u64().is_some());
}

#[test]
fn capacity_overflow_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small-hbm.json");
    let mut cfg = cimtpu_core::builtin_preset("design-a").unwrap();
    cfg.hbm_bytes = 1 << 30;
    std::fs::write(&path, cfg.serialize()).unwrap();
    let o = cimtpu(&[
        "simulate",
        "--config",
        path.to_str().unwrap(),
        "--model",
        "gpt3-30b",
        "--out-len",
        "4",
    ]);
    assert_eq!(
        code(&o),
        3,
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("capacity"));
}

#[test]
fn output_is_deterministic_across_runs_and_threads() {
    let args = [
        "simulate",
        "--config",
        "design-a",
        "--model",
        "dit-xl-2",
        "--stage",
        "block",
        "--resolution",
        "256",
    ];
    let a = cimtpu(&args);
    let b = cimtpu_env(&args, &[("CIMTPU_THREADS", "1")]);
    let c = cimtpu_env(&args, &[("CIMTPU_THREADS", "3")]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
}

#[test]
fn csv_and_text_formats() {
    let mut args = PREFILL.to_vec();
    args.extend(["--format", "csv"]);
    let o = cimtpu(&args);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("op,category,engine,cycles"));
    assert!(lines.any(|l| l.starts_with("qkv,qkv,mxu,")));

    let mut args = PREFILL.to_vec();
    args.extend(["--format", "text"]);
    let o = cimtpu(&args);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("category") && text.contains("ffn") && text.contains("assumptions"));
}

#[test]
fn writes_report_and_mapping_trace_to_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let trace = dir.path().join("trace.json");
    let o = cimtpu(&[
        "simulate",
        "--config",
        "cim-8x8-x2",
        "--model",
        "gpt3-30b",
        "--stage",
        "decode",
        "--output",
        out.to_str().unwrap(),
        "--trace-mappings",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let entries: Vec<Value> =
        serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    let gemms = report["layer"]["ops"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|o| o["result"]["engine"] == "mxu")
        .count();
    assert!(entries.len() > gemms);
    // the chosen mapping of every GEMM appears among its traced candidates
    for op in report["layer"]["ops"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|o| o["result"]["engine"] == "mxu")
    {
        let chosen = &op["result"]["mapping"];
        assert!(entries
            .iter()
            .any(|e| e["op"] == op["name"] && &e["mapping"] == chosen));
    }
}

#[test]
fn sweep_single_point_matches_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"["design-a"]"#).unwrap();
    let common = [
        "--model", "gpt3-30b", "--stage", "prefill", "--seq-in", "256",
    ];
    let mut sweep_args = vec!["sweep", "--grid", grid.to_str().unwrap()];
    sweep_args.extend(common);
    let doc = json(&cimtpu(&sweep_args));
    assert_schema("sweep-report.schema.json", &doc);
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert!(doc["baseline"].is_null());

    let mut sim_args = vec!["simulate", "--config", "design-a"];
    sim_args.extend(common);
    let sim = json(&cimtpu(&sim_args));
    assert_eq!(rows[0]["latency_s"], sim["layer"]["total"]["seconds"]);
    assert_eq!(
        rows[0]["mxu_energy_j"],
        sim["layer"]["total"]["energy"]["mxu_j"]
    );
}

#[test]
fn sweep_grid_accepts_inline_configs_and_flags_infeasible_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut small = cimtpu_core::builtin_preset("cim-8x8-x2").unwrap();
    small.name = "small-hbm".into();
    small.hbm_bytes = 1 << 30;
    let grid = dir.path().join("grid.json");
    let doc = format!(r#"["tpuv4i-baseline", {}]"#, small.serialize());
    std::fs::write(&grid, doc).unwrap();
    let o = cimtpu(&[
        "sweep",
        "--grid",
        grid.to_str().unwrap(),
        "--model",
        "gpt3-30b",
        "--seq-in",
        "512",
        "--out-len",
        "4",
    ]);
    let doc = json(&o);
    assert_schema("sweep-report.schema.json", &doc);
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["name"], "small-hbm");
    assert_eq!(rows[1]["feasible"], false);
    assert_eq!(doc["baseline"], "tpuv4i-baseline");
    assert_eq!(doc["ratios"][0]["speedup"], 1.0);
}

#[test]
fn builtin_grid_sweep_has_ten_rows() {
    let o = cimtpu(&[
        "sweep",
        "--table-v",
        "--model",
        "gpt3-30b",
        "--stage",
        "decode",
    ]);
    let doc = json(&o);
    assert_schema("sweep-report.schema.json", &doc);
    let names: Vec<&str> = doc["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(names.len(), 10);
    assert_eq!(names[0], "tpuv4i-baseline");
    assert!(!doc["pareto_front"].as_array().unwrap().is_empty());

    let o = cimtpu(&[
        "sweep",
        "--table-v",
        "--model",
        "gpt3-30b",
        "--stage",
        "decode",
        "--format",
        "csv",
    ]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 11);
}

#[test]
fn presets_listing_is_stable() {
    let a = cimtpu(&["presets"]);
    assert_eq!(code(&a), 0);
    let text = String::from_utf8(a.stdout.clone()).unwrap();
    assert!(
        text.contains("tpuv4i-baseline") && text.contains("design-a") && text.contains("gpt3-30b")
    );
    assert_eq!(cimtpu(&["presets"]).stdout, a.stdout);
    let doc = json(&cimtpu(&["presets", "--format", "json"]));
    assert_eq!(doc["configs"][0]["name"], "tpuv4i-baseline");
}
