mod common;

use std::path::Path;

use serde_json::Value;

use common::schema::validate;
use common::{bin, run, run_ok};

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn assert_valid(name: &str, v: &Value) {
    if let Err(errs) = validate(name, v) {
        panic!("{name} schema violations:\n{}", errs.join("\n"));
    }
}

fn workload(dir: &Path) -> String {
    let p = dir.join("w.json");
    std::fs::write(
        &p,
        r#"{
  "adapters": [
    {"adapter_id": 0, "rank": 8, "rate": 0.5},
    {"adapter_id": 1, "rank": 16, "rate": 0.3},
    {"adapter_id": 2, "rank": 0, "rate": 0.2}
  ],
  "lengths": {"mode": "full", "full_lengths": [[250, 231], [120, 40]]},
  "duration_s": 60,
  "seed": 3
}"#,
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_result_meta_and_trace() {
    let d = tempfile::tempdir().unwrap();
    let w = workload(d.path());
    let out = d.path().join("r.json");
    let csv = d.path().join("t.csv");
    run_ok(&[
        "simulate", "--workload", &w, "--out", out.to_str().unwrap(), "--trace-csv", csv.to_str().unwrap(), "--check",
    ]);
    let r = json(&out);
    assert_valid("simulation_result", &r);
    assert_valid("workload_spec", &json(Path::new(&w)));
    assert!(r["metrics"]["throughput_tok_s"].as_f64().unwrap() > 0.0);
    assert!(r.get("wall_time_s").is_none());
    let meta = json(&d.path().join("r.json.meta.json"));
    assert!(meta["wall_time_s"].as_f64().is_some());
    let trace = std::fs::read_to_string(&csv).unwrap();
    assert!(trace.starts_with("time,iteration,r_running,r_waiting,a_running,lat_step,loads\n"));
    assert_eq!(trace.lines().count() as u64, r["iterations"].as_u64().unwrap() + 1);
}

#[test]
fn seed_flag_changes_arrivals() {
    let d = tempfile::tempdir().unwrap();
    let w = workload(d.path());
    let outs: Vec<Value> = ["1", "2"]
        .iter()
        .map(|s| {
            let out = d.path().join(format!("r{s}.json"));
            run_ok(&["simulate", "--workload", &w, "--seed", s, "--out", out.to_str().unwrap()]);
            json(&out)
        })
        .collect();
    assert_ne!(outs[0]["requests"], outs[1]["requests"]);
}

#[test]
fn preset_and_config_fallback() {
    let d = tempfile::tempdir().unwrap();
    let preset = run_ok(&["preset", "--slots", "4"]);
    let cfg: Value = serde_json::from_slice(&preset.stdout).unwrap();
    assert_valid("server_config", &cfg);
    assert_eq!(cfg["slots"], 4);

    let c = d.path().join("c.json");
    std::fs::write(&c, &preset.stdout).unwrap();
    let w = workload(d.path());
    let out = d.path().join("r.json");
    let o = bin()
        .env("LORAPLACE_CONFIG", &c)
        .args(["simulate", "--workload", &w, "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(json(&out)["config"]["slots"], 4);

    // --config beats the environment.
    let o = bin()
        .env("LORAPLACE_CONFIG", "/nonexistent.json")
        .args(["simulate", "--workload", &w, "--config", c.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success());
}

#[test]
fn sweep_output_matches_schema() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("p.json");
    run_ok(&[
        "sweep", "--rates", "0.2,0.1", "--ranks", "8,32", "--duration", "60", "--n-grid", "1,2,4,8", "--out",
        out.to_str().unwrap(),
    ]);
    let p = json(&out);
    assert_valid("placement_result", &p);
    assert!(p["frontier"].as_array().unwrap().len() >= 4);
}

#[test]
fn sweep_reads_condition_file() {
    let d = tempfile::tempdir().unwrap();
    let cond = d.path().join("cond.json");
    std::fs::write(
        &cond,
        r#"{"templates": [{"rank": 8, "rate": 0.1}], "lengths": {"mode": "full", "full_lengths": [[250, 231]]}}"#,
    )
    .unwrap();
    let out = d.path().join("p.json");
    run_ok(&[
        "sweep", "--condition", cond.to_str().unwrap(), "--duration", "60", "--n-grid", "1,2", "--out",
        out.to_str().unwrap(),
    ]);
    assert_valid("placement_result", &json(&out));
}

#[test]
fn dataset_train_predict_rules() {
    let d = tempfile::tempdir().unwrap();
    let grid = d.path().join("grid.json");
    std::fs::write(
        &grid,
        r#"{"rates": [0.2, 0.05, 0.0125], "ranks": [8, 32], "k": 2, "rate_repetition": true,
            "rank_repetition": true, "lengths": {"mode": "full", "full_lengths": [[250, 231]]}}"#,
    )
    .unwrap();
    let ds = d.path().join("ds.csv");
    let o = run_ok(&[
        "gen-dataset", "--grid", grid.to_str().unwrap(), "--duration", "30", "--n-grid", "1,2,4,8", "--out",
        ds.to_str().unwrap(),
    ]);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.starts_with("18 conditions"), "{stderr}");
    let text = std::fs::read_to_string(&ds).unwrap();
    assert_eq!(text.lines().count(), 19);

    // A second run resumes and writes nothing new.
    run_ok(&[
        "gen-dataset", "--grid", grid.to_str().unwrap(), "--duration", "30", "--n-grid", "1,2,4,8", "--out",
        ds.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read_to_string(&ds).unwrap(), text);

    let model = d.path().join("m.json");
    let report = d.path().join("rep.json");
    run_ok(&[
        "train", "--dataset", ds.to_str().unwrap(), "--test-fraction", "0.2", "--out", model.to_str().unwrap(),
        "--report", report.to_str().unwrap(),
    ]);
    let m = json(&model);
    assert_valid("placement_model", &m);
    assert_valid("forest_model", &m["n_star"]);
    let rep = json(&report);
    assert!(rep["targets"]["n_star"]["forest"]["train"].as_f64().is_some());

    let p = run_ok(&["predict", "--model", model.to_str().unwrap(), "--rates", "0.2,0.05", "--ranks", "8,32"]);
    let p: Value = serde_json::from_slice(&p.stdout).unwrap();
    assert!(p["n_star"].as_u64().unwrap() >= 1);
    assert!(p["g_star"].as_u64().unwrap() >= 1);

    // The same point through a feature file.
    let feats = d.path().join("f.json");
    let names = &m["throughput"]["feature_names"];
    let x: Vec<f64> = {
        let c = loraplace::placement::Condition {
            templates: vec![
                loraplace::placement::Template { rank: 8, rate: 0.2 },
                loraplace::placement::Template { rank: 32, rate: 0.05 },
            ],
            lengths: loraplace::workload::LengthSpec::constant(250, 231),
        };
        loraplace::placement::encode_workload(&c).unwrap().0.to_vec()
    };
    let obj: serde_json::Map<String, Value> = names
        .as_array()
        .unwrap()
        .iter()
        .zip(&x)
        .map(|(n, v)| (n.as_str().unwrap().to_string(), Value::from(*v)))
        .collect();
    std::fs::write(&feats, Value::Object(obj).to_string()).unwrap();
    let q = run_ok(&["predict", "--model", model.to_str().unwrap(), "--features", feats.to_str().unwrap()]);
    assert_eq!(serde_json::from_slice::<Value>(&q.stdout).unwrap(), p);

    let rules = run_ok(&["rules", "--model", model.to_str().unwrap(), "--target", "n-star"]);
    let text = String::from_utf8(rules.stdout).unwrap();
    assert!(text.starts_with("# n_star\ntree 0: if "), "{text}");
    let rules = run_ok(&["rules", "--model", model.to_str().unwrap(), "--json"]);
    let v: Value = serde_json::from_slice(&rules.stdout).unwrap();
    assert!(v["g_star"].as_array().unwrap().len() >= 10);
}

#[test]
fn compare_prints_table_and_json() {
    let d = tempfile::tempdir().unwrap();
    let w = workload(d.path());
    std::fs::create_dir_all(d.path().join("dt")).unwrap();
    std::fs::create_dir_all(d.path().join("real")).unwrap();
    let dt = d.path().join("dt/medium.json");
    run_ok(&["simulate", "--workload", &w, "--out", dt.to_str().unwrap()]);
    let r = json(&dt);
    let real: Vec<Value> = r["requests"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|q| !q["first_token_s"].is_null())
        .map(|q| {
            serde_json::json!({
                "adapter_id": q["adapter_id"],
                "arrival_s": q["arrival_s"],
                "first_token_s": q["first_token_s"],
                "token_times_s": q["token_times_s"],
            })
        })
        .collect();
    let re = d.path().join("real/medium.json");
    std::fs::write(&re, serde_json::json!({"window_s": r["window_s"], "requests": real}).to_string()).unwrap();
    let rep = d.path().join("cmp.json");
    let o = run_ok(&[
        "compare", "--dt", dt.to_str().unwrap(), "--real", re.to_str().unwrap(), "--out", rep.to_str().unwrap(),
    ]);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("medium"), "{table}");
    let v = json(&rep);
    assert!(v["smape_throughput"].as_f64().unwrap() < 1e-9, "{v}");
    assert!(v["smape_itl"].as_f64().unwrap() < 1e-9, "{v}");
}

#[test]
fn fit_writes_valid_config() {
    let d = tempfile::tempdir().unwrap();
    let model = d.path().join("model.csv");
    std::fs::write(&model, "r_running,latency_s\n1,0.0301\n2,0.0302\n100,0.04\n").unwrap();
    let load = d.path().join("load.csv");
    std::fs::write(&load, "rank,source,latency_s\n8,cpu,0.01\n8,disk,0.02\n16,cpu,0.02\n").unwrap();
    let out = d.path().join("c.json");
    run_ok(&[
        "fit", "--model", model.to_str().unwrap(), "--load", load.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    let c = json(&out);
    assert_valid("server_config", &c);
    let k4 = c["estimators"]["coefficients"]["k4"].as_f64().unwrap();
    let k5 = c["estimators"]["coefficients"]["k5"].as_f64().unwrap();
    assert!((k4 - 1e-4).abs() < 1e-12 && (k5 - 0.03).abs() < 1e-12, "{k4} {k5}");
    assert_eq!(c["estimators"]["load"]["disk_multiplier"], 2.0);
}

#[test]
fn errors_are_single_json_lines() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"adapters": [{"adapter_id": 0, "rank": "eight", "rate": 1}], "lengths": {"mode": "mean"}, "duration_s": 1, "seed": 0}"#,
    )
    .unwrap();
    let o = run(&["simulate", "--workload", bad.to_str().unwrap(), "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    let v: Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "validation");
    assert!(v["message"].as_str().unwrap().contains("adapters[0].rank"), "{v}");

    // Unknown fields are schema violations too.
    std::fs::write(
        &bad,
        r#"{"adapters": [{"adapter_id": 0, "rank": 8, "rate": 1, "rnak": 2}], "lengths": {"mode": "mean"}, "duration_s": 1, "seed": 0}"#,
    )
    .unwrap();
    let o = run(&["simulate", "--workload", bad.to_str().unwrap(), "--out", "/dev/null"]);
    let v: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(v["message"].as_str().unwrap().contains("adapters[0]"), "{v}");

    let o = run(&["simulate", "--workload", "/nonexistent/w.json", "--out", "/dev/null"]);
    let v: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"], "io");
}

#[test]
fn usage_errors_exit_2() {
    for args in [&["simulate", "--bogus"][..], &["frobnicate"], &[]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
    assert_eq!(run(&["sweep", "--rates", "0.1", "--out", "x"]).status.code(), Some(1));
}

#[test]
fn schema_subcommand_lists_and_prints() {
    let o = run_ok(&["schema"]);
    let names = String::from_utf8(o.stdout).unwrap();
    for (name, _) in loraplace::schema::SCHEMAS {
        assert!(names.lines().any(|l| l == name));
        let s = run_ok(&["schema", name]);
        let v: Value = serde_json::from_slice(&s.stdout).unwrap();
        assert_eq!(v["$id"], format!("{name}.schema.json"));
    }
    assert_eq!(run(&["schema", "nope"]).status.code(), Some(1));
}
