use std::ffi::{CStr, CString};
use std::ptr;

use loraplace_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(lp_last_error()) }.to_string_lossy().into_owned()
}

const WORKLOAD: &str = r#"{"adapters": [{"adapter_id": 0, "rank": 8, "rate": 0.4}],
  "lengths": {"mode": "full", "full_lengths": [[250, 231]]}, "duration_s": 60, "seed": 2}"#;

#[test]
fn simulate_matches_library() {
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { lp_simulate(c(WORKLOAD).as_ptr(), ptr::null(), LpMode::Full, &mut r) }, LpStatus::Ok);
    assert_eq!(last_error(), "");
    let mut m = LpMetrics::default();
    assert_eq!(unsafe { lp_result_metrics(r, &mut m) }, LpStatus::Ok);

    let spec = loraplace::workload::WorkloadSpec::from_json_str(WORKLOAD).unwrap();
    let lib = loraplace::engine::run_simulation(
        &spec,
        &loraplace::config::ServerConfig::h100_synthetic(1),
        loraplace::engine::SimMode::Full,
    )
    .unwrap();
    assert_eq!(m.throughput_tok_s, lib.metrics.throughput_tok_s);
    assert_eq!(m.finished_count, lib.metrics.finished_count as u64);

    let mut s = ptr::null_mut();
    assert_eq!(unsafe { lp_result_to_json(r, &mut s) }, LpStatus::Ok);
    let json = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    assert_eq!(json, serde_json::to_string(&lib).unwrap());
    unsafe {
        lp_string_free(s);
        lp_result_free(r);
        lp_result_free(ptr::null_mut());
        lp_string_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut r = ptr::null_mut();
    let st = unsafe { lp_simulate(c("{").as_ptr(), ptr::null(), LpMode::Full, &mut r) };
    assert_eq!(st, LpStatus::Validation);
    assert!(r.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { lp_simulate(ptr::null(), ptr::null(), LpMode::Full, &mut r) }, LpStatus::NullArgument);
    assert_eq!(
        unsafe { lp_simulate(c(WORKLOAD).as_ptr(), ptr::null(), LpMode::Full, ptr::null_mut()) },
        LpStatus::NullArgument
    );

    let bad = [0x66u8, 0xff, 0x00];
    let st = unsafe { lp_simulate(bad.as_ptr().cast(), ptr::null(), LpMode::Full, &mut r) };
    assert_eq!(st, LpStatus::InvalidUtf8);

    // KV budget smaller than the adapter slots.
    let mut cfg = loraplace::config::ServerConfig::h100_synthetic(1);
    cfg.estimators.memory.total_kv_budget = 10;
    let cfg = c(&serde_json::to_string(&cfg).unwrap());
    let st = unsafe { lp_simulate(c(WORKLOAD).as_ptr(), cfg.as_ptr(), LpMode::Full, &mut r) };
    assert_eq!(st, LpStatus::Config, "{}", last_error());

    let mut out = 0.0;
    let p = [1.0, 2.0];
    assert_eq!(unsafe { lp_smape(p.as_ptr(), p.as_ptr(), 2, &mut out) }, LpStatus::Ok);
    assert_eq!(out, 0.0);
    assert_eq!(unsafe { lp_smape(p.as_ptr(), ptr::null(), 2, &mut out) }, LpStatus::NullArgument);
}

#[test]
fn last_error_is_per_thread() {
    let mut r = ptr::null_mut();
    unsafe { lp_simulate(c("[]").as_ptr(), ptr::null(), LpMode::Full, &mut r) };
    assert!(!last_error().is_empty());
    std::thread::spawn(|| assert_eq!(last_error(), "")).join().unwrap();
}

fn small_model() -> loraplace::predictor::PlacementModel {
    use loraplace::placement::{DatasetRow, WorkloadFeatures};
    let rows: Vec<DatasetRow> = (0..40)
        .map(|i| {
            let mut f = [0.0; 16];
            f[0] = i as f64 / 40.0;
            DatasetRow {
                features: WorkloadFeatures(f),
                targets: [100.0 * f[0] + 1.0, (i % 5 + 1) as f64, 2.0],
                condition_hash: format!("{:016x}", (i as u64 + 1) * 104_729 + 5_000),
                duration_s: 60.0,
                seed: 0,
            }
        })
        .collect();
    loraplace::predictor::train_placement(&rows, &Default::default()).unwrap().model
}

#[test]
fn model_load_and_predict() {
    let model = small_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(&path, serde_json::to_string(&model).unwrap()).unwrap();

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { lp_model_load(c(path.to_str().unwrap()).as_ptr(), &mut h) }, LpStatus::Ok);
    let mut x = [0.0; LP_FEATURE_COUNT];
    x[0] = 0.3;
    let mut p = LpPlacement::default();
    assert_eq!(unsafe { lp_model_predict(h, x.as_ptr(), LP_FEATURE_COUNT, &mut p) }, LpStatus::Ok);
    let want = model.predict(&x);
    assert_eq!((p.max_throughput_tok_s, p.n_star, p.g_star), (want.max_throughput_tok_s, want.n_star, want.g_star));
    assert_eq!(unsafe { lp_model_predict(h, x.as_ptr(), 3, &mut p) }, LpStatus::Validation);
    unsafe { lp_model_free(h) };

    let mut h2 = ptr::null_mut();
    let json = c(&serde_json::to_string(&model).unwrap());
    assert_eq!(unsafe { lp_model_from_json(json.as_ptr(), &mut h2) }, LpStatus::Ok);
    unsafe { lp_model_free(h2) };

    let missing = c("/nonexistent/model.json");
    assert_eq!(unsafe { lp_model_load(missing.as_ptr(), &mut h) }, LpStatus::Io);
}

#[test]
fn sweep_and_encode() {
    let cond = c(r#"{"templates": [{"rank": 8, "rate": 0.1}], "lengths": {"mode": "full", "full_lengths": [[250, 231]]}}"#);
    let opts = c(r#"{"n_grid": [1, 2, 4], "g_policy": "equal", "early_exit": null, "duration_s": 60, "seed": 0, "mode": "full"}"#);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { lp_sweep(cond.as_ptr(), ptr::null(), opts.as_ptr(), &mut out) }, LpStatus::Ok, "{}", last_error());
    let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(out) }.to_str().unwrap()).unwrap();
    assert_eq!(v["frontier"].as_array().unwrap().len(), 3);
    unsafe { lp_string_free(out) };

    let mut f = [0.0; LP_FEATURE_COUNT];
    assert_eq!(unsafe { lp_encode_condition(cond.as_ptr(), f.as_mut_ptr()) }, LpStatus::Ok);
    assert_eq!(f[0], 0.1);
    for i in 0..LP_FEATURE_COUNT {
        let name = unsafe { CStr::from_ptr(lp_feature_name(i)) }.to_str().unwrap();
        assert_eq!(name, loraplace::placement::FEATURE_NAMES[i]);
    }
    assert!(lp_feature_name(LP_FEATURE_COUNT).is_null());
    assert_eq!(lp_feature_count(), LP_FEATURE_COUNT);
}
