use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hpft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpft"))
        .args(args)
        .env_remove("HPFT_OUT")
        .env_remove("HPFT_THREADS")
        .output()
        .expect("spawn hpft")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_cfg(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn run_ok(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = hpft(&args);
    assert_eq!(code(&o), 0, "{cmd} failed: {}", stderr(&o));
    manifest(out)
}

fn small_pretrain() -> Value {
    json!({
        "input_dim": 8,
        "num_classes": 4,
        "n_per_class": 60,
        "mean_radius": 4.0,
        "noise_sigma": 0.5,
        "widths": [16, 16],
        "stage": { "stage": "pretrain", "epochs": 200, "lr": 0.02, "momentum": 0.9, "batch_size": 32, "loss": "cross_entropy" }
    })
}

fn gen_data_cfg(seed: u64) -> Value {
    json!({
        "schema_version": 1,
        "seed": seed,
        "pretrain": small_pretrain(),
        "downstream": {
            "n_per_class": 40,
            "noise_sigma": 1.0,
            "shift": { "class_subset": [0, 1, 2], "rotation_angle": 0.5, "scale": 1.2 },
            "valid_frac": 0.25
        },
        "regression": { "d": 6, "n": 4 }
    })
}

fn stage(s: &str, epochs: usize, lr: f64, batch: usize) -> Value {
    json!({ "stage": s, "epochs": epochs, "lr": lr, "momentum": 0.9, "batch_size": batch, "loss": "cross_entropy" })
}

/// gen-data + pretrain in `root`; returns (data dir, pretrain dir).
fn prepare(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let pre = root.join("pre");
    let g = write_cfg(root, "gen.json", &gen_data_cfg(3));
    run_ok("gen-data", &g, &data, &[]);
    let p = write_cfg(root, "pre.json", &json!({ "schema_version": 1, "seed": 3, "pretrain": small_pretrain() }));
    run_ok("pretrain", &p, &pre, &[]);
    (data, pre)
}

fn data_paths(data: &Path) -> Value {
    json!({
        "train": data.join("data/downstream_train.csv"),
        "valid": data.join("data/downstream_valid.csv"),
    })
}

fn csv_hashes(m: &Value) -> Vec<(String, String)> {
    m["files"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|f| f["path"].as_str().unwrap().ends_with(".csv"))
        .map(|f| (f["path"].as_str().unwrap().to_string(), f["sha256"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn gen_data_manifest_hashes_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "gen.json", &gen_data_cfg(1));
    let out = tmp.path().join("out");
    let m = run_ok("gen-data", &cfg, &out, &[]);
    let files = m["files"].as_array().unwrap();
    assert_eq!(files.len(), 5);
    for f in files {
        let bytes = std::fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        use sha2::Digest;
        let hex: String = sha2::Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, f["sha256"].as_str().unwrap());
        assert_eq!(bytes.len() as u64, f["bytes"].as_u64().unwrap());
    }
    let header = std::fs::read_to_string(out.join("data/downstream_train.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with(",label"));
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "gen.json", &gen_data_cfg(1));
    let out = tmp.path().join("out");
    run_ok("gen-data", &cfg, &out, &[]);
    let o = hpft(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    run_ok("gen-data", &cfg, &out, &["--force"]);
}

#[test]
fn force_refuses_foreign_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "gen.json", &gen_data_cfg(1));
    let out = tmp.path().join("mine");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("notes.txt"), "keep").unwrap();
    let o = hpft(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--force"]);
    assert_eq!(code(&o), 3);
    assert_eq!(std::fs::read_to_string(out.join("notes.txt")).unwrap(), "keep");
}

#[test]
fn rerun_with_force_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "gen.json", &gen_data_cfg(5));
    let out = tmp.path().join("out");
    let a = run_ok("gen-data", &cfg, &out, &[]);
    let b = run_ok("gen-data", &cfg, &out, &["--force"]);
    assert_eq!(a["files"], b["files"]);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "gen.json", &gen_data_cfg(5));
    let a = run_ok("gen-data", &cfg, &tmp.path().join("a"), &[]);
    let b = run_ok("gen-data", &cfg, &tmp.path().join("b"), &["--seed", "6"]);
    let c = write_cfg(tmp.path(), "gen6.json", &gen_data_cfg(6));
    let c = run_ok("gen-data", &c, &tmp.path().join("c"), &[]);
    assert_ne!(a["files"], b["files"]);
    assert_eq!(b["files"], c["files"]);
    assert_eq!(b["config"]["seed"], 6);
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = gen_data_cfg(1);
    v["downstream"]["rotation"] = json!(1.0);
    let cfg = write_cfg(tmp.path(), "bad.json", &v);
    let out = tmp.path().join("out");
    let o = hpft(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("rotation"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn wrong_schema_version_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = gen_data_cfg(1);
    v["schema_version"] = json!(99);
    let cfg = write_cfg(tmp.path(), "bad.json", &v);
    let o = hpft(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("schema_version"));
}

#[test]
fn missing_config_and_inputs_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hpft(&["trend", "--config", tmp.path().join("nope.json").to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 4);

    let cfg = write_cfg(
        tmp.path(),
        "run.json",
        &json!({
            "schema_version": 1,
            "seed": 0,
            "checkpoint": "missing/backbone.json",
            "data": { "train": "missing/train.csv", "valid": "missing/valid.csv" },
            "hp": stage("hp", 2, 0.01, 0),
            "ft": stage("ft", 2, 0.01, 16)
        }),
    );
    let o = hpft(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn pretrain_threshold_unreachable_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = small_pretrain();
    p["stage"]["epochs"] = json!(0);
    let cfg = write_cfg(tmp.path(), "pre.json", &json!({ "schema_version": 1, "seed": 0, "pretrain": p }));
    let o = hpft(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("threshold"), "{}", stderr(&o));
}

#[test]
fn pipeline_run_analyze_sweep_exchange_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, pre) = prepare(root);
    let ck = pre.join("checkpoints/backbone.json");

    let run_cfg = json!({
        "schema_version": 1,
        "seed": 4,
        "checkpoint": ck,
        "data": data_paths(&data),
        "hp": stage("hp", 3, 0.01, 0),
        "ft": stage("ft", 3, 0.005, 16),
        "options": { "probe_count": 20 }
    });
    let rc = write_cfg(root, "run.json", &run_cfg);
    let run_dir = root.join("run");
    let rm = run_ok("run", &rc, &run_dir, &[]);
    for f in ["metrics/epochs.csv", "metrics/aie.csv", "metrics/bound.csv", "snapshots/features.csv", "checkpoints/final.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert_eq!(rm["summary"]["analysis"]["bound"]["holds"], true);

    // analysis is recomputed from the saved checkpoints and must agree
    let ac = write_cfg(root, "an.json", &json!({ "schema_version": 1, "run_dir": run_dir, "data": data_paths(&data) }));
    let am = run_ok("analyze", &ac, &root.join("an"), &[]);
    assert_eq!(am["summary"]["analysis"], rm["summary"]["analysis"]);
    for f in ["metrics/aie.csv", "metrics/adaptation.csv", "metrics/bound.csv", "metrics/ntk.csv"] {
        assert_eq!(
            std::fs::read(run_dir.join(f)).unwrap(),
            std::fs::read(root.join("an").join(f)).unwrap(),
            "{f}"
        );
    }

    // re-running is byte identical
    let rm2 = run_ok("run", &rc, &run_dir, &["--force"]);
    assert_eq!(csv_hashes(&rm), csv_hashes(&rm2));

    let sweep = |grid: Value, out: &str| {
        let c = write_cfg(
            root,
            &format!("{out}.json"),
            &json!({
                "schema_version": 1,
                "seeds": [0, 1],
                "checkpoint": ck,
                "data": data_paths(&data),
                "grid": grid,
                "hp": stage("hp", 0, 0.01, 0),
                "ft": stage("ft", 2, 0.005, 16),
                "options": { "probe_count": 20 }
            }),
        );
        run_ok("sweep", &c, &root.join(out), &[])
    };
    let single = sweep(json!([0]), "sweep0");
    assert_eq!(single["summary"]["tau_star"], 0);
    let rows = std::fs::read_to_string(root.join("sweep0/metrics/sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    let s = sweep(json!([0, 2, 4]), "sweep");
    assert!(s["summary"]["tau_star"].is_u64());

    let ec = write_cfg(
        root,
        "ex.json",
        &json!({
            "schema_version": 1,
            "seeds": [0],
            "checkpoint": ck,
            "data": data_paths(&data),
            "taus": [0, 2, 4],
            "hp": stage("hp", 0, 0.01, 0),
            "ft": stage("ft", 2, 0.005, 16)
        }),
    );
    let em = run_ok("exchange", &ec, &root.join("ex"), &[]);
    assert_eq!(em["summary"]["mean"]["compatibility"].as_array().unwrap().len(), 3);
    let ex = std::fs::read_to_string(root.join("ex/metrics/exchange_mean.csv")).unwrap();
    assert_eq!(ex.lines().next().unwrap(), "backbone_tau,head_tau,train_acc,valid_acc");
    assert_eq!(ex.lines().count(), 10);

    let study = |s: Value, name: &str| {
        let c = write_cfg(
            root,
            &format!("{name}.json"),
            &json!({
                "schema_version": 1,
                "seeds": [0, 1],
                "checkpoint": ck,
                "data": data_paths(&data),
                "hp": stage("hp", 20, 0.01, 0),
                "ft": stage("ft", 2, 0.005, 16),
                "options": { "probe_count": 20 },
                "study": s
            }),
        );
        run_ok("report", &c, &root.join(name), &[])
    };
    let ls = study(json!({ "kind": "ls_hp", "eta_hp": 0.9, "eta_ft": 0.9 }), "ls");
    assert_eq!(ls["summary"]["rows"].as_array().unwrap().len(), 4);
    let pb = study(json!({ "kind": "partial_backbone", "n_last": [0, 1] }), "pb");
    assert_eq!(pb["summary"]["rows"].as_array().unwrap().len(), 2);
    let hc = study(json!({ "kind": "head_capacity", "heads": [{ "kind": "linear" }, { "kind": "mlp2", "hidden": 8 }] }), "hc");
    assert_eq!(hc["summary"]["rows"][1]["condition"], "mlp2_8");
    let ab = study(json!({ "kind": "aie_bound", "taus": [0, 4], "n_probe": 4 }), "ab");
    assert_eq!(ab["summary"]["all_hold"], true);
    let nt = study(json!({ "kind": "ntk_compare", "n_probe": 4 }), "nt");
    assert_eq!(nt["summary"]["seeds"], 2);

    // partial backbone that would leave nothing pretrained
    let bad = write_cfg(
        root,
        "pbbad.json",
        &json!({
            "schema_version": 1,
            "seeds": [0],
            "checkpoint": ck,
            "data": data_paths(&data),
            "hp": stage("hp", 2, 0.01, 0),
            "ft": stage("ft", 2, 0.005, 16),
            "study": { "kind": "partial_backbone", "n_last": [2] }
        }),
    );
    let o = hpft(&["report", "--config", bad.to_str().unwrap(), "--out", root.join("pbbad").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn divergence_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, pre) = prepare(root);
    let cfg = write_cfg(
        root,
        "run.json",
        &json!({
            "schema_version": 1,
            "seed": 0,
            "checkpoint": pre.join("checkpoints/backbone.json"),
            "data": data_paths(&data),
            "hp": { "stage": "hp", "epochs": 60, "lr": 1e6, "momentum": 0.9, "batch_size": 0, "loss": "mse" },
            "ft": stage("ft", 2, 0.01, 0)
        }),
    );
    let o = hpft(&["run", "--config", cfg.to_str().unwrap(), "--out", root.join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(stderr(&o).contains("in hp"), "{}", stderr(&o));
    assert!(!root.join("o").exists());
}

#[test]
fn trend_command_reports_pass_rates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "trend.json",
        &json!({ "schema_version": 1, "trend": { "instances": 10, "h": 16, "d": 20, "n": 10, "seed": 2 } }),
    );
    let out = tmp.path().join("t");
    let m = run_ok("trend", &cfg, &out, &[]);
    assert_eq!(m["summary"]["d_dot_pass_rate"], 1.0);
    assert_eq!(m["summary"]["d_euc_pass_rate"], 1.0);
    let csv = std::fs::read_to_string(out.join("metrics/trend.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("instance,alpha_summary,"));
}

#[test]
fn threads_flag_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "trend.json",
        &json!({ "schema_version": 1, "trend": { "instances": 12, "seed": 9 } }),
    );
    let a = run_ok("trend", &cfg, &tmp.path().join("a"), &["--threads", "1"]);
    let b = run_ok("trend", &cfg, &tmp.path().join("b"), &["--threads", "3"]);
    assert_eq!(csv_hashes(&a), csv_hashes(&b));
}
