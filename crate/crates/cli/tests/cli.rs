//! End-to-end runs of the `fbsim` binary: artifacts, determinism and exit
//! statuses.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fbsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsim"))
        .args(args)
        .output()
        .expect("fbsim runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit status")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn config_with_array(dir: &Path, side: usize) -> String {
    let text = fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../core/configs/default.json"
    ))
    .unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["array_rows"] = side.into();
    v["array_cols"] = side.into();
    let p = dir.join(format!("array{side}.json"));
    fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn map_merges_relu_into_max_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = fbsim(&["map", "--model", "toy-conv-relu-max", "--out", path(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let plan = fs::read_to_string(a.join("plan.json")).unwrap();
    assert_eq!(plan, fs::read_to_string(b.join("plan.json")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&plan).unwrap();
    let fbs = v["imas"][0]["fbs"].as_array().unwrap();
    assert_eq!(fbs.len(), 2);
    assert_eq!(fbs[1]["fused_relu"], true);
    let floorplan = fs::read_to_string(a.join("floorplan.csv")).unwrap();
    assert_eq!(floorplan.lines().count(), 3);
}

#[test]
fn simulate_passes_the_oracle_and_repeats_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = fbsim(&[
            "simulate",
            "--model",
            "toy-conv-relu-max",
            "--seed",
            "9",
            "--out",
            path(out),
            "--emit-plot-data",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("oracle: PASS"));
    }
    for f in [
        "plan.json",
        "trace.csv",
        "report.json",
        "utilization.csv",
        "plot_utilization_vs_array_size.csv",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let plot = fs::read_to_string(a.join("plot_utilization_vs_array_size.csv")).unwrap();
    let sizes: Vec<&str> = plot
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(sizes, ["128", "256", "512"]);
    // No temporary files left behind.
    assert!(fs::read_dir(&a).unwrap().all(|e| !e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .ends_with(".tmp")));
}

#[test]
fn simulate_reuses_a_plan_file_and_rejects_a_corrupted_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        code(&fbsim(&[
            "map",
            "--model",
            "toy-conv-relu-max",
            "--out",
            path(&out)
        ])),
        0
    );
    let plan = out.join("plan.json");
    let o = fbsim(&[
        "simulate",
        "--model",
        "toy-conv-relu-max",
        "--plan",
        path(&plan),
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&o), 0);
    let bad = dir.path().join("bad.json");
    let text = fs::read_to_string(&plan).unwrap();
    fs::write(&bad, &text[..text.len() / 2]).unwrap();
    let o = fbsim(&[
        "simulate",
        "--model",
        "toy-conv-relu-max",
        "--plan",
        path(&bad),
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn reset_flag_changes_only_write_cycles() {
    let dir = TempDir::new().unwrap();
    let report = |reset: &str| {
        let out = dir.path().join(reset);
        let o = fbsim(&[
            "simulate",
            "--model",
            "toy-conv-relu-max",
            "--include-reset",
            reset,
            "--out",
            path(&out),
        ]);
        assert_eq!(code(&o), 0);
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        v
    };
    let (on, off) = (report("true"), report("false"));
    let blocks = on["exec"]["write_cycles"].as_u64().unwrap()
        - off["exec"]["write_cycles"].as_u64().unwrap();
    assert!(blocks > 0);
    assert_eq!(on["summary"], off["summary"]);
}

#[test]
fn compare_and_baseline_write_tables() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c");
    let o = fbsim(&[
        "compare",
        "--model",
        "toy-conv-relu-max",
        "--mode",
        "static-512",
        "--mode",
        "multi-size",
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rel = fs::read_to_string(out.join("relative.csv")).unwrap();
    assert_eq!(rel.lines().count(), 3);
    assert!(rel.contains("static-512,"));
    let o = fbsim(&[
        "baseline",
        "--model",
        "toy-conv-relu-max",
        "--mode",
        "static-128",
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert!(out.join("baseline.json").exists());
}

#[test]
fn trace_view_reads_simulate_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t");
    assert_eq!(
        code(&fbsim(&[
            "simulate",
            "--model",
            "toy-conv-relu-max",
            "--out",
            path(&out)
        ])),
        0
    );
    let o = fbsim(&["trace-view", path(&out.join("trace.csv")), "--width", "40"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("FB1") && text.contains("FB2"), "{text}");
    assert_eq!(
        code(&fbsim(&["trace-view", path(&out.join("plan.json"))])),
        2
    );
}

#[test]
fn error_paths_have_distinct_statuses() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("e");
    // Unknown model and malformed config: configuration errors.
    assert_eq!(
        code(&fbsim(&[
            "map",
            "--model",
            "no-such-model",
            "--out",
            path(&out)
        ])),
        2
    );
    let bad_cfg = dir.path().join("cfg.json");
    fs::write(&bad_cfg, "{\"version\": \"v1\"}").unwrap();
    assert_eq!(
        code(&fbsim(&[
            "map",
            "--model",
            "toy-conv-relu-max",
            "--config",
            path(&bad_cfg),
            "--out",
            path(&out)
        ])),
        2
    );
    assert_eq!(
        code(&fbsim(&[
            "simulate",
            "--model",
            "toy-conv-relu-max",
            "--mode",
            "static-9x",
            "--out",
            path(&out)
        ])),
        2
    );
    // Missing file: I/O error.
    let missing = dir.path().join("missing.json");
    assert_eq!(
        code(&fbsim(&[
            "map",
            "--model",
            "toy-conv-relu-max",
            "--config",
            path(&missing),
            "--out",
            path(&out)
        ])),
        1
    );
    // A 5x5 pooling tournament at 8 bits needs 200 columns: infeasible on 128.
    let model = dir.path().join("wide-pool.json");
    fs::write(
        &model,
        r#"{"version":"v1","name":"wide-pool","layers":[
            {"id":1,"kind":"Conv","in_shape":[1,10,10],"kernel":{"out_channels":1,"kh":1,"kw":1,"stride":1,"pad":0}},
            {"id":2,"kind":"Max","in_shape":[1,10,10],"window":{"ph":5,"pw":5,"stride":5}}]}"#,
    )
    .unwrap();
    let cfg = config_with_array(dir.path(), 128);
    let o = fbsim(&[
        "map",
        "--model",
        path(&model),
        "--config",
        &cfg,
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible"));
}
