//! CLI behavior: exit codes, machine-readable errors, flag handling and
//! thread-count independence.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use srq_core::metrics::{load_image, save_image, ImageBuf};
use srq_core::synth::synthetic_image;

fn srq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_dataset(dir: &Path, count: usize, seed0: u64) {
    let hr = dir.join("HR");
    std::fs::create_dir_all(&hr).unwrap();
    for i in 0..count {
        save_image(
            &hr.join(format!("img{i}.pgm")),
            &synthetic_image(40, 32, 1, seed0 + i as u64),
        )
        .unwrap();
    }
}

fn gen_and_calibrate(root: &Path, kind: &str, seed: &str) -> (PathBuf, PathBuf, PathBuf) {
    let model = root.join("model");
    let ds = root.join("ds");
    let stats = root.join("stats.json");
    write_dataset(&ds, 4, 21_000);
    let out = srq(&[
        "gen-model", "--kind", kind, "--scale", "2", "--depth", "3", "--channels", "4",
        "--seed", seed, "--out", model.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = srq(&[
        "calibrate", "--model", model.to_str().unwrap(), "--images", ds.to_str().unwrap(),
        "--degrade", "bicubic", "--fraction", "1.0", "--seed", "1",
        "--out", stats.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    (model, ds, stats)
}

#[test]
fn missing_input_gives_exit_1_and_json_error_line() {
    let out = srq(&[
        "eval", "--model", "/nonexistent/model", "--dataset", "/nonexistent/ds",
        "--out", "/tmp/never.json",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(line).expect("machine-readable error");
    assert!(parsed["error"].is_string());
}

#[test]
fn usage_error_gives_exit_2() {
    let out = srq(&["optimize", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infinite_tolerance_yields_all_8_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, ds, stats) = gen_and_calibrate(tmp.path(), "chain", "5");
    let plan = tmp.path().join("plan.json");
    let out = srq(&[
        "optimize", "--model", model.to_str().unwrap(), "--images", ds.to_str().unwrap(),
        "--degrade", "bicubic", "--stats", stats.to_str().unwrap(),
        "--epsilon", "inf", "--seed", "0", "--out", plan.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    let bits: Vec<u64> = plan["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["params"]["bits"].as_u64().unwrap())
        .collect();
    assert_eq!(bits, vec![8, 8, 8]);
    assert_eq!(plan["provenance"]["feasible"], serde_json::json!(true));
}

#[test]
fn degenerate_calibration_makes_optimization_infeasible_with_exit_3() {
    // Constant images give the single quantizable layer a degenerate
    // range, whose lattice reconstructs round(x) instead of x; even the
    // all-16 plan then violates any reasonable tolerance.
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let model = root.join("model");
    let ds = root.join("ds/HR");
    std::fs::create_dir_all(&ds).unwrap();
    for i in 0..3 {
        let img = ImageBuf::new(32, 32, 1, vec![128; 1024]).unwrap();
        save_image(&ds.join(format!("flat{i}.pgm")), &img).unwrap();
    }
    let out = srq(&[
        "gen-model", "--kind", "bicubic", "--scale", "2", "--out", model.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stats = root.join("stats.json");
    let out = srq(&[
        "calibrate", "--model", model.to_str().unwrap(), "--images",
        root.join("ds").to_str().unwrap(), "--degrade", "bicubic", "--fraction", "1.0",
        "--seed", "1", "--out", stats.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let plan = root.join("plan.json");
    let out = srq(&[
        "optimize", "--model", model.to_str().unwrap(), "--images",
        root.join("ds").to_str().unwrap(), "--degrade", "bicubic", "--stats",
        stats.to_str().unwrap(), "--epsilon", "0.1", "--seed", "1",
        "--out", plan.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    assert_eq!(plan["provenance"]["feasible"], serde_json::json!(false));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, ds, _stats) = gen_and_calibrate(tmp.path(), "chain", "7");
    let strip = |p: &Path| {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.contains("timestamp_ms"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let r1 = tmp.path().join("r1.json");
    let r4 = tmp.path().join("r4.json");
    for (threads, path) in [("1", &r1), ("4", &r4)] {
        let out = srq(&[
            "eval", "--threads", threads, "--model", model.to_str().unwrap(),
            "--dataset", ds.to_str().unwrap(), "--degrade", "bicubic",
            "--out", path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(strip(&r1), strip(&r4));
}

#[test]
fn bops_prints_table_and_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("model");
    let out = srq(&[
        "gen-model", "--kind", "bicubic", "--scale", "4", "--out", model.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let report = tmp.path().join("bops.json");
    let out = srq(&[
        "bops", "--model", model.to_str().unwrap(), "--wordlengths", "16",
        "--hw", "96x96", "--out", report.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("conv"));
    assert!(stdout.contains("total"));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["conv_weighted"], serde_json::json!(7_372_800));
}

#[test]
fn upscale_writes_scaled_image() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("model");
    srq(&["gen-model", "--kind", "bilinear", "--scale", "3", "--out", model.to_str().unwrap()]);
    let input = tmp.path().join("in.pgm");
    save_image(&input, &synthetic_image(20, 14, 1, 5)).unwrap();
    let output = tmp.path().join("out.png");
    let out = srq(&[
        "upscale", "--model", model.to_str().unwrap(), "--input", input.to_str().unwrap(),
        "--out", output.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = load_image(&output).unwrap();
    assert_eq!((img.width, img.height), (60, 42));
}

#[test]
fn compare_optimizers_emits_table_and_json() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, ds, stats) = gen_and_calibrate(tmp.path(), "chain", "9");
    let cmp = tmp.path().join("cmp.json");
    let out = srq(&[
        "compare-optimizers", "--model", model.to_str().unwrap(), "--images",
        ds.to_str().unwrap(), "--degrade", "bicubic", "--stats", stats.to_str().unwrap(),
        "--epsilon", "0.1", "--seed", "4", "--out", cmp.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["wlopt", "sa", "ga", "rs"] {
        assert!(stdout.contains(name), "missing {name} in table");
    }
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cmp).unwrap()).unwrap();
    assert_eq!(parsed["results"].as_array().unwrap().len(), 4);
    // Budget parity across the stochastic baselines.
    let evals: Vec<u64> = parsed["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["evaluations"].as_u64().unwrap())
        .collect();
    assert!(evals.iter().all(|&e| e == evals[0]), "{evals:?}");
}
