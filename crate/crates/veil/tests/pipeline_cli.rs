//! The compiled binary end to end: artifact layout, determinism, error
//! classes and exit codes, sidecar handling, sweep summaries, and the
//! ablation runner against a hand-composed protect + evaluate run.

mod common;

use common::{dir_digest, run_cli, stderr_of, write_face_batch};
use std::path::Path;
use tempfile::TempDir;

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// Small whitebox run over `in/` writing to the given output directory.
fn wb_config(out_dir: &str) -> String {
    format!(
        r#"mode = "whitebox"
input_dir = "in"
output_dir = "{out_dir}"

[whitebox]
t1 = 8
t2 = 4
k = 2
alpha = 0.05
inject_start_step = 4
"#
    )
}

fn summary_value(dir: &Path, key: &str) -> f64 {
    let text = std::fs::read_to_string(dir.join("report_summary.txt")).unwrap();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix(&format!("{key}: ")) {
            return rest.trim().parse().unwrap();
        }
    }
    panic!("{key} not found in summary:\n{text}");
}

/// Data rows of a metadata-prefixed CSV (comment and header stripped).
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .skip(1)
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect()
}

#[test]
fn protect_then_evaluate_round_trip() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let names = write_face_batch(&dir.join("in"), 1, 4, (16, 16));
    write(&dir.join("run.toml"), &wb_config("out"));

    let out = run_cli(dir, &["protect", "--config", "run.toml"]);
    assert!(out.status.success(), "protect failed: {}", stderr_of(&out));
    for name in &names {
        assert!(dir.join("out/protected").join(format!("{name}.png")).is_file());
        assert!(dir.join("out/traces").join(format!("{name}.jsonl")).is_file());
    }
    let recorded = std::fs::read_to_string(dir.join("out/run_config.toml")).unwrap();
    assert!(recorded.contains("mode = \"whitebox\""));
    assert!(recorded.contains("schema_version = 1"));

    let out = run_cli(dir, &["evaluate", "--config", "run.toml"]);
    assert!(out.status.success(), "evaluate failed: {}", stderr_of(&out));
    let rows = csv_rows(&dir.join("out/report.csv"));
    assert_eq!(rows.len(), 4);
    let row_names: Vec<&String> = rows.iter().map(|r| &r[0]).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(row_names, sorted.iter().collect::<Vec<_>>());

    // protection vs fidelity actually measured: deviation nonzero, image intact
    let dsr = summary_value(&dir.join("out"), "dsr");
    assert!((0.0..=1.0).contains(&dsr));
    let ssim = summary_value(&dir.join("out"), "mean_ssim_input_vs_adv");
    assert!(ssim > 0.3, "protected images unrecognizable: ssim {ssim}");
    let l2 = summary_value(&dir.join("out"), "mean_l2_input_vs_adv");
    assert!(l2 > 0.0, "protection was a no-op");
}

#[test]
fn blackbox_round_trip_reports_queries_in_traces() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_face_batch(&dir.join("in"), 2, 2, (16, 16));
    write(
        &dir.join("run.toml"),
        r#"mode = "blackbox"
input_dir = "in"
output_dir = "out"

[blackbox]
t1 = 4
t2 = 2
k = 1
alpha = 0.05
inject_start_step = 2

[blackbox.nes]
n = 2
"#,
    );
    let out = run_cli(dir, &["protect", "--config", "run.toml"]);
    assert!(out.status.success(), "protect failed: {}", stderr_of(&out));

    // K t 2n + K + 1 = 1 * 2 * 4 + 1 + 1
    for name in ["face_000", "face_001"] {
        let trace =
            std::fs::read_to_string(dir.join("out/traces").join(format!("{name}.jsonl"))).unwrap();
        let last = trace.lines().last().unwrap();
        let v: serde_json::Value = serde_json::from_str(last).unwrap();
        assert_eq!(v["record"], "summary");
        assert_eq!(v["total_queries"], 10, "trace tail: {last}");
    }

    let out = run_cli(dir, &["evaluate", "--config", "run.toml"]);
    assert!(out.status.success(), "evaluate failed: {}", stderr_of(&out));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_face_batch(&dir.join("in"), 3, 3, (16, 16));
    write(&dir.join("run.toml"), &wb_config("out"));

    for cmd in ["protect", "evaluate"] {
        let out = run_cli(dir, &[cmd, "--config", "run.toml"]);
        assert!(out.status.success(), "{cmd}: {}", stderr_of(&out));
    }
    let first = dir_digest(&dir.join("out"));
    assert!(!first.is_empty());

    for cmd in ["protect", "evaluate"] {
        let out = run_cli(dir, &[cmd, "--config", "run.toml"]);
        assert!(out.status.success(), "{cmd}: {}", stderr_of(&out));
    }
    assert_eq!(first, dir_digest(&dir.join("out")), "rerun changed artifacts");
}

#[test]
fn worker_count_does_not_change_outputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_face_batch(&dir.join("in"), 4, 3, (16, 16));
    write(&dir.join("run.toml"), &wb_config("out"));

    let out = run_cli(dir, &["protect", "--config", "run.toml", "--workers", "1"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let serial = dir_digest(&dir.join("out"));

    let out = run_cli(dir, &["protect", "--config", "run.toml", "--workers", "3"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert_eq!(serial, dir_digest(&dir.join("out")));
}

#[test]
fn corrupt_input_gets_a_sidecar_and_the_rest_still_protects() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_face_batch(&dir.join("in"), 5, 2, (16, 16));
    std::fs::write(dir.join("in/broken.png"), b"not a png at all").unwrap();
    write(&dir.join("run.toml"), &wb_config("out"));

    let out = run_cli(dir, &["protect", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2), "codec failures are runtime errors");
    assert!(stderr_of(&out).contains("broken"));

    // every good image was still protected, the bad one left a sidecar
    assert!(dir.join("out/protected/face_000.png").is_file());
    assert!(dir.join("out/protected/face_001.png").is_file());
    let sidecar = std::fs::read_to_string(dir.join("out/protected/broken.error.txt")).unwrap();
    assert!(sidecar.contains("png"), "sidecar says: {sidecar}");
    assert!(!dir.join("out/protected/broken.png").exists());
}

#[test]
fn missing_and_empty_input_directories_are_validation_errors() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write(&dir.join("run.toml"), &wb_config("out"));

    let out = run_cli(dir, &["protect", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("does not exist"));

    std::fs::create_dir_all(dir.join("in")).unwrap();
    let out = run_cli(dir, &["protect", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("no inputs"));
}

#[test]
fn config_errors_exit_with_the_validation_code() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_face_batch(&dir.join("in"), 6, 1, (16, 16));

    // trajectory violation: T2 > T1
    write(
        &dir.join("bad_t2.toml"),
        "mode = \"whitebox\"\ninput_dir = \"in\"\noutput_dir = \"out\"\n\n[whitebox]\nt1 = 4\nt2 = 9\n",
    );
    let out = run_cli(dir, &["protect", "--config", "bad_t2.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("T2"), "stderr: {}", stderr_of(&out));

    // cross-mode section: a whitebox run cannot carry blackbox settings
    write(
        &dir.join("cross.toml"),
        "mode = \"whitebox\"\ninput_dir = \"in\"\noutput_dir = \"out\"\n\n[blackbox]\nt1 = 8\n",
    );
    let out = run_cli(dir, &["protect", "--config", "cross.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("does not accept"));

    // unknown key rejected by the schema
    write(
        &dir.join("typo.toml"),
        "mode = \"whitebox\"\ninput_dir = \"in\"\noutput_dir = \"out\"\nseeed = 3\n",
    );
    let out = run_cli(dir, &["protect", "--config", "typo.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("parse error"));
}

#[test]
fn evaluate_alignment_error_names_the_offending_images() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_face_batch(&dir.join("in"), 7, 2, (16, 16));
    write(&dir.join("run.toml"), &wb_config("out"));
    let out = run_cli(dir, &["protect", "--config", "run.toml"]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    // one extra clean image that was never protected
    write_face_batch(&dir.join("extra"), 99, 1, (16, 16));
    std::fs::copy(dir.join("extra/face_000.png"), dir.join("in/straggler.png")).unwrap();

    let out = run_cli(dir, &["evaluate", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1), "alignment is a validation error");
    let err = stderr_of(&out);
    assert!(err.contains("misaligned") && err.contains("straggler"), "stderr: {err}");
}

#[test]
fn unprotected_copies_evaluate_to_zero_dsr() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let names = write_face_batch(&dir.join("in"), 8, 3, (16, 16));
    write(&dir.join("run.toml"), &wb_config("out"));

    std::fs::create_dir_all(dir.join("out/protected")).unwrap();
    for name in &names {
        std::fs::copy(
            dir.join("in").join(format!("{name}.png")),
            dir.join("out/protected").join(format!("{name}.png")),
        )
        .unwrap();
    }
    let out = run_cli(dir, &["evaluate", "--config", "run.toml"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert_eq!(summary_value(&dir.join("out"), "dsr"), 0.0);
    assert_eq!(summary_value(&dir.join("out"), "mean_l2_input_vs_adv"), 0.0);
}

#[test]
fn sweep_reports_the_average_of_the_four_areas() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_face_batch(&dir.join("in"), 9, 3, (16, 16));
    write(&dir.join("run.toml"), &wb_config("out"));
    let out = run_cli(dir, &["protect", "--config", "run.toml"]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let out = run_cli(dir, &["sweep", "--config", "run.toml"]);
    assert!(out.status.success(), "sweep failed: {}", stderr_of(&out));

    let curves = std::fs::read_to_string(dir.join("out/curves.csv")).unwrap();
    assert!(curves.starts_with("# veil-curves schema=1"));
    for family in ["jpeg", "gaussian_blur", "average_blur", "downscale"] {
        assert!(curves.contains(family), "curves.csv lacks {family}");
    }

    let auc_rows = csv_rows(&dir.join("out/auc_summary.csv"));
    assert_eq!(auc_rows.len(), 1);
    let row = &auc_rows[0];
    assert_eq!(row[0], "whitebox");
    let values: Vec<f64> = row[1..=5].iter().map(|v| v.parse().unwrap()).collect();
    let mean = (values[0] + values[1] + values[2] + values[3]) / 4.0;
    assert!(
        (values[4] - mean).abs() <= 1e-9,
        "avg {} vs mean of areas {mean}",
        values[4]
    );
    for v in &values[..4] {
        assert!((0.0..=1.0).contains(v), "area {v} out of range");
    }
}

#[test]
fn single_value_ablation_matches_a_hand_composed_run() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_face_batch(&dir.join("in"), 10, 2, (16, 16));

    write(
        &dir.join("plan.toml"),
        r#"axis = "alpha"
values = [0.1]

[base]
mode = "whitebox"
input_dir = "in"
output_dir = "ab"

[base.whitebox]
t1 = 8
t2 = 4
k = 2
alpha = 0.05
inject_start_step = 4
"#,
    );
    let out = run_cli(dir, &["ablate", "--config", "plan.toml"]);
    assert!(out.status.success(), "ablate failed: {}", stderr_of(&out));
    assert!(dir.join("ab/ablation.csv").is_file());
    assert!(dir.join("ab/alpha_0.1/protected/face_000.png").is_file());

    // the same settings by hand: alpha overridden to the axis value
    write(
        &dir.join("manual.toml"),
        r#"mode = "whitebox"
input_dir = "in"
output_dir = "manual"

[whitebox]
t1 = 8
t2 = 4
k = 2
alpha = 0.1
inject_start_step = 4
"#,
    );
    for cmd in ["protect", "evaluate"] {
        let out = run_cli(dir, &[cmd, "--config", "manual.toml"]);
        assert!(out.status.success(), "{cmd}: {}", stderr_of(&out));
    }

    let ablated = csv_rows(&dir.join("ab/alpha_0.1/report.csv"));
    let manual = csv_rows(&dir.join("manual/report.csv"));
    assert_eq!(ablated.len(), manual.len());
    for (a, m) in ablated.iter().zip(manual.iter()) {
        assert_eq!(a[0], m[0], "row order");
        // identical numbers; only the config hash in the comment differs
        for col in 1..a.len() {
            assert_eq!(a[col], m[col], "image {} column {col}", a[0]);
        }
    }

    // ablation table carries exactly one row for the single axis value
    let table = csv_rows(&dir.join("ab/ablation.csv"));
    assert_eq!(table.len(), 1);
    assert_eq!(table[0][0], "alpha");
    assert_eq!(table[0][1], "0.1");
}

#[test]
fn cli_overrides_are_recorded_in_the_run_config() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_face_batch(&dir.join("in"), 11, 1, (16, 16));
    write(&dir.join("run.toml"), &wb_config("out"));

    let out = run_cli(
        dir,
        &["protect", "--config", "run.toml", "--seed", "7", "--out-dir", "elsewhere"],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(!dir.join("out").exists(), "--out-dir was ignored");
    let recorded = std::fs::read_to_string(dir.join("elsewhere/run_config.toml")).unwrap();
    assert!(recorded.contains("seed = 7"), "recorded config:\n{recorded}");
}

#[test]
fn usage_errors_and_help_have_distinct_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();

    let out = run_cli(dir, &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8_lossy(&out.stdout).into_owned();
    for sub in ["protect", "evaluate", "sweep", "ablate"] {
        assert!(help.contains(sub), "help lacks {sub}");
    }

    let out = run_cli(dir, &["protect"]);
    assert_eq!(out.status.code(), Some(1), "missing --config is a usage error");

    let out = run_cli(dir, &["frobnicate", "--config", "x.toml"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run_cli(dir, &["protect", "--config", "nope.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("cannot read config"));
}
