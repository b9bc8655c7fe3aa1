use std::path::Path;
use std::process::{Command, Output};

fn chantrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chantrack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn lists_every_scenario() {
    let o = chantrack(&["list-scenarios"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["em_convergence", "mse_vs_snr", "mse_vs_bits", "tracking_example", "mse_vs_block"] {
        assert!(text.contains(name), "{name} missing from {text}");
    }
}

#[test]
fn configuration_errors_exit_with_2() {
    assert_eq!(chantrack(&["run", "--scenario", "nope"]).status.code(), Some(2));
    assert_eq!(chantrack(&["validate-config"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"scenario": "mse_vs_snr", "bogus_key": 1}"#);
    assert_eq!(chantrack(&["validate-config", "--config", &cfg]).status.code(), Some(2));

    let cfg = write_config(dir.path(), r#"{"scenario": "mse_vs_snr", "n": 8, "p": 0}"#);
    assert_eq!(chantrack(&["validate-config", "--config", &cfg]).status.code(), Some(2));

    let missing = dir.path().join("absent.json");
    let o = chantrack(&["validate-config", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn command_line_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"scenario": "mse_vs_bits", "seed": 5, "num_trials": 7}"#);
    let o = chantrack(&["validate-config", "--config", &cfg, "--seed", "9", "--snr", "3,4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["scenario"], "mse_vs_bits");
    assert_eq!(v["seed"], 9);
    assert_eq!(v["num_trials"], 7);
    assert_eq!(v["snr_db"], serde_json::json!([3.0, 4.0]));
}

#[test]
fn paper_scale_sets_the_large_sizes() {
    let o = chantrack(&["validate-config", "--scenario", "em_convergence", "--paper-scale"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!((v["n"].as_u64(), v["m"].as_u64()), (Some(128), Some(32)));
}

#[test]
fn run_writes_deterministic_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"scenario": "tracking_example", "n": 16, "m": 6, "p": 4, "track_blocks": 6, "em_iters": 2}"#,
    );
    let mut texts = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = chantrack(&[
            "run",
            "--config",
            &cfg,
            "--trials",
            "2",
            "--bits",
            "0,3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(out.join("tracking_example.csv")).unwrap();
        assert!(out.join("tracking_example.dat").exists());
        assert!(out.join("tracking_example_log.csv").exists());
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# chantrack "));
        assert_eq!(
            lines.next().unwrap(),
            "scenario,snr_db,quantizer,x_name,x,metric,statistic,num_trials,value,value_db"
        );
        texts.push(lines.collect::<Vec<_>>().join("\n"));
    }
    assert!(!texts[0].is_empty());
    assert_eq!(texts[0], texts[1]);
    assert!(texts[0].contains("uniform-3"));
}
