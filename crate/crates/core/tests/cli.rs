use std::path::Path;
use std::process::{Command, Output};

use massdrift::cli::ExperimentConfig;

fn massdrift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_massdrift")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const EVOLVE: &str = r#"{
    "experiment": "evolve",
    "model": {"kind": "lattice", "dimension": 1, "radius": 20},
    "law": {"kind": "simple"},
    "schedule": {"n_steps": 8, "every": 2},
    "windows": [{"lo": [0], "hi": [0]}, {"lo": [-2], "hi": [2]}]
}"#;

#[test]
fn evolve_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "evolve.json", EVOLVE);
    let out = dir.path().join("out");
    let result = massdrift(&["run", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("evolve.csv")).unwrap();
    assert!(csv.starts_with("n,window,mass,total_mass,absorbed,pruned\n"));
    assert!(csv.contains("\n8,{0},0.2734375,"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["experiment"], "evolve");
    assert_eq!(summary["params_hash"].as_str().unwrap().len(), 16);
    assert_eq!(summary["verdicts"][0]["passed"], true);
}

#[test]
fn fiber_verify_passes_on_two_element_group() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "fiber.json",
        r#"{"experiment": "fiber-verify", "fiber": {"group": "Z2"}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(massdrift(&["run", &config, "--out", out.to_str().unwrap()]).status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["max_residuals"]["phi-formula-vs-direct"].as_f64().unwrap() < 1e-12);
    assert!(summary["verdicts"].as_array().unwrap().iter().all(|v| v["passed"] == true));
}

#[test]
fn negative_steps_exit_one_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad.json", &EVOLVE.replace("\"n_steps\": 8", "\"n_steps\": -8"));
    let result = massdrift(&["run", &config]);
    assert_eq!(result.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&result.stderr).contains("\"/schedule/n_steps\""));
}

#[test]
fn unknown_keys_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad.json", &EVOLVE.replace("\"law\"", "\"lawz\""));
    assert_eq!(massdrift(&["run", &config]).status.code(), Some(1));
}

#[test]
fn missing_config_exits_one() {
    assert_eq!(massdrift(&["run", "/nonexistent/config.json"]).status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "evolve.json", EVOLVE);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out = blocker.join("out");
    assert_eq!(massdrift(&["run", &config, "--out", out.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn failed_verdict_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "expect.json",
        &EVOLVE.replace("\"schedule\"", "\"expect\": {\"final_at_most\": 0.01}, \"schedule\""),
    );
    assert_eq!(massdrift(&["run", &config]).status.code(), Some(2));
}

#[test]
fn semantic_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "rot.json",
        r#"{"experiment": "sl2",
            "ensemble": {"chart": "sl2-lattice", "n_walkers": 10, "n_steps": 5, "master_seed": 1,
                         "schedule": {"every": 1},
                         "generators": {"a": [0.0, -1.0, 1.0, 0.0], "b": [0.6, -0.8, 0.8, 0.6]}}}"#,
    );
    let result = massdrift(&["run", &config]);
    assert_eq!(result.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&result.stderr).contains("spectral radius"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "schottky.json",
        r#"{"experiment": "schottky",
            "ensemble": {"chart": "schottky", "n_walkers": 300, "n_steps": 30, "master_seed": 5,
                         "schedule": {"every": 10}}}"#,
    );
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        assert_eq!(massdrift(&["run", &config, "--out", out.to_str().unwrap()]).status.code(), Some(0));
        outputs.push((
            std::fs::read(out.join("schottky.csv")).unwrap(),
            std::fs::read(out.join("summary.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn overrides_change_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "evolve.json", EVOLVE);
    let hash = |extra: &[&str], sub: &str| {
        let out = dir.path().join(sub);
        let mut args = vec!["run", config.as_str(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert_eq!(massdrift(&args).status.code(), Some(0));
        let text = std::fs::read_to_string(out.join("summary.json")).unwrap();
        serde_json::from_str::<serde_json::Value>(&text).unwrap()["params_hash"].clone()
    };
    assert_ne!(hash(&[], "plain"), hash(&["--n-steps", "6"], "short"));
}

#[test]
fn schema_is_json() {
    let result = massdrift(&["schema"]);
    assert_eq!(result.status.code(), Some(0));
    let schema: serde_json::Value = serde_json::from_slice(&result.stdout).unwrap();
    assert!(schema["properties"]["experiment"].is_object());
}

#[test]
fn verify_suites() {
    for suite in ["fibers", "invariance"] {
        let result = massdrift(&["verify", suite]);
        assert_eq!(result.status.code(), Some(0), "{suite}");
        let summary: serde_json::Value = serde_json::from_slice(&result.stdout).unwrap();
        assert!(summary["verdicts"].as_array().unwrap().iter().all(|v| v["passed"] == true));
    }
    assert_eq!(massdrift(&["verify", "nothing"]).status.code(), Some(1));
    assert_eq!(massdrift(&["--help"]).status.code(), Some(0));
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let config = ExperimentConfig::load(&path).unwrap();
        let canonical = config.canonical_json();
        assert_eq!(ExperimentConfig::from_json(&canonical).unwrap().canonical_json(), canonical);
        count += 1;
    }
    assert_eq!(count, 10);
}
