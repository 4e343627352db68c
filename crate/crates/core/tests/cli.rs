use serde_json::{json, Value};
use std::fs;
use std::path::Path;
use stochdyn::cli::*;

fn run_in(dir: &Path, args: &[&str]) -> i32 {
    let mut full = vec!["stochdyn".to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    full.push("--out".into());
    full.push(dir.display().to_string());
    run_with_output(full, &mut std::io::sink())
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn zero_initial_state_gives_zero_norms() {
    let dir = tempfile::tempdir().unwrap();
    let code = run_in(dir.path(), &["simulate-forward", "--set", "initial={\"kind\":\"zero\"}"]);
    assert_eq!(code, EXIT_OK);
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["passed"], json!(true));
    assert_eq!(report["results"]["final_mean_energy"], json!(0.0));
    assert_eq!(report["results"]["energy"]["h1_ratio"], json!(0.0));
}

#[test]
fn reports_are_deterministic_across_runs_and_thread_counts() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["simulate-forward", "--set", "noise.backend=\"paths\"", "--set", "noise.paths=64", "--set", "coefficients.preset=\"constant\"", "--set", "time.n_t=16", "--seed", "7"];
    assert_eq!(run_in(a.path(), &args), EXIT_OK);
    assert_eq!(run_in(b.path(), &args), EXIT_OK);
    let mut threaded = args.to_vec();
    threaded.extend(["--threads", "3"]);
    assert_eq!(run_in(c.path(), &threaded), EXIT_OK);
    let ra = fs::read(a.path().join("report.json")).unwrap();
    assert_eq!(ra, fs::read(b.path().join("report.json")).unwrap());
    assert_eq!(ra, fs::read(c.path().join("report.json")).unwrap());
    let other = tempfile::tempdir().unwrap();
    let mut reseeded = args.to_vec();
    *reseeded.last_mut().unwrap() = "8";
    assert_eq!(run_in(other.path(), &reseeded), EXIT_OK);
    assert_ne!(ra, fs::read(other.path().join("report.json")).unwrap());
}

#[test]
fn unknown_key_is_a_schema_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["weights-report", "--set", "mesh.bogus=1"]), EXIT_SCHEMA);
    let err = load_config(None, &["mesh.bogus=1".into()], None).unwrap_err().to_string();
    assert!(err.contains("mesh.bogus"), "{err}");
    let err = load_config(None, &["time.n_t=\"many\"".into()], None).unwrap_err().to_string();
    assert!(err.contains("time.n_t"), "{err}");
    assert_eq!(run_in(dir.path(), &["no-such-command"]), EXIT_SCHEMA);
    assert_eq!(run_in(dir.path(), &["weights-report", "--set", "coefficients.preset=\"nope\""]), EXIT_SCHEMA);
}

#[test]
fn unmet_threshold_is_an_invariant_failure() {
    let dir = tempfile::tempdir().unwrap();
    let code = run_in(dir.path(), &["hum-control", "--set", "control.null_threshold=1e-9", "--set", "control.eps=[1e-1]"]);
    assert_eq!(code, EXIT_INVARIANT);
    assert_eq!(read_json(&dir.path().join("report.json"))["passed"], json!(false));
}

#[test]
fn convection_step_limit_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let code = run_in(dir.path(), &["simulate-forward", "--set", "coefficients.preset=\"constant\"", "--set", "time.n_t=2"]);
    assert_eq!(code, EXIT_NUMERICAL);
}

#[test]
fn manifest_echoes_the_resolved_config_and_tables_carry_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let code = run_in(dir.path(), &["simulate-forward", "--set", "output.trajectory=true"]);
    assert_eq!(code, EXIT_OK);
    let manifest = read_json(&dir.path().join("manifest.json"));
    let defaults = serde_json::to_value(ExperimentConfig { output: OutputConfig { trajectory: true, ..Default::default() }, ..Default::default() }).unwrap();
    assert_eq!(manifest["config"], defaults);
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(read_json(&dir.path().join("report.json"))["config_hash"], json!(hash));
    let csv = fs::read_to_string(dir.path().join("forward_energy.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().ends_with(",config_hash"));
    assert!(lines.all(|l| l.ends_with(&hash)));
    assert_eq!(&fs::read(dir.path().join("trajectory.bin")).unwrap()[..4], b"SDTR");
    for f in manifest["files"].as_array().unwrap() {
        assert!(dir.path().join(f.as_str().unwrap()).exists());
    }
}

#[test]
fn hash_ignores_the_output_directory() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    b.output.dir = Some("elsewhere".into());
    assert_eq!(a.hash(), b.hash());
    b.mesh.n_x = 33;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn overrides_build_nested_objects() {
    let mut root = json!({"mesh": {"n_x": 9}});
    apply_override(&mut root, "mesh.n_x=33").unwrap();
    apply_override(&mut root, "noise.backend=paths").unwrap();
    apply_override(&mut root, "control.eps=[0.1, 0.01]").unwrap();
    assert_eq!(root, json!({"mesh": {"n_x": 33}, "noise": {"backend": "paths"}, "control": {"eps": [0.1, 0.01]}}));
    assert!(apply_override(&mut root, "mesh.n_x.deeper=1").is_err());
    assert!(apply_override(&mut root, "no_equals_sign").is_err());
    assert!(apply_override(&mut root, "=3").is_err());
}

#[test]
fn every_subcommand_runs_with_a_small_config() {
    for cmd in [
        "simulate-forward",
        "simulate-backward",
        "hum-control",
        "aux-control",
        "verify-carleman",
        "verify-observability",
        "verify-duality",
        "verify-dissipation",
        "weights-report",
    ] {
        let dir = tempfile::tempdir().unwrap();
        let code = run_in(dir.path(), &[cmd]);
        assert_eq!(code, EXIT_OK, "{cmd}");
        assert_eq!(read_json(&dir.path().join("report.json"))["subcommand"], json!(cmd));
    }
}
