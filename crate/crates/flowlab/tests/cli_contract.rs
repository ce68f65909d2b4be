//! The binary's external contract: exit codes, artifact files, stderr field
//! paths, stdout stability, and bit-identical reruns across thread settings.

use std::path::Path;
use std::process::{Command, Output};

fn flowlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("FLOWLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const PAIR_CONFIG: &str = r#"
seed = 7
out = "art"

[mc]
paths = 64

[pair]
base = { kind = "ou", lambda = 1.0, sigma = 1.0, d = 1 }
perturbed = { kind = "ou", lambda = 1.0, sigma = 0.5, d = 1 }

[domain]
t = 1.0
x0 = [1.0]

[mesh]
h = 0.015625
H = 0.125
"#;

const EXPERIMENT_CONFIG: &str = r#"
seed = 3
out = "art"

[experiment]
name = "decay-rates"
model = { kind = "ou", lambda = 1.0, sigma = 1.0, d = 2 }
x0 = [0.5, 0.5]
times = [1.0, 2.0]
paths = 96
scan_samples = 32
"#;

#[test]
fn help_version_and_list_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"][..], &["list"][..]] {
        let out = flowlab(args, dir.path());
        assert_eq!(out.status.code(), Some(0), "{args:?}");
    }
    let a = flowlab(&["list"], dir.path());
    let b = flowlab(&["list"], dir.path());
    assert_eq!(a.stdout, b.stdout, "list output must be stable");
    let text = String::from_utf8(a.stdout).unwrap();
    for name in ["ou", "gbm", "langevin-tanh", "frozen-drift", "mean-field", "decay-rates"] {
        assert!(text.contains(name), "list is missing {name}");
    }
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();

    let out = flowlab(&["moments"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let no_seed = write(dir.path(), "noseed.toml", "[mc]\npaths = 16");
    let out = flowlab(&["check", "--config", &no_seed], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`seed`"));

    let bad_mesh = write(
        dir.path(),
        "mesh.toml",
        "seed = 1\n[mesh]\nh = 0.03\nH = 0.1\n",
    );
    let out = flowlab(&["check", "--config", &bad_mesh], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mesh.H"));

    let unknown_key = write(dir.path(), "unk.toml", "seed = 1\nsede = 2\n");
    let out = flowlab(&["check", "--config", &unknown_key], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = flowlab(&["--no-such-flag", "list"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn estimator_subcommands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", PAIR_CONFIG);

    let out = flowlab(&["moments", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("art/moments.json").is_file());

    let out = flowlab(&["decompose", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("art/decompose.csv")).unwrap();
    assert!(csv.starts_with("H,mean_residual,stderr,diverged_paths"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("art/decompose.json")).unwrap())
            .unwrap();
    assert!(json["convergence"].is_array());
    assert!(json["sample_path"]["lhs"].is_array());
}

#[test]
fn run_exits_zero_on_pass_and_writes_canonical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", EXPERIMENT_CONFIG);

    let out = flowlab(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("PASS "), "no PASS lines:\n{stdout}");
    assert!(!stdout.contains("FAIL "), "unexpected FAIL:\n{stdout}");

    let json = std::fs::read(dir.path().join("art/decay-rates.json")).unwrap();
    let csv = std::fs::read(dir.path().join("art/decay-rates.csv")).unwrap();
    let parsed: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert_eq!(parsed["wall_time_secs"], 0.0, "artifact must be canonical");
    assert_eq!(parsed["name"], "decay-rates");

    // Rerun in a fresh directory: byte-identical artifacts, also under a
    // different thread setting.
    let dir2 = tempfile::tempdir().unwrap();
    let cfg2 = write(dir2.path(), "exp.toml", EXPERIMENT_CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args(["run", "--config", &cfg2, "--threads", "3"])
        .current_dir(dir2.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json, std::fs::read(dir2.path().join("art/decay-rates.json")).unwrap());
    assert_eq!(csv, std::fs::read(dir2.path().join("art/decay-rates.csv")).unwrap());
}

#[test]
fn run_exits_two_when_a_verdict_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "fail.toml",
        r#"
seed = 3
out = "art"

[experiment]
name = "uniform-difference"
base = { kind = "gbm", beta = 0.1, alpha = 0.2 }
perturbed = { kind = "gbm", beta = 0.1, alpha = 0.3 }
times = [2.0, 4.0, 8.0]
paths = 96
steps_per_unit = 32
scan_samples = 16
"#,
    );
    let out = flowlab(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("FAIL "), "missing FAIL line:\n{stdout}");
    // The artifact is still written for failed runs.
    assert!(dir.path().join("art/uniform-difference.json").is_file());
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", PAIR_CONFIG);
    let a = flowlab(&["moments", "--config", &cfg], dir.path());
    let b = flowlab(&["moments", "--config", &cfg, "--seed", "8"], dir.path());
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    assert_ne!(a.stdout, b.stdout, "a different seed must change the estimate");
}

#[test]
fn env_var_threads_must_parse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", PAIR_CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args(["moments", "--config", &cfg])
        .current_dir(dir.path())
        .env("FLOWLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("threads"));
}

#[test]
fn oracle_reports_the_closed_forms_used_by_the_tests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "oracle.toml",
        &format!("{PAIR_CONFIG}\n[oracle]\nmodel = {{ kind = \"ou\", lambda = 1.0, sigma = 1.0, d = 1 }}\n"),
    );
    let out = flowlab(&["oracle", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("art/oracle.json")).unwrap())
            .unwrap();
    // Equal-rate constant-diffusion pair in the config: the Skorohod
    // diagonal is reported alongside the moments.
    assert!(json["skorohod_diagonal"].as_f64().unwrap() > 0.0);
    assert!(json["flow_moment"].as_f64().unwrap() > 0.0);
}
