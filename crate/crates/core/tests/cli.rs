use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mfstop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfstop")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn run_ok(command: &str, config: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = mfstop(&args);
    assert!(o.status.success(), "{command}: {}", String::from_utf8_lossy(&o.stderr));
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn base() -> Value {
    json!({
        "model": {"name": "decoupled_additive"},
        "grid": {"t0": 0.0, "T": 1.0, "n_steps": 4},
        "seed": 9,
        "initial": {"states": [[0.0, true], [0.3, true]]},
        "backend": {"kind": "lattice", "center": 0.0, "h": 0.3, "half_width": 6},
        "reps": 50,
    })
}

fn configs() -> Vec<(&'static str, Value, Vec<&'static str>)> {
    let mut simulate = base();
    simulate["rule"] = json!({"kind": "iid_uniform"});
    let mut policy = base();
    policy["noise"] = json!({"kind": "lattice", "h": 0.3});
    let mut chaos = base();
    chaos["model"] = json!({"name": "mean_reverter_to_mean"});
    chaos["initial"] = json!({"uniform": {"lo": -1.0, "hi": 1.0, "count": 8}});
    chaos["rule"] = json!({"kind": "iid_uniform"});
    chaos["chaos"] = json!({"ns": [2, 4, 8], "reps": 4, "k_max": 2, "tol": 1.0});
    let mut converge = base();
    converge["initial"] = json!({"states": [[0.0, true]]});
    converge["converge"] = json!({
        "ns": [1, 2],
        "reps": 40,
        "lattice": {"center": 0.0, "h": 0.3, "half_width": 6},
        "lsmc_paths": 100,
    });
    let mut derivatives = base();
    derivatives["derivatives"] = json!({"functionals": ["alive_mean", "log_product"], "ns": [1, 3], "states": 2});
    vec![
        ("simulate", simulate, vec!["paths.csv"]),
        ("solve", base(), vec!["solve.csv", "value_table.bin"]),
        ("policy-eval", policy, vec!["policy.csv"]),
        ("chaos", chaos, vec!["chaos.csv", "chaos_summary.txt"]),
        ("converge", converge, vec!["converge.csv"]),
        ("check-derivatives", derivatives, vec!["derivatives.csv"]),
    ]
}

#[test]
fn every_command_writes_outputs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    for (command, config, outputs) in configs() {
        let cfg = write_config(dir.path(), &format!("{command}.json"), &config);
        let first = dir.path().join(format!("{command}-a"));
        let second = dir.path().join(format!("{command}-b"));
        run_ok(command, &cfg, &first, &["--threads", "1"]);
        run_ok(command, &cfg, &second, &[]);
        let m = manifest(&first);
        assert_eq!(m["command"], command);
        assert_eq!(m["seed"], 9);
        assert_eq!(m["config_hash"], manifest(&second)["config_hash"]);
        for file in outputs {
            let a = fs::read(first.join(file)).unwrap_or_else(|_| panic!("{command}: missing {file}"));
            assert_eq!(a, fs::read(second.join(file)).unwrap(), "{command}: {file} differs between same-seed runs");
        }
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = base();
    config["rule"] = json!({"kind": "never"});
    let cfg = write_config(dir.path(), "sim.json", &config);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok("simulate", &cfg, &a, &[]);
    run_ok("simulate", &cfg, &b, &["--seed", "10"]);
    assert_eq!(manifest(&b)["seed"], 10);
    assert_ne!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
    assert_ne!(fs::read(a.join("paths.csv")).unwrap(), fs::read(b.join("paths.csv")).unwrap());
}

#[test]
fn policy_eval_reads_a_solved_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "solve.json", &base());
    let solved = dir.path().join("solved");
    run_ok("solve", &cfg, &solved, &[]);

    let mut config = base();
    config.as_object_mut().unwrap().remove("backend");
    config["table"] = json!(solved.join("value_table.bin"));
    config["noise"] = json!({"kind": "lattice", "h": 0.3});
    let cfg = write_config(dir.path(), "eval.json", &config);
    let out = dir.path().join("eval");
    run_ok("policy-eval", &cfg, &out, &[]);
    let csv = fs::read_to_string(out.join("policy.csv")).unwrap();
    assert!(csv.lines().count() >= 2, "{csv}");
}

#[test]
fn measure_file_initial_law() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m0.csv"), "weight,x1,i\n0.5,-0.5,1\n0.5,0.5,1\n").unwrap();
    let mut config = base();
    config["initial"] = json!({"measure_file": "m0.csv"});
    config["n"] = json!(4);
    config["rule"] = json!({"kind": "never"});
    let cfg = write_config(dir.path(), "sim.json", &config);
    let out = dir.path().join("out");
    run_ok("simulate", &cfg, &out, &[]);
    assert!(out.join("paths.csv").exists());
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = base();
    config["grid"]["n_steps"] = json!("four");
    let cfg = write_config(dir.path(), "bad.json", &config);
    let o = mfstop(&["solve", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.n_steps"), "{}", String::from_utf8_lossy(&o.stderr));

    let mut config = base();
    config.as_object_mut().unwrap().remove("seed");
    let cfg = write_config(dir.path(), "noseed.json", &config);
    let out = dir.path().join("noseed");
    let o = mfstop(&["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let mut config = base();
    config.as_object_mut().unwrap().remove("backend");
    let cfg = write_config(dir.path(), "nobackend.json", &config);
    let o = mfstop(&["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("backend"));
}
