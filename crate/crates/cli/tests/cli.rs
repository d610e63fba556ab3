use std::path::Path;
use std::process::{Command, Output};

fn sbdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbdg")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SPEC: &str = r#"
num_domains = 3
num_classes = 2
input_dim = 2
geometry_seed = 1

[counts.law]
majority = 20
minority = 4
minority_cells = [[0, 1]]
"#;

fn write_experiment(dir: &Path, arms: &str, seeds: &str) -> std::path::PathBuf {
    let cfg = format!(
        r#"
[dataset]
seed = 2
eval_per_cell = 6

[dataset.generate]
num_domains = 3
num_classes = 2
input_dim = 2
counts = {{ law = {{ majority = 20, minority = 4, minority_cells = [[0, 1]] }} }}

[train]
iterations = 4
alpha = 0.1
beta = 0.5
n_per_domain = 4
m_per_domain = 2
task_hidden = [4]
reweight_hidden = 3
snapshot_every = 2

[protocol]
kind = "single-split"
meta_per_pair = 2

[run]
arms = {arms}
seeds = {seeds}
out = "{}"
"#,
        dir.join("runs").display()
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn generate_writes_csv_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = sbdg(&["generate", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["counts"][0][1], 4);
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn generate_reports_missing_counts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "num_domains = 3\nnum_classes = 2\ninput_dim = 2\n").unwrap();
    let o = sbdg(&["generate", "--spec", spec.to_str().unwrap(), "--out", dir.path().join("x.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("counts"));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn train_runs_every_arm_and_seed_then_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_experiment(dir.path(), r#"["sbdg", "erm"]"#, "[1, 2, 3, 4, 5]");
    let o = sbdg(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = dir.path().join("runs");
    let mut histories = 0;
    for arm in ["sbdg", "erm"] {
        for seed in 1..=5 {
            let run = runs.join("target-2").join(arm).join(format!("seed-{seed}"));
            assert!(run.join("history.csv").exists());
            assert!(run.join("config.toml").exists());
            assert!(run.join("theta.json").exists());
            assert!(run.join("metrics.json").exists());
            assert_eq!(run.join("psi.json").exists(), arm == "sbdg");
            histories += 1;
        }
    }
    assert_eq!(histories, 10);

    let report = dir.path().join("report.txt");
    let o = sbdg(&["report", "--runs", runs.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(o.status.success());
    let table = std::fs::read_to_string(&report).unwrap();
    assert!(table.contains("sbdg") && table.contains("erm") && table.contains("target 2"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 2);
    assert!(json["ablation"].is_null());
}

#[test]
fn flags_override_the_config_and_ablation_block_appears() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_experiment(dir.path(), r#"["erm"]"#, "[1]");
    let out = dir.path().join("elsewhere");
    let o = sbdg(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--arms",
        "sbdg,sbdg-no-domain-vector",
        "--seeds",
        "7",
        "--iterations",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("runs").exists());
    let frozen = std::fs::read_to_string(out.join("target-2/sbdg-no-domain-vector/seed-7/config.toml")).unwrap();
    assert!(frozen.contains("iterations = 3"));
    let o = sbdg(&["report", "--runs", out.to_str().unwrap(), "--out", dir.path().join("r.txt").to_str().unwrap()]);
    assert!(stdout(&o).contains("domain vector"));
}

#[test]
fn report_on_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = sbdg(&["report", "--runs", dir.path().to_str().unwrap(), "--out", dir.path().join("r.txt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diverging_run_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_experiment(dir.path(), r#"["erm"]"#, "[1]");
    let o = sbdg(&["train", "--config", cfg.to_str().unwrap(), "--alpha", "1e300"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAILED"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[run]\narms = []\nseeds = [1]\nout = \"x\"\n[dataset]\n").unwrap();
    assert_eq!(sbdg(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(sbdg(&["train"]).status.code(), Some(1));
}

#[test]
fn gradcheck_lists_every_op_and_catches_a_corrupted_sigmoid() {
    let o = sbdg(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for op in [
        "matmul", "add_bias", "add", "mul", "scale", "relu", "sigmoid", "concat", "reshape", "sum", "mean",
        "weighted_sum", "softmax_xent", "task_mlp", "reweight_net", "meta_gradient",
    ] {
        assert!(text.lines().any(|l| l.starts_with(op)), "missing {op}");
    }
    let o = sbdg(&["gradcheck", "--inject-fault", "sigmoid"]);
    assert_eq!(o.status.code(), Some(2));
}
