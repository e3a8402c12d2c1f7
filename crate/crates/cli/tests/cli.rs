use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_flowpolicy");

const SMALL: &str = r#"
seed = 3

[task]
kind = "tilted_bandit"
dims = 1
beta = 1.0
n = 2000

[model]
hidden = [16, 16]
time_embed_width = 8

[critic]
kind = "analytic"

[pretrain]
steps = 6
batch_size = 32

[policy.gmpo_train]
steps = 6
batch_size = 32

[policy.gmpg_train]
steps = 2
batch_size = 8

[policy.gmpg_solver]
scheme = "midpoint"
steps = 4

[eval]
samples = 256
"#;

fn run(root: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .env("FLOWPOLICY_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn setup(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn loss_column(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect()
}

#[test]
fn missing_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let out = run(&root, &dir.path().join("nope.toml"), &["make-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!root.exists());
}

#[test]
fn bad_override_and_unknown_key_exit_2() {
    let (dir, cfg) = setup(SMALL);
    let out = run(dir.path(), &cfg, &["make-data", "--set", "policy.betta=3"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &cfg, &["make-data", "--set", "pretrain.steps=many"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_dependencies_checked() {
    let (dir, cfg) = setup(SMALL);
    assert_eq!(run(dir.path(), &cfg, &["pretrain"]).status.code(), Some(2));
    ok(&run(dir.path(), &cfg, &["make-data"]));
    let out = run(dir.path(), &cfg, &["train-gmpg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));
    let out = run(dir.path(), &cfg, &["train-gmpo", "--set", "critic.kind=\"iql\""]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_temperature_gmpo_matches_pretrain() {
    let (dir, cfg) = setup(SMALL);
    ok(&run(dir.path(), &cfg, &["make-data"]));
    ok(&run(dir.path(), &cfg, &["pretrain"]));
    ok(&run(dir.path(), &cfg, &["train-gmpo", "--set", "policy.beta=0"]));
    let run_dir = dir.path().join("run");
    let a = loss_column(&run_dir.join("pretrain_metrics.csv"));
    let b = loss_column(&run_dir.join("gmpo_metrics.csv"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert!(run_dir.join("resolved-train-gmpo.toml").exists());
    let resolved = fs::read_to_string(run_dir.join("resolved-train-gmpo.toml")).unwrap();
    assert!(resolved.contains("beta = 0"));
}

#[test]
fn reruns_are_bit_identical() {
    let (dir, cfg) = setup(SMALL);
    for sub in ["a", "b"] {
        let set = format!("output.dir={sub}");
        for stage in ["make-data", "pretrain", "train-gmpo", "train-gmpg"] {
            ok(&run(dir.path(), &cfg, &[stage, "--set", &set]));
        }
    }
    for f in ["dataset.csv", "pretrain_metrics.csv", "gmpo_metrics.csv", "gmpg_metrics.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn trajectories_have_t_plus_one_rows() {
    let (dir, cfg) = setup(SMALL);
    ok(&run(dir.path(), &cfg, &["make-data"]));
    ok(&run(dir.path(), &cfg, &["pretrain"]));
    ok(&run(dir.path(), &cfg, &["export-trajectories", "--checkpoint", "behavior", "-n", "1"]));
    let text = fs::read_to_string(dir.path().join("run/trajectories_behavior.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 33);
    assert!(rows.iter().all(|r| r.starts_with("0,")));
}

#[test]
fn other_stages_write_outputs() {
    let (dir, cfg) = setup(SMALL);
    for args in [
        vec!["make-data"],
        vec!["pretrain"],
        vec!["train-critic", "--set", "critic.kind=\"iql\"", "--set", "critic.steps=3", "--set", "critic.hidden=[8]"],
        vec!["sample", "--checkpoint", "behavior", "-n", "5"],
        vec!["logprob", "--checkpoint", "behavior", "-n", "4", "--set", "likelihood.solver.steps=8"],
        vec!["eval", "--checkpoint", "behavior"],
    ] {
        ok(&run(dir.path(), &cfg, &args));
    }
    let r = dir.path().join("run");
    for f in ["critic.ckpt", "critic_metrics.csv", "samples_behavior.csv", "logprob_behavior.csv", "eval_behavior.json"] {
        assert!(r.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(r.join("samples_behavior.csv")).unwrap().lines().count(), 6);
    assert_eq!(fs::read_to_string(r.join("logprob_behavior.csv")).unwrap().lines().count(), 5);
}

#[test]
fn eval_of_pretrained_bandit_behavior_is_centered() {
    let (dir, cfg) = setup(SMALL);
    let sets = ["--set", "pretrain.steps=1500", "--set", "pretrain.batch_size=128", "--set", "eval.samples=2048"];
    ok(&run(dir.path(), &cfg, &["make-data"]));
    ok(&run(dir.path(), &cfg, &[&["pretrain"][..], &sets].concat()));
    let out = run(dir.path(), &cfg, &[&["eval", "--checkpoint", "behavior"][..], &sets].concat());
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("run/eval_behavior.json")).unwrap()).unwrap();
    let mean = report["action_mean"][0].as_f64().unwrap();
    let std = report["action_std"][0].as_f64().unwrap();
    assert!(mean.abs() < 0.15, "mean {mean}");
    assert!((std - 1.0).abs() < 0.15, "std {std}");
}

#[test]
fn divergence_exits_4() {
    let (dir, cfg) = setup(SMALL);
    ok(&run(dir.path(), &cfg, &["make-data"]));
    let out = run(dir.path(), &cfg, &["pretrain", "--set", "pretrain.lr=1e300", "--set", "pretrain.steps=20"]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
