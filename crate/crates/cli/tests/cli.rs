use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "smoke"
checkpoint_interval = 0

[dataset]
kind = "synthetic"

[dataset.synthetic]
classes = 4
train_per_class = 8
test_per_class = 6
image = [3, 8, 8]
margin = 2.0
blobs = 1
seed = 1

[net]
num_classes = 4
branches = 3
input = [3, 8, 8]
trunk = [{ channels = 4, convs = 1 }]
branch = [{ channels = 8, convs = 1 }]

[train]
batch_size = 16
init_seed = 0
shuffle_seed = 1

[train.distill]
alpha = 1.0
beta = 2.0
gamma = 5e-8
temperature = 3.0

[train.optim]
momentum = 0.9
weight_decay = 5e-4
nesterov = true

[train.schedule]
base_lr = 0.1
milestones = [1]
factor = 0.1
epochs = 2

[eval]
interval = 1
batch_size = 64
"#;

fn mbkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbkd")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn train_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let config = config.to_str().unwrap();
    let runs = dir.path().join("runs");
    let summary = json(&mbkd(&["train", "--config", config, "--out-dir", runs.to_str().unwrap()]));
    assert_eq!(summary["epochs"], 2);
    let run_dir = PathBuf::from(summary["run_dir"].as_str().unwrap());
    assert!(run_dir.starts_with(&runs));
    assert!(run_dir.join("leader.ckpt").is_file());

    let leader = run_dir.join("leader.ckpt");
    let report = json(&mbkd(&["evaluate", "--config", config, "--checkpoint", leader.to_str().unwrap()]));
    assert_eq!(report["kind"], "leader");
    assert_eq!(report["top1"], summary["final"]["leader_top1"]);

    let out = mbkd(&["export", run_dir.to_str().unwrap(), "--format", "csv"]);
    assert!(out.status.success());
    let csv_path = String::from_utf8(out.stdout).unwrap();
    let csv = std::fs::read_to_string(csv_path.trim()).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,"));

    let out = mbkd(&["export", run_dir.to_str().unwrap(), "--format", "yaml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("yaml"));
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let config = config.to_str().unwrap();
    let out = dir.path().to_str().unwrap();
    let a = json(&mbkd(&["train", "--config", config, "--out-dir", out]));
    let b = json(&mbkd(&["train", "--config", config, "--out-dir", out, "--seed-override", "5"]));
    assert_ne!(a["config_hash"], b["config_hash"]);
    assert_ne!(a["run_dir"], b["run_dir"]);
}

#[test]
fn ablate_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}\n[ablation]\nmechanisms = [\"gate\", \"ffm\"]\ncd = [true]\n",
        CONFIG.replace("epochs = 2", "epochs = 1").replace("milestones = [1]", "milestones = []")
    );
    let config = write_config(dir.path(), &text);
    let out = mbkd(&["ablate", "--config", config.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.contains("| gate |") && table.contains("| ffm |"), "{table}");
}

#[test]
fn invalid_config_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let bad = CONFIG.replace("batch_size = 16", "batch_size = 0").replace("temperature = 3.0", "temperature = -1.0");
    let config = write_config(dir.path(), &bad);
    let out = mbkd(&["train", "--config", config.to_str().unwrap(), "--out-dir", dir.path().join("runs").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batch_size") && err.contains("temperature"), "{err}");
    assert!(!dir.path().join("runs").exists());

    let out = mbkd(&["train", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn help_lists_the_verbs() {
    let out = mbkd(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for verb in ["train", "evaluate", "ablate", "export"] {
        assert!(text.contains(verb), "{text}");
    }
}
