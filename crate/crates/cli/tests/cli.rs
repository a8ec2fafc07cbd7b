//! Drives the `rlfb` binary on a tiny config in a scratch directory.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 4

[world]
pretrain_size = 300
adapt_size = 8
test_size = 8
lm_source_size = 120
lm_target_size = 60
min_entity_count = 2

[policy]
hidden = 16

[pretrain]
epochs = 2

[lm]
hidden = 16
epochs = 1

[train]
epochs = 1
batch_size = 8
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn out(&self) -> std::path::PathBuf {
        self.dir.path().join("runs")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rlfb"))
            .arg("--config")
            .arg(self.dir.path().join("tiny.toml"))
            .args(args)
            .env("RLFB_OUT", self.out())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(
            o.status.success(),
            "rlfb {args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn unknown_algorithm_is_a_usage_error_listing_choices() {
    let s = Sandbox::new();
    let o = s.run(&["adapt", "--algo", "ppo"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for a in ["self", "raft", "dpo", "grpo", "rescore"] {
        assert!(err.contains(a), "{err}");
    }
}

#[test]
fn bad_config_key_exits_with_usage_code() {
    let s = Sandbox::new();
    let o = s.run(&["--set", "beam.widht=3", "world"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("widht"));
}

#[test]
fn missing_prerequisite_names_the_stage_to_run() {
    let s = Sandbox::new();
    s.ok(&["world"]);
    let o = s.run(&["adapt", "--algo", "raft"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("pretrain") && err.contains("first"), "{err}");

    let o = s.run(&["report"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("eval"));
}

#[test]
fn staged_run_writes_metrics_and_reruns_identically() {
    let s = Sandbox::new();
    s.ok(&["world"]);
    s.ok(&["pretrain"]);
    s.ok(&["train-lm"]);
    let adapt = s.ok(&["adapt", "--algo", "raft"]);
    assert!(adapt.starts_with("raft checkpoint "));
    let written = s.ok(&["eval"]);
    assert_eq!(written.lines().count(), 2, "{written}");

    let eval = s.out().join("seed-4").join("eval");
    let raft = read_json(&eval.join("raft.json"));
    for key in ["algo", "seed", "checkpoint_id", "rows", "macro_average", "lineage"] {
        assert!(raft.get(key).is_some(), "missing {key}");
    }
    assert_eq!(raft["algo"], "raft");
    assert_eq!(raft["seed"], 4);
    let baseline = read_json(&eval.join("baseline.json"));
    assert_eq!(baseline["lineage"], raft["lineage"]);

    let table = s.ok(&["report"]);
    assert!(table.contains("RAFT") && table.contains("Baseline"), "{table}");

    let first = fs::read(eval.join("raft.json")).unwrap();
    s.ok(&["adapt", "--algo", "raft"]);
    s.ok(&["eval"]);
    assert_eq!(fs::read(eval.join("raft.json")).unwrap(), first);
}
