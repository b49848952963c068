//! End-to-end tests of the binary: subcommand wiring, artifact layout, and
//! exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_plantree"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("plantree-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        r#"
n_train = 24
n_heldout = 12
rounds = 1
feature_dim = 8192
seed = 5
value_epochs = 8

[search_round1]
n_simulations = 72

[search_round2]
n_simulations = 32
"#,
    )
    .unwrap();
    path
}

#[test]
fn gen_sft_apo_value_eval_chain() {
    let dir = temp_dir("chain");
    let config = write_tiny_config(&dir);
    let out = dir.join("out");

    let status = bin()
        .args(["gen", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for artifact in [
        "problems_train.jsonl",
        "problems_heldout.jsonl",
        "round1/trees.jsonl",
        "round1/pairs.jsonl",
        "round1/sft.jsonl",
        "round1/stats.json",
    ] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }

    let status = bin()
        .args(["sft", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("round1/policy_sft.json").exists());

    for objective in ["step-apo", "step-dpo", "dpo"] {
        let status = bin()
            .args(["apo", "--objective", objective, "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "apo --objective {objective}");
    }
    assert!(out.join("round1/policy_step_apo.json").exists());
    assert!(out.join("round1/policy_step_dpo.json").exists());
    assert!(out.join("round1/policy_dpo.json").exists());

    // re-extraction from dumps under a different strategy
    let status = bin()
        .args(["apo", "--objective", "step-apo", "--pair-strategy", "one-plan-one-solution"])
        .arg("--trees")
        .arg(out.join("round1/trees.jsonl"))
        .args(["--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());

    let status = bin()
        .args(["value-fit", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("round1/value.json").exists());

    let output = bin()
        .args(["eval", "--policy"])
        .arg(out.join("round1/policy_step_apo.json"))
        .args(["--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("accuracy"), "eval output: {text}");

    let output = bin()
        .args(["stats", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("pos:neg"), "stats output: {text}");

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gen_is_deterministic() {
    let dir = temp_dir("determinism");
    let config = write_tiny_config(&dir);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args(["gen", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let trees_a = std::fs::read(out_a.join("round1/trees.jsonl")).unwrap();
    let trees_b = std::fs::read(out_b.join("round1/trees.jsonl")).unwrap();
    assert_eq!(trees_a, trees_b, "identical config and seed give identical trees");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn pipeline_writes_report_and_manifest() {
    let dir = temp_dir("pipeline");
    let config = write_tiny_config(&dir);
    let out = dir.join("out");
    let output = bin()
        .args(["pipeline", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("held-out accuracy"));
    for artifact in ["report.json", "report.txt", "manifest.json"] {
        assert!(out.join(artifact).exists());
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn dump_tree_prints_preorder_json() {
    let dir = temp_dir("dump");
    let config = write_tiny_config(&dir);
    let out = dir.join("out");
    // find a valid problem id first
    let status = bin()
        .args(["gen", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let first = std::fs::read_to_string(out.join("problems_train.jsonl")).unwrap();
    let id = serde_json::from_str::<serde_json::Value>(first.lines().next().unwrap()).unwrap()
        ["id"]
        .as_str()
        .unwrap()
        .to_string();

    let output = bin()
        .args(["dump-tree", "--problem", &id, "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let dump: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("dump is valid JSON");
    assert_eq!(dump["problem_id"], id.as_str());
    let nodes = dump["nodes"].as_array().unwrap();
    assert!(!nodes.is_empty());
    assert_eq!(nodes[0]["id"], 0);
    assert!(nodes[0]["parent_id"].is_null());
    for field in ["action_display", "action_kind", "n", "v", "q_edge", "terminal"] {
        assert!(nodes[1].get(field).is_some(), "node missing {field}");
    }

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    let dir = temp_dir("exits");

    // unknown flag: usage error -> 1
    let status = bin().args(["gen", "--no-such-flag"]).status().unwrap();
    assert_eq!(status.code(), Some(1));

    // malformed config: usage error -> 1
    let bad_config = dir.join("bad.toml");
    std::fs::write(&bad_config, "rounds = 0").unwrap();
    let status = bin()
        .args(["pipeline", "--config"])
        .arg(&bad_config)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    // missing checkpoint file: runtime error -> 2
    let status = bin()
        .args(["eval", "--policy"])
        .arg(dir.join("missing.json"))
        .arg("--out-dir")
        .arg(&dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // help exits 0
    let status = bin().arg("--help").status().unwrap();
    assert_eq!(status.code(), Some(0));

    std::fs::remove_dir_all(&dir).ok();
}
