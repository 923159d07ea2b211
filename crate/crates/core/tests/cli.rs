use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cpcvar::cli::{dir_content_hash, LearnState};
use cpcvar::gcns::TaskLedger;
use cpcvar::harness::{run_sequence, BaselineKind, Lab, MetricsRecord, TaskSequence};
use cpcvar::model::{Group, VarModel};
use cpcvar::tokenizer::Tokenizer;

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpcvar"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .env_remove("CPCVAR_LOG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn pretrained(seed: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--config", tiny().to_str().unwrap(), "--seed", seed, "pretrain"]);
    dir
}

fn lab_from(dir: &Path) -> Lab {
    let cfg: cpcvar::cli::RunConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("pretrain.json")).unwrap()).unwrap();
    let curve = serde_json::from_value(record["val_curve"].clone()).unwrap();
    Lab::from_parts(
        &cfg.lab,
        cfg.seed,
        Tokenizer::load(&dir.join("tokenizer.cpc")).unwrap(),
        VarModel::load(&dir.join("base.cpc")).unwrap(),
        curve,
    )
    .unwrap()
}

#[test]
fn help_lists_every_config_key() {
    let out = Command::new(env!("CARGO_BIN_EXE_cpcvar")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    if std::env::var_os("CPCVAR_BLESS").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&golden).unwrap());
    assert!(text.contains(&cpcvar::cli::describe_keys(cpcvar::cli::Preset::Desk)));
}

#[test]
fn zero_step_pretrain_writes_loadable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--config", tiny().to_str().unwrap(), "pretrain", "--steps", "0"]);
    let m = VarModel::load(&dir.path().join("base.cpc")).unwrap();
    Tokenizer::load(&dir.path().join("tokenizer.cpc")).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["lab"]["pretrain"]["steps"], 0);
    assert_eq!(cfg["seed"], 0);
    assert_eq!(m.config.d_model, 16);
}

#[test]
fn pretraining_is_rerun_stable() {
    let a = pretrained("3");
    let b = pretrained("3");
    assert_eq!(dir_content_hash(a.path()).unwrap(), dir_content_hash(b.path()).unwrap());
    let c = pretrained("4");
    assert_ne!(dir_content_hash(a.path()).unwrap(), dir_content_hash(c.path()).unwrap());
}

#[test]
fn cli_learning_matches_the_harness_runner() {
    let dir = pretrained("5");
    let first = ok(dir.path(), &["learn", "v1"]);
    assert!(first.contains("overlap with history 0"), "{first}");
    ok(dir.path(), &["learn", "<v2>"]);
    ok(dir.path(), &["eval"]);
    let line = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let record: MetricsRecord = serde_json::from_str(line.trim()).unwrap();

    let lab = lab_from(dir.path());
    let seq = TaskSequence::new(vec![0, 1], "cli", &lab.concepts).unwrap();
    let r = run_sequence(&lab, &seq, BaselineKind::Gcns, None).unwrap();
    assert_eq!(record.scores, r.last().scores);
    assert_eq!(record.model_hash, r.last().model_hash);

    // the whole directory replays byte for byte
    let again = pretrained("5");
    ok(again.path(), &["learn", "v1"]);
    ok(again.path(), &["learn", "v2"]);
    ok(again.path(), &["eval"]);
    assert_eq!(dir_content_hash(dir.path()).unwrap(), dir_content_hash(again.path()).unwrap());
    assert!(dir.path().join("tasks/task2.cpc").exists());
}

#[test]
fn repeated_or_unknown_concepts_exit_with_state_code() {
    let dir = pretrained("1");
    ok(dir.path(), &["learn", "v1"]);
    let again = run(dir.path(), &["learn", "v1"]);
    assert_eq!(again.status.code(), Some(4));
    let missing = run(dir.path(), &["learn", "v9"]);
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("<v9>"));
    let gen = run(dir.path(), &["generate", "--prompt", "a <v3> on teal"]);
    assert_eq!(gen.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&gen.stderr).contains("<v3>"));
    // switching method mid-directory is refused
    assert_eq!(run(dir.path(), &["learn", "v2", "--method", "frozen"]).status.code(), Some(4));
}

#[test]
fn full_finetune_leaves_the_ledger_alone() {
    let dir = pretrained("2");
    ok(dir.path(), &["learn", "v1", "--method", "full_finetune"]);
    let ledger = TaskLedger::load(&dir.path().join("ledger.cpc")).unwrap();
    assert_eq!(ledger.next_task_id(), 1);
    let base = VarModel::load(&dir.path().join("base.cpc")).unwrap();
    let tuned = VarModel::load(&dir.path().join("model.cpc")).unwrap();
    for g in [Group::FeedForward, Group::SelfAttention, Group::Head] {
        let idx = base.store.group_indices(g);
        assert_ne!(base.store.hash_of(&idx), tuned.store.hash_of(&idx), "{g:?} should train");
    }
    let state: LearnState = serde_json::from_str(&std::fs::read_to_string(dir.path().join("state.json")).unwrap()).unwrap();
    assert_eq!(state.method, BaselineKind::FullFinetune);
    assert_eq!(state.reports[0].mask_popcount, None);
}

#[test]
fn frozen_eval_reports_no_forgetting() {
    let dir = pretrained("6");
    ok(dir.path(), &["learn", "v1", "--method", "frozen"]);
    ok(dir.path(), &["learn", "v2", "--method", "frozen"]);
    ok(dir.path(), &["eval"]);
    let line = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let record: MetricsRecord = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(record.scores.len(), 2);
    assert!(record.scores.iter().all(|s| s.forgetting_delta == 0.0));
}

#[test]
fn branchless_compose_reproduces_generate() {
    let dir = pretrained("7");
    ok(dir.path(), &["generate", "--prompt", "a photo of teal", "--images", "2"]);
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"global_prompt": "a photo of teal", "branches": [], "seed": 7}"#).unwrap();
    ok(dir.path(), &["compose", "--spec", spec.to_str().unwrap()]);
    let samples: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("generate/samples.json")).unwrap()).unwrap();
    let masks: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("compose/masks.json")).unwrap()).unwrap();
    assert_eq!(samples["samples"][0]["tokens"], masks["tokens"]);
    assert_eq!(
        std::fs::read(dir.path().join("generate/0.png")).unwrap(),
        std::fs::read(dir.path().join("compose/image.png")).unwrap()
    );
    assert!(masks["intervened"].as_array().unwrap().iter().all(|v| v == false));
}

#[test]
fn compose_with_a_learned_concept() {
    let dir = pretrained("8");
    ok(dir.path(), &["learn", "v1"]);
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"global_prompt": "a photo of gray", "branches": [{"prompt": "a <v1> on gray", "box": [0.0, 0.0, 1.0, 1.0]}], "s_start": 2}"#,
    )
    .unwrap();
    ok(dir.path(), &["compose", "--spec", spec.to_str().unwrap()]);
    let masks: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("compose/masks.json")).unwrap()).unwrap();
    assert_eq!(masks["intervened"], serde_json::json!([false, true, true]));
    std::fs::write(&spec, r#"{"global_prompt": "a <v4> on gray"}"#).unwrap();
    assert_eq!(run(dir.path(), &["compose", "--spec", spec.to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn lambda_grid_reports_four_rows() {
    let dir = pretrained("9");
    ok(dir.path(), &["ablate", "--grid", "lambda", "--jobs", "2"]);
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    let section = md.split("## Regularization weight").nth(1).unwrap();
    let rows: Vec<&str> = section
        .lines()
        .skip_while(|l| !l.starts_with("|---"))
        .skip(1)
        .take_while(|l| l.starts_with('|'))
        .collect();
    assert_eq!(rows.len(), 4, "{section}");
    for (row, l) in rows.iter().zip(["0.1", "1", "5", "20"]) {
        assert!(row.starts_with(&format!("| {l} ")), "{row}");
    }
}

#[test]
fn config_and_environment_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"lab": {"pretrain": {"stepz": 1}}}"#).unwrap();
    let out = run(dir.path(), &["--config", bad.to_str().unwrap(), "pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lab.pretrain.stepz"));
    assert_eq!(run(dir.path(), &["pretrain", "--jobs", "0"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["learn", "v1", "--method", "lora"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_cpcvar"))
        .args(["--out", dir.path().to_str().unwrap(), "--config", tiny().to_str().unwrap(), "pretrain"])
        .env("CPCVAR_LOG", "verbose")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tiny()).unwrap()).unwrap();
    v["lab"]["pretrain"]["lr"] = serde_json::json!(1e200);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = run(dir.path(), &["--config", cfg.to_str().unwrap(), "pretrain"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_artifacts_exit_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["learn", "v1"]).status.code(), Some(4));
    let p = pretrained("0");
    assert_eq!(run(p.path(), &["eval"]).status.code(), Some(4));
}
