//! Command-line contract: exit codes, artifacts and seeding.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn promptseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .env_remove("PROMPTSEG_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_scene_dirs_and_queries() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let out = promptseg(&["gen", "--out", p(&d), "--scenes", "10", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let scenes = std::fs::read_dir(d.join("scenes"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(scenes, 10);
    let queries = std::fs::read_to_string(d.join("queries.jsonl")).unwrap();
    assert_eq!(queries.lines().count(), 10);
    assert_eq!(read_json(&d.join("gen_config.json"))["seed"], 7);
}

#[test]
fn gen_per_category_plan_has_one_query_per_category() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let out = promptseg(&[
        "gen",
        "--out",
        p(&d),
        "--scenes",
        "4",
        "--seed",
        "1",
        "--queries",
        "per-category",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let queries = std::fs::read_to_string(d.join("queries.jsonl")).unwrap();
    assert_eq!(queries.lines().count(), 4 * 5);
}

#[test]
fn missing_checkpoint_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert!(
        promptseg(&["gen", "--out", p(&d), "--scenes", "2", "--seed", "1"])
            .status
            .success()
    );
    let none = tmp.path().join("none.json");
    let out = promptseg(&[
        "eval",
        "--data",
        p(&d),
        "--policy",
        p(&none),
        "--report",
        p(&tmp.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(p(&none)), "{}", stderr(&out));
}

#[test]
fn missing_data_dir_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = promptseg(&[
        "train",
        "--data",
        p(&missing),
        "--out",
        p(&tmp.path().join("c.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_exits_2_with_usage() {
    let out = promptseg(&["gen", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).to_lowercase().contains("usage"),
        "{}",
        stderr(&out)
    );
    assert_eq!(promptseg(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn check_format_scores_each_line() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("responses.jsonl");
    std::fs::write(
        &f,
        concat!(
            "<answer>[]</answer>\n",
            "{\"answer_text\":\"<think>none here</think><answer>[]</answer>\"}\n",
            "\"<think>t</think><answer>[{\\\"bbox\\\":[1,1,9,9],\\\"points\\\":[[2,2],[3,3]]}]</answer>\"\n",
            "<think>t</think><answer>[{\"bbox\":[1,1,999,9],\"points\":[[2,2],[3,3]]}]</answer>\n",
        ),
    )
    .unwrap();
    let out = promptseg(&["check-format", "--in", p(&f)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rewards: Vec<String> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').take(2).collect::<Vec<_>>().join(" "))
        .collect();
    assert_eq!(rewards, ["1 0", "2 1", "3 1", "4 0"]);
}

#[test]
fn train_eval_report_pipeline_and_assertions() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let ck = tmp.path().join("ckpt.json");
    let log = tmp.path().join("stats.jsonl");
    assert!(
        promptseg(&["gen", "--out", p(&d), "--scenes", "6", "--seed", "3"])
            .status
            .success()
    );
    let out = promptseg(&[
        "train",
        "--data",
        p(&d),
        "--iters",
        "4",
        "--batch-size",
        "3",
        "--out",
        p(&ck),
        "--log",
        p(&log),
        "--seed",
        "9",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let ckpt = read_json(&ck);
    assert_eq!(ckpt["seed_lineage"], serde_json::json!([9]));
    assert_eq!(ckpt["config"]["iterations"], 4);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);

    let report = tmp.path().join("report.json");
    let out = promptseg(&[
        "eval",
        "--data",
        p(&d),
        "--policy",
        p(&ck),
        "--report",
        p(&report),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).contains("TRUE"), "{}", stderr(&out));
    let r = read_json(&report);
    assert_eq!(r["n"], 6);
    assert_eq!(r["config"]["decoding"], "greedy");

    let out = promptseg(&[
        "eval",
        "--data",
        p(&d),
        "--policy",
        p(&ck),
        "--report",
        p(&report),
        "--assert-min-giou",
        "1.01",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("assertion failed"),
        "{}",
        stderr(&out)
    );

    let summary = tmp.path().join("summary.json");
    let out = promptseg(&[
        "report",
        "--stats",
        p(&log),
        "--out",
        p(&summary),
        "--window",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(read_json(&summary)["iterations"], 4);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert!(
        promptseg(&["gen", "--out", p(&d), "--scenes", "3", "--seed", "3"])
            .status
            .success()
    );
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"iterations": 2, "learning_rate": 0.5, "batch_size": 2, "seed": 4}"#,
    )
    .unwrap();
    let ck = tmp.path().join("c.json");
    let out = promptseg(&[
        "train",
        "--data",
        p(&d),
        "--config",
        p(&cfg),
        "--lr",
        "0.25",
        "--out",
        p(&ck),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let c = read_json(&ck)["config"].clone();
    assert_eq!(
        (
            c["iterations"].clone(),
            c["learning_rate"].clone(),
            c["seed"].clone()
        ),
        (2.into(), 0.25.into(), 4.into())
    );

    std::fs::write(&cfg, r#"{"group_size": 1}"#).unwrap();
    let out = promptseg(&[
        "train",
        "--data",
        p(&d),
        "--config",
        p(&cfg),
        "--out",
        p(&ck),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn env_seed_applies_only_without_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &str, flag: Option<&str>, env: Option<&str>| {
        let d = tmp.path().join(dir);
        let mut c = Command::new(env!("CARGO_BIN_EXE_promptseg"));
        c.args(["gen", "--out", p(&d), "--scenes", "2"])
            .env_remove("PROMPTSEG_SEED");
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        if let Some(s) = env {
            c.env("PROMPTSEG_SEED", s);
        }
        assert!(c.output().unwrap().status.success());
        read_json(&d.join("gen_config.json"))["seed"].clone()
    };
    assert_eq!(run("a", None, Some("42")), 42);
    assert_eq!(run("b", Some("5"), Some("42")), 5);
    assert_eq!(run("c", None, None), 0);
}
