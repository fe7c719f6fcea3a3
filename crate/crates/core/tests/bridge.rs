//! Bridge client against the fill-the-box stub process.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use promptseg::bridge::{BridgeErrorCode, BridgeRequest, BridgeResponse, BridgeSegmenter};
use promptseg::dataset::{generate_category_dataset, write_dataset};
use promptseg::eval::{write_prompts_file, PromptRecord};
use promptseg::mask::{BBox, BinaryMask};
use promptseg::policy::oracle_prompts;
use promptseg::protocol::{
    serialize_prompt_set, InstancePrompt, PromptMode, PromptSchema, PromptSet,
};
use promptseg::scene::{Scene, SceneSpec};
use promptseg::segmenter::{FillSegmenter, SegmenterBackend};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use serde_json::Value;

const W: usize = 48;
const H: usize = 40;

fn stub() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/stub_bridge.py")
}

fn python() -> Option<&'static str> {
    ["python3", "python"].into_iter().find(|p| {
        Command::new(p)
            .arg("--version")
            .output()
            .is_ok_and(|o| o.status.success())
    })
}

fn blank_scene() -> Scene {
    Scene {
        width: W,
        height: H,
        instances: vec![],
        category_names: vec![],
        image: None,
    }
}

fn arb_instance(mode: PromptMode) -> impl Strategy<Value = InstancePrompt> {
    let pt = (0..W, 0..H);
    (
        (0..W, 0..H, 0..W, 0..H),
        prop::collection::vec(pt.clone(), 4),
        prop::collection::vec(pt, 2),
    )
        .prop_map(move |((a, b, c, d), pos, neg)| {
            let bbox = mode
                .has_box()
                .then(|| BBox::new(a.min(c), b.min(d), a.max(c), b.max(d)));
            InstancePrompt::new(
                bbox,
                &pos[..mode.positive_points()],
                &neg[..mode.negative_points()],
            )
        })
}

fn arb_request() -> impl Strategy<Value = (PromptMode, PromptSet)> {
    prop::sample::select(PromptMode::ALL.to_vec()).prop_flat_map(|mode| {
        prop::collection::vec(arb_instance(mode), 0..4).prop_map(move |v| (mode, PromptSet::new(v)))
    })
}

#[test]
fn stub_round_trips_random_requests() {
    let Some(py) = python() else {
        eprintln!("python not available; skipping");
        return;
    };
    let seg =
        BridgeSegmenter::spawn(&format!("{py} {} --canvas {W}x{H}", stub().display())).unwrap();
    let scene = blank_scene();
    let mut runner = TestRunner::new(Config {
        cases: 100,
        ..Config::default()
    });
    let seen = std::cell::Cell::new(0usize);
    runner
        .run(&arb_request(), |(mode, prompts)| {
            let schema = PromptSchema::new(mode, W, H);
            let id = format!("r{}", seen.get());
            seen.set(seen.get() + 1);
            let resp = seg
                .request(&BridgeRequest::new(id.clone(), "", &prompts, &schema))
                .unwrap();
            prop_assert_eq!(&resp.id, &id);
            prop_assert!(resp.ok);
            let rle = resp.mask.clone().unwrap();
            prop_assert_eq!(rle.counts.iter().sum::<u64>(), (W * H) as u64);
            let got = resp.into_mask(&id, W, H).unwrap();
            let want = FillSegmenter
                .execute_set(&scene, &prompts, &schema)
                .unwrap();
            prop_assert_eq!(got, want);
            Ok(())
        })
        .unwrap();
    assert_eq!(seen.get(), 100);
}

#[test]
fn empty_prompt_list_is_all_background() {
    let Some(py) = python() else { return };
    let seg =
        BridgeSegmenter::spawn(&format!("{py} {} --canvas {W}x{H}", stub().display())).unwrap();
    let schema = PromptSchema::new(PromptMode::BboxOnly, W, H);
    let m = seg
        .execute_set(&blank_scene(), &PromptSet::empty(), &schema)
        .unwrap();
    assert_eq!(m, BinaryMask::new(W, H).unwrap());
    let unit = PromptSet::new(vec![InstancePrompt::new(
        Some(BBox::new(0, 0, 1, 1)),
        &[],
        &[],
    )]);
    assert_eq!(
        seg.execute_set(&blank_scene(), &unit, &schema)
            .unwrap()
            .count(),
        4
    );
}

#[test]
fn malformed_lines_and_missing_images_get_error_codes() {
    let Some(py) = python() else { return };
    let mut child = Command::new(py)
        .arg(stub())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let lines = [
        "{not json".to_string(),
        r#"{"id":"a","image_path":"/nonexistent/promptseg/x.png","prompts":[],"schema":"bbox_only"}"#.to_string(),
        r#"{"id":"b","image_path":"","prompts":"nope","schema":"bbox_only"}"#.to_string(),
        r#"{"id":"c","image_path":"","prompts":[],"schema":"bbox_only"}"#.to_string(),
    ];
    for l in &lines {
        writeln!(stdin, "{l}").unwrap();
    }
    drop(stdin);
    let out: Vec<BridgeResponse> = BufReader::new(child.stdout.take().unwrap())
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect();
    child.wait().unwrap();
    assert_eq!(out.len(), lines.len(), "one response per request");
    let ids: Vec<_> = out.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["unknown", "a", "b", "c"]);
    let code = |i: usize| out[i].error.as_ref().map(|e| e.code);
    assert_eq!(code(0), Some(BridgeErrorCode::BadRequest));
    assert_eq!(code(1), Some(BridgeErrorCode::ImageMissing));
    assert_eq!(code(2), Some(BridgeErrorCode::BadRequest));
    assert!(out[3].ok);
    assert_eq!(out[3].mask.as_ref().unwrap().counts, vec![256 * 256]);

    let err = out[1]
        .clone()
        .into_mask("a", 256, 256)
        .unwrap_err()
        .to_string();
    assert!(err.contains("ImageMissing"), "{err}");
    let err = out[3]
        .clone()
        .into_mask("zzz", 256, 256)
        .unwrap_err()
        .to_string();
    assert!(err.contains("does not match"), "{err}");
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .output()
        .unwrap()
}

/// Mix of oracle, shifted, empty and malformed responses.
fn responses(ds: &promptseg::dataset::Dataset, schema: &PromptSchema) -> Vec<PromptRecord> {
    ds.pairs()
        .enumerate()
        .map(|(i, (scene, query))| {
            let oracle = oracle_prompts(scene, query, schema);
            let answer_text = match i % 4 {
                0 => serialize_prompt_set(&oracle, "exact", schema).unwrap(),
                1 => {
                    let shifted = PromptSet::new(
                        oracle
                            .instances
                            .iter()
                            .map(|p| {
                                let b = p.bbox.map(|b| BBox::new(b.x1 / 2, b.y1 / 2, b.x2, b.y2));
                                let pos: Vec<_> = p.positives().map(|q| (q.x, q.y)).collect();
                                let neg: Vec<_> = p.negatives().map(|q| (q.x, q.y)).collect();
                                InstancePrompt::new(b, &pos, &neg)
                            })
                            .collect(),
                    );
                    serialize_prompt_set(&shifted, "loose", schema).unwrap()
                }
                2 => serialize_prompt_set(&PromptSet::empty(), "none", schema).unwrap(),
                _ => "<answer>[]</answer>".to_string(),
            };
            PromptRecord {
                sample_id: i,
                answer_text,
            }
        })
        .collect()
}

#[test]
fn bridge_eval_matches_in_process_fill() {
    let Some(py) = python() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ds = generate_category_dataset(&SceneSpec::default(), 6, 11).unwrap();
    write_dataset(&ds, &data).unwrap();
    for mode in [PromptMode::BboxPos2, PromptMode::PosPoints2] {
        let schema = PromptSchema::synthetic(mode);
        let prompts = tmp.path().join(format!("{mode}.jsonl"));
        write_prompts_file(&responses(&ds, &schema), &prompts).unwrap();
        let mut reports = Vec::new();
        for (tag, seg) in [
            ("fill", "fill".to_string()),
            ("bridge", format!("bridge:{py} {}", stub().display())),
        ] {
            let report = tmp.path().join(format!("{mode}-{tag}.json"));
            let csv = tmp.path().join(format!("{mode}-{tag}.csv"));
            let out = run(&[
                "eval",
                "--data",
                data.to_str().unwrap(),
                "--prompts",
                prompts.to_str().unwrap(),
                "--schema",
                mode.as_str(),
                "--segmenter",
                &seg,
                "--report",
                report.to_str().unwrap(),
                "--csv",
                csv.to_str().unwrap(),
            ]);
            assert!(
                out.status.success(),
                "{}",
                String::from_utf8_lossy(&out.stderr)
            );
            let mut v: Value =
                serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
            v["config"]["segmenter"] = Value::Null;
            reports.push((v, std::fs::read(&csv).unwrap()));
        }
        assert_eq!(reports[0], reports[1], "{mode}");
        assert!(reports[0].0["giou"].as_f64().unwrap() > 0.0);
    }
}
