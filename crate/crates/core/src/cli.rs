//! Command-line front end: `gen`, `train`, `eval`, `check-format`, `report`.
//!
//! Exit codes: 0 success, 1 domain failure (including a missed `eval
//! --assert-*` threshold), 2 usage or I/O error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bridge::BridgeSegmenter;
use crate::dataset::{
    generate_category_dataset, generate_dataset, read_dataset, write_dataset, Dataset,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, evaluate_responses, policy_responses, read_prompts_file, rejection_eval,
    responses_from_records, write_csv, Report,
};
use crate::grpo::{train, GrpoConfig, TrainStats};
use crate::policy::{ActionSpace, Checkpoint};
use crate::protocol::{format_reward, parse_response, PromptMode, PromptSchema};
use crate::scene::SceneSpec;
use crate::segmenter::{FillSegmenter, SegmenterBackend, SyntheticSegmenter};

pub const SEED_ENV: &str = "PROMPTSEG_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "promptseg",
    version,
    about = "Reasoning-to-prompt segmentation toolkit"
)]
pub struct Cli {
    /// Worker threads (default: number of processors).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a policy with GRPO.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a prompts file.
    Eval(EvalArgs),
    /// Print the format reward of every response line.
    CheckFormat(CheckFormatArgs),
    /// Summarize a training stats log.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Scene spec JSON (defaults to the built-in spec).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `single`: one random query per scene; `per-category`: one query per
    /// category per scene (absent categories become empty-target queries).
    #[arg(long, value_enum, default_value_t = QueryPlan::Single)]
    pub queries: QueryPlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryPlan {
    Single,
    PerCategory,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Training config JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration stats (JSONL).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub schema: Option<PromptMode>,
    /// `synthetic`, `fill` or `bridge:<command line>`.
    #[arg(long)]
    pub segmenter: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "prompts", required_unless_present = "prompts")]
    pub policy: Option<PathBuf>,
    /// JSONL of `{sample_id, answer_text}`.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PromptMode>,
    #[arg(long)]
    pub report: PathBuf,
    /// Optional per-sample CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    pub segmenter: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Fail (exit 1) when gIoU is below this value.
    #[arg(long)]
    pub assert_min_giou: Option<f64>,
    /// Fail (exit 1) when the empty-target rejection rate is below this value.
    #[arg(long)]
    pub assert_min_rejection: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CheckFormatArgs {
    /// Responses, one per line: a JSON string, an object with `answer_text`
    /// or `text`, or raw text.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "bbox_pos2")]
    pub schema: PromptMode,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Window length for moving averages.
    #[arg(long, default_value_t = 50)]
    pub window: usize,
}

/// Training config file: GRPO settings plus schema and segmenter choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub grpo: GrpoConfig,
    pub schema: PromptMode,
    pub segmenter: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            grpo: GrpoConfig::default(),
            schema: PromptMode::BboxPos2,
            segmenter: "synthetic".into(),
        }
    }
}

/// Outcome of a command: exit code plus a message for standard error.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Malformed { .. } | Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cli: Cli) -> CmdResult {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be >= 1".into()).into());
        }
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Failure {
        code: 2,
        message: format!("thread pool: {e}"),
    })?;
    pool.install(|| match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CheckFormat(a) => cmd_check_format(a),
        Command::Report(a) => cmd_report(a),
    })
}

/// Explicit flag, else `PROMPTSEG_SEED`, else `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, None, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Builds a backend from `synthetic`, `fill` or `bridge:<command line>`.
pub fn make_segmenter(spec: &str) -> Result<Box<dyn SegmenterBackend>> {
    match spec {
        "synthetic" => Ok(Box::new(SyntheticSegmenter::default())),
        "fill" => Ok(Box::new(FillSegmenter)),
        s => match s.strip_prefix("bridge:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(Box::new(BridgeSegmenter::spawn(cmd)?)),
            _ => Err(Error::Config(format!(
                "unknown segmenter '{s}' (expected synthetic, fill or bridge:<command>)"
            ))),
        },
    }
}

fn dataset_canvas(ds: &Dataset) -> Result<(usize, usize)> {
    let first = ds
        .scenes
        .first()
        .ok_or_else(|| Error::Config("dataset has no scenes".into()))?;
    if ds
        .scenes
        .iter()
        .any(|s| (s.width, s.height) != (first.width, first.height))
    {
        return Err(Error::Config(
            "dataset scenes do not share one canvas size".into(),
        ));
    }
    Ok((first.width, first.height))
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let spec = match &a.spec {
        Some(p) => read_json::<SceneSpec>(p)?,
        None => SceneSpec::default(),
    };
    let seed = resolve_seed(a.seed, 0)?;
    let ds = match a.queries {
        QueryPlan::Single => generate_dataset(&spec, a.scenes, seed)?,
        QueryPlan::PerCategory => generate_category_dataset(&spec, a.scenes, seed)?,
    };
    write_dataset(&ds, &a.out)?;
    let echo = json!({ "command": "gen", "scenes": a.scenes, "seed": seed, "queries": a.queries, "spec": spec });
    write_json(&a.out.join("gen_config.json"), &echo)?;
    eprintln!("wrote {} scenes to {}", ds.scenes.len(), a.out.display());
    Ok(())
}

/// Effective training config: defaults, then the config file, then flags.
pub fn effective_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iters {
        cfg.grpo.iterations = n;
    }
    if let Some(lr) = a.lr {
        cfg.grpo.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.grpo.batch_size = b;
    }
    if let Some(m) = a.schema {
        cfg.schema = m;
    }
    if let Some(s) = &a.segmenter {
        cfg.segmenter = s.clone();
    }
    cfg.grpo.seed = resolve_seed(a.seed, cfg.grpo.seed)?;
    cfg.grpo.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = effective_train_config(&a)?;
    let ds = read_dataset(&a.data)?;
    let (w, h) = dataset_canvas(&ds)?;
    let space = ActionSpace::new(
        cfg.grpo.action_space.clone(),
        PromptSchema::new(cfg.schema, w, h),
    )?;
    let segmenter = make_segmenter(&cfg.segmenter)?;
    let pairs: Vec<_> = ds.pairs().collect();
    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };
    let outcome = train(
        &pairs,
        &cfg.grpo,
        &space,
        segmenter.as_ref(),
        log.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let (Some(w), Some(p)) = (log.as_mut(), &a.log) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let echo = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    let ckpt = Checkpoint::new(
        &outcome.params,
        &space,
        &cfg.grpo.features,
        vec![cfg.grpo.seed],
        echo,
    );
    ckpt.save(&a.out)?;
    if let Some(last) = outcome.stats.last() {
        eprintln!(
            "trained {} iterations; last mean reward {:.4}, mean gIoU {:.4}",
            outcome.stats.len(),
            last.mean_reward,
            last.mean_giou
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ds = read_dataset(&a.data)?;
    let (w, h) = dataset_canvas(&ds)?;
    let pairs: Vec<_> = ds.pairs().collect();
    let (responses, mode, source) = match (&a.policy, &a.prompts) {
        (Some(p), _) => {
            let ckpt = Checkpoint::load(p)?;
            let r = policy_responses(&ckpt, &pairs, a.schema)?;
            (r, ckpt.schema, json!({ "policy": p }))
        }
        (None, Some(p)) => {
            let mode = a
                .schema
                .ok_or_else(|| Error::Config("--schema is required with --prompts".into()))?;
            let r = responses_from_records(&read_prompts_file(p)?, pairs.len())?;
            (r, mode, json!({ "prompts": p }))
        }
        (None, None) => {
            return Err(Error::Config("one of --policy or --prompts is required".into()).into())
        }
    };
    let schema = PromptSchema::new(mode, w, h);
    let segmenter = make_segmenter(&a.segmenter)?;
    let results = evaluate_responses(&pairs, &responses, segmenter.as_ref(), &schema)?;
    let mut report: Report = aggregate(&results, a.threshold)?;
    report.config = json!({
        "command": "eval",
        "data": a.data,
        "source": source,
        "schema": mode,
        "canvas": [w, h],
        "segmenter": segmenter.name(),
        "threshold": a.threshold,
        "decoding": "greedy",
        "empty_target_rule": "empty ground truth enters gIoU as 1 for a rejection and 0 otherwise, and cIoU as (0, 0) when both masks are empty",
        "format_failure_rule": "unparseable responses score IoU 0 and count as not rejected",
    });
    write_json(&a.report, &report)?;
    if let Some(p) = &a.csv {
        let f = File::create(p).map_err(|e| Error::io(p, e))?;
        let mut w = BufWriter::new(f);
        write_csv(&results, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(p, e))?;
    }
    let empties: Vec<_> = results.iter().filter(|r| r.gt_empty).cloned().collect();
    let counts = rejection_eval(&empties)?;
    eprintln!(
        "N = {}  gIoU {:.4}  cIoU {:.4}  P@{} {:.4}",
        report.n, report.giou, report.ciou, a.threshold, report.p_at_05
    );
    eprint!("{}", counts.table());
    let mut misses = Vec::new();
    if let Some(t) = a.assert_min_giou {
        if report.giou < t {
            misses.push(format!("gIoU {:.4} < {t}", report.giou));
        }
    }
    if let Some(t) = a.assert_min_rejection {
        if counts.true_rate() < t {
            misses.push(format!("rejection rate {:.4} < {t}", counts.true_rate()));
        }
    }
    if !misses.is_empty() {
        return Err(Failure {
            code: 1,
            message: format!("assertion failed: {}", misses.join("; ")),
        });
    }
    Ok(())
}

/// Extracts the response text from one line of a responses file.
pub fn response_text(line: &str) -> String {
    match serde_json::from_str::<serde_json::Value>(line) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(serde_json::Value::Object(o)) => o
            .get("answer_text")
            .or_else(|| o.get("text"))
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| line.to_string()),
        _ => line.to_string(),
    }
}

fn cmd_check_format(a: CheckFormatArgs) -> CmdResult {
    let schema = PromptSchema::new(a.schema, a.width, a.height);
    let f = File::open(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&a.input, e))?;
        let parsed = parse_response(&response_text(&line), &schema);
        let detail = match &parsed {
            Ok(p) => format!("ok instances={}", p.prompts.len()),
            Err(e) => e.kind.as_str().to_string(),
        };
        writeln!(out, "{}\t{}\t{}", i + 1, format_reward(&parsed), detail)
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub start: usize,
    pub end: usize,
    pub mean_reward: f64,
    pub mean_giou: f64,
    pub clip_frac: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningSummary {
    pub iterations: usize,
    pub window: usize,
    pub first_mean_reward: f64,
    pub last_mean_reward: f64,
    pub best_window_reward: f64,
    pub final_kl: f64,
    pub total_wall_ms: u64,
    pub windows: Vec<WindowSummary>,
}

/// Learning-curve summary over consecutive windows of the stats log.
pub fn summarize_stats(stats: &[TrainStats], window: usize) -> Result<LearningSummary> {
    if stats.is_empty() || window == 0 {
        return Err(Error::Config(
            "need a non-empty stats log and window >= 1".into(),
        ));
    }
    let windows: Vec<WindowSummary> = stats
        .chunks(window)
        .map(|c| {
            let n = c.len() as f64;
            let m = |f: fn(&TrainStats) -> f64| c.iter().map(f).sum::<f64>() / n;
            WindowSummary {
                start: c[0].iter,
                end: c[c.len() - 1].iter,
                mean_reward: m(|s| s.mean_reward),
                mean_giou: m(|s| s.mean_giou),
                clip_frac: m(|s| s.clip_frac),
                kl: m(|s| s.kl),
            }
        })
        .collect();
    Ok(LearningSummary {
        iterations: stats.len(),
        window,
        first_mean_reward: windows[0].mean_reward,
        last_mean_reward: windows[windows.len() - 1].mean_reward,
        best_window_reward: windows
            .iter()
            .map(|w| w.mean_reward)
            .fold(f64::MIN, f64::max),
        final_kl: stats[stats.len() - 1].kl,
        total_wall_ms: stats.iter().map(|s| s.wall_ms).sum(),
        windows,
    })
}

pub fn read_stats(path: &Path) -> Result<Vec<TrainStats>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::malformed(path, Some(i + 1), e.to_string()))?,
        );
    }
    Ok(out)
}

fn cmd_report(a: ReportArgs) -> CmdResult {
    let stats = read_stats(&a.stats)?;
    let summary = summarize_stats(&stats, a.window)?;
    write_json(&a.out, &summary)?;
    eprintln!(
        "{} iterations: mean reward {:.4} (first window) -> {:.4} (last window)",
        summary.iterations, summary.first_mean_reward, summary.last_mean_reward
    );
    Ok(())
}
