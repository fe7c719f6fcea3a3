//! Metric aggregation (gIoU, cIoU, P@τ), empty-target rejection counts and
//! end-to-end evaluation of a policy checkpoint or a file of responses.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::policy::{featurize, greedy_decode, Checkpoint};
use crate::protocol::{parse_response, PromptMode, PromptSchema};
use crate::scene::{Query, QueryKind, Scene};
use crate::segmenter::SegmenterBackend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: usize,
    /// Name of the queried category, when known.
    pub category: Option<String>,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
    pub predicted_empty: bool,
    pub gt_empty: bool,
    pub format_ok: bool,
}

impl SampleResult {
    /// Scores a predicted mask against the ground truth. An empty target
    /// scores 1 when the prompt set was empty and 0 otherwise, whatever the
    /// executed mask.
    pub fn from_masks(
        sample_id: usize,
        category: Option<String>,
        pred: &BinaryMask,
        gt: &BinaryMask,
        predicted_empty: bool,
    ) -> Result<Self> {
        let intersection = pred.intersection_count(gt)? as u64;
        let union = pred.union_count(gt)? as u64;
        Ok(SampleResult {
            sample_id,
            category,
            iou: if gt.is_empty() {
                f64::from(u8::from(predicted_empty))
            } else {
                intersection as f64 / union as f64
            },
            intersection,
            union,
            predicted_empty,
            gt_empty: gt.is_empty(),
            format_ok: true,
        })
    }

    /// An unparseable response: scored 0 and never counted as a rejection.
    pub fn format_failure(sample_id: usize, category: Option<String>, gt: &BinaryMask) -> Self {
        SampleResult {
            sample_id,
            category,
            iou: 0.0,
            intersection: 0,
            union: gt.count() as u64,
            predicted_empty: false,
            gt_empty: gt.is_empty(),
            format_ok: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub true_count: usize,
    pub false_count: usize,
}

impl RejectionCounts {
    pub fn total(&self) -> usize {
        self.true_count + self.false_count
    }

    pub fn true_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.true_count as f64 / self.total() as f64
        }
    }

    /// Confusion table in the `TRUE  n (p%)  FALSE  n (p%)` layout.
    pub fn table(&self) -> String {
        let pct = |n: usize| {
            if self.total() == 0 {
                0.0
            } else {
                100.0 * n as f64 / self.total() as f64
            }
        };
        format!(
            "{:<8}{:>12}\n{:<8}{:>12}\n{:<8}{:>12}\n",
            "",
            format!("N = {}", self.total()),
            "TRUE",
            format!("{} ({:.1})", self.true_count, pct(self.true_count)),
            "FALSE",
            format!("{} ({:.1})", self.false_count, pct(self.false_count)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub true_count: usize,
    pub false_count: usize,
    pub true_pct: f64,
    pub false_pct: f64,
}

impl From<RejectionCounts> for RejectionReport {
    fn from(c: RejectionCounts) -> Self {
        let t = c.total().max(1) as f64;
        RejectionReport {
            true_count: c.true_count,
            false_count: c.false_count,
            true_pct: 100.0 * c.true_count as f64 / t,
            false_pct: 100.0 * c.false_count as f64 / t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub n: usize,
    pub giou: f64,
    pub ciou: f64,
    pub p_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n: usize,
    pub giou: f64,
    pub ciou: f64,
    pub p_at_05: f64,
    pub threshold: f64,
    pub rejection: RejectionReport,
    pub per_category: BTreeMap<String, CategoryReport>,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn pooled(results: &[&SampleResult], tau: f64) -> (f64, f64, f64) {
    let n = results.len() as f64;
    let giou = results.iter().map(|r| r.iou).sum::<f64>() / n;
    let inter: u64 = results.iter().map(|r| r.intersection).sum();
    let union: u64 = results.iter().map(|r| r.union).sum();
    // all-empty pools have nothing to disagree about
    let ciou = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    let p_at = results.iter().filter(|r| r.iou > tau).count() as f64 / n;
    (giou, ciou, p_at)
}

/// Aggregates per-sample results. `P@τ` counts strictly greater IoUs.
pub fn aggregate(results: &[SampleResult], tau: f64) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::Eval("cannot aggregate an empty result list".into()));
    }
    let all: Vec<&SampleResult> = results.iter().collect();
    let (giou, ciou, p_at_05) = pooled(&all, tau);
    let mut groups: BTreeMap<String, Vec<&SampleResult>> = BTreeMap::new();
    for r in results {
        let key = r.category.clone().unwrap_or_else(|| "unknown".into());
        groups.entry(key).or_default().push(r);
    }
    let per_category = groups
        .into_iter()
        .map(|(k, rs)| {
            let (giou, ciou, p_at) = pooled(&rs, tau);
            (
                k,
                CategoryReport {
                    n: rs.len(),
                    giou,
                    ciou,
                    p_at,
                },
            )
        })
        .collect();
    let empties: Vec<SampleResult> = results.iter().filter(|r| r.gt_empty).cloned().collect();
    Ok(Report {
        n: results.len(),
        giou,
        ciou,
        p_at_05,
        threshold: tau,
        rejection: rejection_eval(&empties)?.into(),
        per_category,
        config: serde_json::Value::Null,
    })
}

/// Counts correct (`TRUE`) and missed (`FALSE`) rejections over empty-target samples.
pub fn rejection_eval(results: &[SampleResult]) -> Result<RejectionCounts> {
    let mut c = RejectionCounts {
        true_count: 0,
        false_count: 0,
    };
    for r in results {
        if !r.gt_empty {
            return Err(Error::Eval(format!(
                "sample {} has a non-empty target",
                r.sample_id
            )));
        }
        if r.predicted_empty {
            c.true_count += 1;
        } else {
            c.false_count += 1;
        }
    }
    Ok(c)
}

/// One externally produced response, as read from a prompts file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub sample_id: usize,
    pub answer_text: String,
}

pub fn read_prompts_file(path: &Path) -> Result<Vec<PromptRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(path, Some(i + 1), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_prompts_file(records: &[PromptRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Eval(e.to_string()))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn category_name(scene: &Scene, query: &Query) -> Option<String> {
    query
        .target_category
        .and_then(|c| scene.category_names.get(c).cloned())
}

/// Scores one response text against a sample.
pub fn score_response(
    sample_id: usize,
    scene: &Scene,
    query: &Query,
    text: &str,
    segmenter: &dyn SegmenterBackend,
    schema: &PromptSchema,
) -> Result<SampleResult> {
    let category = category_name(scene, query);
    match parse_response(text, schema) {
        Err(_) => Ok(SampleResult::format_failure(
            sample_id,
            category,
            &query.gt_mask,
        )),
        Ok(p) => {
            let pred = segmenter.execute_set(scene, &p.prompts, schema)?;
            SampleResult::from_masks(
                sample_id,
                category,
                &pred,
                &query.gt_mask,
                p.prompts.is_empty(),
            )
        }
    }
}

/// Scores `responses[i]` against `samples[i]` in parallel, preserving order.
pub fn evaluate_responses(
    samples: &[(&Scene, &Query)],
    responses: &[String],
    segmenter: &dyn SegmenterBackend,
    schema: &PromptSchema,
) -> Result<Vec<SampleResult>> {
    if samples.len() != responses.len() {
        return Err(Error::Eval(format!(
            "{} samples but {} responses",
            samples.len(),
            responses.len()
        )));
    }
    samples
        .par_iter()
        .zip(responses.par_iter())
        .enumerate()
        .map(|(i, ((s, q), t))| score_response(i, s, q, t, segmenter, schema))
        .collect()
}

/// Greedy responses of a checkpointed policy, one per sample.
pub fn policy_responses(
    ckpt: &Checkpoint,
    samples: &[(&Scene, &Query)],
    mode: Option<PromptMode>,
) -> Result<Vec<String>> {
    if let Some(m) = mode {
        if m != ckpt.schema {
            return Err(Error::Eval(format!(
                "checkpoint was trained for schema {} but {m} was requested",
                ckpt.schema
            )));
        }
    }
    let params = ckpt.params()?;
    let space = ckpt.action_space()?;
    samples
        .par_iter()
        .map(|(s, q)| {
            if (s.width, s.height) != (space.schema.width, space.schema.height) {
                return Err(Error::Eval(format!(
                    "scene canvas {}x{} differs from the checkpoint canvas {}x{}",
                    s.width, s.height, space.schema.width, space.schema.height
                )));
            }
            let phi = featurize(s, q, &ckpt.features);
            Ok(greedy_decode(&params, &phi, &space)?.text)
        })
        .collect()
}

/// Aligns prompt-file records with samples by `sample_id`.
pub fn responses_from_records(records: &[PromptRecord], n: usize) -> Result<Vec<String>> {
    let mut out: Vec<Option<String>> = vec![None; n];
    for r in records {
        let slot = out.get_mut(r.sample_id).ok_or_else(|| {
            Error::Eval(format!(
                "sample_id {} out of range (dataset has {n} samples)",
                r.sample_id
            ))
        })?;
        if slot.is_some() {
            return Err(Error::Eval(format!(
                "sample_id {} appears twice",
                r.sample_id
            )));
        }
        *slot = Some(r.answer_text.clone());
    }
    out.into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Eval(format!("no response for sample_id {i}"))))
        .collect()
}

/// Per-sample rows as CSV.
pub fn write_csv(results: &[SampleResult], w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(
        w,
        "sample_id,category,iou,intersection,union,predicted_empty,gt_empty,format_ok"
    )?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.sample_id,
            r.category.as_deref().unwrap_or(""),
            r.iou,
            r.intersection,
            r.union,
            r.predicted_empty,
            r.gt_empty,
            r.format_ok
        )?;
    }
    Ok(())
}

/// Whether a query is an empty-target query.
pub fn is_empty_target(q: &Query) -> bool {
    q.kind == QueryKind::EmptyTarget || q.gt_mask.is_empty()
}
