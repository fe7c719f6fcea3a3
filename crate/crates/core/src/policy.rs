//! Linear-softmax sequence policy over a discretized prompt-action space.
//!
//! Each step draws one action from `softmax(θ · φ)` where `φ` is the
//! feature vector of the (scene, query) pair. Logits are shared across steps,
//! so the sequence log-likelihood is an exact sum of step log-probabilities
//! and its gradient is `Σ_t (e_{a_t} − p) ⊗ φ`.
//!
//! Action layout: `a = (row · grid + col) · sizes + size`, with `STOP = A`
//! as the last row of `θ`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask};
use crate::protocol::{serialize_prompt_set, InstancePrompt, PromptMode, PromptSchema, PromptSet};
use crate::scene::{Query, QueryKind, Scene};
use crate::segmenter::{decompose_mask, derive_box_points};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionSpaceConfig {
    /// Box centers lie on a `grid × grid` lattice of cell centers.
    pub grid: usize,
    /// Box half-extents in pixels on a 256-pixel reference canvas.
    pub half_extents: Vec<usize>,
    /// Maximum number of non-STOP actions per rollout.
    pub nmax: usize,
}

impl Default for ActionSpaceConfig {
    fn default() -> Self {
        ActionSpaceConfig {
            grid: 16,
            half_extents: vec![8, 20, 48],
            nmax: 8,
        }
    }
}

const REFERENCE_CANVAS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    pub config: ActionSpaceConfig,
    pub schema: PromptSchema,
}

impl ActionSpace {
    pub fn new(config: ActionSpaceConfig, schema: PromptSchema) -> Result<Self> {
        if config.grid == 0 || config.half_extents.is_empty() || config.nmax == 0 {
            return Err(Error::Config(
                "action space needs grid, sizes and nmax >= 1".into(),
            ));
        }
        if config.grid > schema.width.min(schema.height) {
            return Err(Error::Config(format!(
                "grid {} is finer than the {}x{} canvas",
                config.grid, schema.width, schema.height
            )));
        }
        Ok(ActionSpace { config, schema })
    }

    /// Number of non-STOP actions, `grid² · sizes`.
    pub fn num_actions(&self) -> usize {
        self.config.grid * self.config.grid * self.config.half_extents.len()
    }

    pub fn stop(&self) -> usize {
        self.num_actions()
    }

    /// Number of logits, `A + 1`.
    pub fn num_logits(&self) -> usize {
        self.num_actions() + 1
    }

    pub fn nmax(&self) -> usize {
        self.config.nmax
    }

    /// Box center and half-extents `(cx, cy, hx, hy)` of a non-STOP action.
    pub fn geometry(&self, action: usize) -> (usize, usize, usize, usize) {
        let sizes = self.config.half_extents.len();
        let (cell, size) = (action / sizes, action % sizes);
        let g = self.config.grid;
        let (row, col) = (cell / g, cell % g);
        let (w, h) = (self.schema.width, self.schema.height);
        let cx = (2 * col + 1) * w / (2 * g);
        let cy = (2 * row + 1) * h / (2 * g);
        let he = self.config.half_extents[size];
        let hx = (he * w / REFERENCE_CANVAS).max(1);
        let hy = (he * h / REFERENCE_CANVAS).max(1);
        (cx, cy, hx, hy)
    }

    /// The instance prompt an action stands for under the active schema.
    pub fn decode(&self, action: usize) -> Result<InstancePrompt> {
        if action >= self.num_actions() {
            return Err(Error::Policy(format!(
                "action {action} has no prompt (A = {})",
                self.num_actions()
            )));
        }
        let (cx, cy, hx, hy) = self.geometry(action);
        let (w, h) = (self.schema.width as i64, self.schema.height as i64);
        let cl = |v: i64, hi: i64| v.clamp(0, hi - 1) as usize;
        let (cxi, cyi, hxi, hyi) = (cx as i64, cy as i64, hx as i64, hy as i64);
        let bbox = BBox::new(
            cl(cxi - hxi, w),
            cl(cyi - hyi, h),
            cl(cxi + hxi, w),
            cl(cyi + hyi, h),
        );
        let mut pos = vec![(cl(cxi - hxi / 2, w), cy), (cl(cxi + hxi / 2, w), cy)];
        let mode = self.schema.mode;
        if mode == PromptMode::BboxPos4 {
            pos.push((cx, cl(cyi - hyi / 2, h)));
            pos.push((cx, cl(cyi + hyi / 2, h)));
        }
        pos.truncate(mode.positive_points());
        let neg: Vec<(usize, usize)> = if mode.negative_points() > 0 {
            vec![(bbox.x1, bbox.y1), (bbox.x2, bbox.y2)]
        } else {
            Vec::new()
        };
        Ok(InstancePrompt::new(
            mode.has_box().then_some(bbox),
            &pos,
            &neg,
        ))
    }

    /// Prompt set for an action sequence; STOP entries are skipped.
    pub fn decode_sequence(&self, actions: &[usize]) -> Result<PromptSet> {
        actions
            .iter()
            .filter(|&&a| a != self.stop())
            .map(|&a| self.decode(a))
            .collect::<Result<Vec<_>>>()
            .map(PromptSet::new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub categories: usize,
    /// Occupancy histograms use an `occupancy_grid × occupancy_grid` lattice.
    pub occupancy_grid: usize,
    /// Side of the queried-category coverage lattice appended after the
    /// per-category blocks, followed by a target-presence flag; 0 disables both.
    pub target_grid: usize,
    /// Multiplier on the coverage values.
    pub target_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            categories: 5,
            occupancy_grid: 8,
            target_grid: 16,
            target_scale: 8.0,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        let cells = self.occupancy_grid * self.occupancy_grid;
        let target = if self.target_grid > 0 {
            self.target_grid * self.target_grid + 1
        } else {
            0
        };
        self.categories + self.categories * cells + target + 1
    }
}

/// `one-hot(target) ++ per-category occupancy ++ target coverage ++ presence ++ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features(pub Vec<f64>);

impl Features {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn occupancy(scene: &Scene, category: usize, g: usize) -> Vec<f64> {
    if g == 0 {
        return Vec::new();
    }
    let mut cells = vec![0f64; g * g];
    for inst in scene.instances.iter().filter(|i| i.category == category) {
        for (x, y) in inst.mask.iter_ones() {
            cells[(y * g / scene.height) * g + x * g / scene.width] += 1.0;
        }
    }
    let total: f64 = cells.iter().sum();
    if total > 0.0 {
        cells.iter_mut().for_each(|c| *c /= total);
    }
    cells
}

/// Fraction of each lattice cell covered by instances of `category`.
fn coverage(scene: &Scene, category: usize, g: usize) -> Vec<f64> {
    if g == 0 {
        return Vec::new();
    }
    let mut hits = vec![0f64; g * g];
    for inst in scene.instances.iter().filter(|i| i.category == category) {
        for (x, y) in inst.mask.iter_ones() {
            hits[(y * g / scene.height) * g + x * g / scene.width] += 1.0;
        }
    }
    let span = |i: usize, n: usize| ((i + 1) * n).div_ceil(g) - (i * n).div_ceil(g);
    for (k, h) in hits.iter_mut().enumerate() {
        let area = span(k / g, scene.height) * span(k % g, scene.width);
        if area > 0 {
            *h /= area as f64;
        }
    }
    hits
}

pub fn featurize(scene: &Scene, query: &Query, cfg: &FeatureConfig) -> Features {
    let mut v = Vec::with_capacity(cfg.dim());
    let target = query.target_category.filter(|&c| c < cfg.categories);
    v.extend((0..cfg.categories).map(|c| if Some(c) == target { 1.0 } else { 0.0 }));
    for c in 0..cfg.categories {
        v.extend(occupancy(scene, c, cfg.occupancy_grid));
    }
    if cfg.target_grid > 0 {
        match target {
            Some(c) if query.kind != QueryKind::EmptyTarget => {
                v.extend(
                    coverage(scene, c, cfg.target_grid)
                        .iter()
                        .map(|x| x * cfg.target_scale),
                );
                v.push(1.0);
            }
            _ => v.extend(std::iter::repeat_n(
                0.0,
                cfg.target_grid * cfg.target_grid + 1,
            )),
        }
    }
    v.push(1.0);
    Features(v)
}

/// `θ` as a row-major `(A + 1) × D` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub rows: usize,
    pub cols: usize,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        PolicyParams {
            rows,
            cols,
            theta: vec![0.0; rows * cols],
        }
    }

    /// Zero weights except the STOP row's bias entry. Optional Gaussian-free
    /// uniform jitter in `[-noise, noise]` breaks ties between actions.
    pub fn init(
        space: &ActionSpace,
        features: &FeatureConfig,
        stop_bias: f64,
        noise: f64,
        seed: u64,
    ) -> Self {
        let (rows, cols) = (space.num_logits(), features.dim());
        let mut p = Self::zeros(rows, cols);
        if noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            p.theta
                .iter_mut()
                .for_each(|t| *t = rng.gen_range(-noise..=noise));
        }
        p.theta[space.stop() * cols + cols - 1] = stop_bias;
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != self.rows * self.cols {
            return Err(Error::Policy(format!(
                "theta has {} entries, expected {}x{}",
                self.theta.len(),
                self.rows,
                self.cols
            )));
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Policy("theta contains non-finite entries".into()));
        }
        Ok(())
    }

    pub fn logits(&self, phi: &Features) -> Vec<f64> {
        assert_eq!(phi.0.len(), self.cols, "feature dimension mismatch");
        self.theta
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(&phi.0).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Per-step log-probabilities, `log softmax(θ · φ)`.
    pub fn step_log_probs(&self, phi: &Features) -> Vec<f64> {
        log_softmax(&self.logits(phi))
    }

    pub fn step_probs(&self, phi: &Features) -> Vec<f64> {
        self.step_log_probs(phi).into_iter().map(f64::exp).collect()
    }

    /// `self += scale · outer(coef, φ)`.
    pub fn add_outer(&mut self, scale: f64, coef: &[f64], phi: &Features) {
        for (row, &c) in self.theta.chunks_exact_mut(self.cols).zip(coef) {
            let k = scale * c;
            if k != 0.0 {
                row.iter_mut().zip(&phi.0).for_each(|(t, f)| *t += k * f);
            }
        }
    }

    pub fn distance(&self, other: &PolicyParams) -> f64 {
        self.theta
            .iter()
            .zip(&other.theta)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Ends with STOP unless truncated at `nmax` non-STOP actions.
    pub actions: Vec<usize>,
    pub text: String,
    pub logprob: f64,
    pub prompt_set: PromptSet,
}

fn check_actions(params: &PolicyParams, actions: &[usize]) -> Result<()> {
    match actions.iter().find(|&&a| a >= params.rows) {
        Some(a) => Err(Error::Policy(format!(
            "invalid action id {a} (only {} logits)",
            params.rows
        ))),
        None => Ok(()),
    }
}

/// Exact sequence log-likelihood.
pub fn logprob(params: &PolicyParams, phi: &Features, actions: &[usize]) -> Result<f64> {
    check_actions(params, actions)?;
    let lp = params.step_log_probs(phi);
    Ok(actions.iter().map(|&a| lp[a]).sum())
}

/// Gradient of the sequence log-likelihood with respect to the logits:
/// `counts(actions) − T · p`.
pub fn logit_grad(params: &PolicyParams, phi: &Features, actions: &[usize]) -> Result<Vec<f64>> {
    check_actions(params, actions)?;
    let p = params.step_probs(phi);
    let t = actions.len() as f64;
    let mut g: Vec<f64> = p.iter().map(|pi| -t * pi).collect();
    for &a in actions {
        g[a] += 1.0;
    }
    Ok(g)
}

/// Gradient of [`logprob`] with respect to `θ`, same shape as `θ`.
pub fn grad_logprob(
    params: &PolicyParams,
    phi: &Features,
    actions: &[usize],
) -> Result<PolicyParams> {
    let coef = logit_grad(params, phi, actions)?;
    let mut g = PolicyParams::zeros(params.rows, params.cols);
    g.add_outer(1.0, &coef, phi);
    Ok(g)
}

fn think_text(prompts: &PromptSet) -> String {
    match prompts.len() {
        0 => "no instance of the queried concept is visible".to_string(),
        1 => "one candidate region matches the query".to_string(),
        n => format!("{n} candidate regions match the query"),
    }
}

fn build_rollout(space: &ActionSpace, actions: Vec<usize>, logprob: f64) -> Result<Rollout> {
    let prompt_set = space.decode_sequence(&actions)?;
    let text = serialize_prompt_set(&prompt_set, &think_text(&prompt_set), &space.schema)?;
    Ok(Rollout {
        actions,
        text,
        logprob,
        prompt_set,
    })
}

/// Draws `g` i.i.d. rollouts. Deterministic for a given seed.
pub fn sample_rollouts(
    params: &PolicyParams,
    phi: &Features,
    g: usize,
    space: &ActionSpace,
    seed: u64,
) -> Result<Vec<Rollout>> {
    if g < 2 {
        return Err(Error::Config(format!("group size must be >= 2, got {g}")));
    }
    if params.rows != space.num_logits() {
        return Err(Error::Policy(format!(
            "params have {} rows, action space needs {}",
            params.rows,
            space.num_logits()
        )));
    }
    let lp = params.step_log_probs(phi);
    let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..g)
        .map(|_| {
            let mut actions = Vec::new();
            let mut emitted = 0;
            loop {
                let a = sample_index(&probs, rng.gen::<f64>());
                actions.push(a);
                if a == space.stop() {
                    break;
                }
                emitted += 1;
                if emitted == space.nmax() {
                    break;
                }
            }
            let logprob = actions.iter().map(|&a| lp[a]).sum();
            build_rollout(space, actions, logprob)
        })
        .collect()
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the last partial sum
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Deterministic decoding by per-step argmax. Each step is a two-level
/// choice: stop when STOP is at least as likely as continuing, otherwise emit
/// the most probable action (ties to the lowest id). Logits are shared across
/// steps, so every later step would repeat the same choice, and repeated
/// prompts do not change the executed mask; decoding therefore ends after
/// the first action.
pub fn greedy_decode(
    params: &PolicyParams,
    phi: &Features,
    space: &ActionSpace,
) -> Result<Rollout> {
    let lp = params.step_log_probs(phi);
    let stop = space.stop();
    let actions = if lp[stop].exp() >= 0.5 {
        vec![stop]
    } else {
        let best = (0..stop).fold(0, |b, a| if lp[a] > lp[b] { a } else { b });
        if space.nmax() > 1 {
            vec![best, stop]
        } else {
            vec![best]
        }
    };
    let logprob = actions.iter().map(|&a| lp[a]).sum();
    build_rollout(space, actions, logprob)
}

/// Instance masks of the queried concept: scene instances when the scene
/// carries them, otherwise a density decomposition of the GT mask.
fn target_instances(scene: &Scene, query: &Query) -> Vec<BinaryMask> {
    if query.kind == QueryKind::EmptyTarget || query.gt_mask.is_empty() {
        return Vec::new();
    }
    match query.target_category {
        Some(c) if !scene.instances.is_empty() => scene
            .instances
            .iter()
            .filter(|i| i.category == c)
            .map(|i| i.mask.clone())
            .collect(),
        _ => decompose_mask(&query.gt_mask, 3, 5).unwrap_or_default(),
    }
}

/// Nearest pixel to `(x, y)` (Chebyshev rings, then row-major) outside `occupied`.
fn nearest_free(occupied: &BinaryMask, x: usize, y: usize) -> (usize, usize) {
    let (w, h) = (occupied.width() as i64, occupied.height() as i64);
    let (x, y) = (x as i64, y as i64);
    for r in 0..w.max(h) {
        for yy in (y - r).max(0)..=(y + r).min(h - 1) {
            for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                if (xx - x).abs().max((yy - y).abs()) == r
                    && !occupied.get(xx as usize, yy as usize)
                {
                    return (xx as usize, yy as usize);
                }
            }
        }
    }
    (x as usize, y as usize)
}

/// Scripted prompts built from the ground truth, one per target instance.
pub fn oracle_prompts(scene: &Scene, query: &Query, schema: &PromptSchema) -> PromptSet {
    let occupied = scene
        .instances
        .iter()
        .fold(query.gt_mask.clone(), |mut acc, i| {
            let _ = acc.or_assign(&i.mask);
            acc
        });
    let prompts = target_instances(scene, query)
        .iter()
        .filter_map(|m| {
            let (bbox, pts) = derive_box_points(m).ok()?;
            let mut pos = vec![(pts[0].x, pts[0].y), (pts[1].x, pts[1].y)];
            if schema.mode == PromptMode::BboxPos4 {
                let first = m.iter_ones().next()?;
                let last = m.iter_ones().last()?;
                pos.extend([first, last]);
            }
            pos.truncate(schema.mode.positive_points());
            let neg: Vec<(usize, usize)> = if schema.mode.negative_points() > 0 {
                vec![
                    nearest_free(&occupied, bbox.x1, bbox.y1),
                    nearest_free(&occupied, bbox.x2, bbox.y2),
                ]
            } else {
                Vec::new()
            };
            Some(InstancePrompt::new(
                schema.mode.has_box().then_some(bbox),
                &pos,
                &neg,
            ))
        })
        .collect();
    PromptSet::new(prompts)
}

/// Serialized policy: parameters plus everything needed to rebuild the action
/// space and features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub shape: [usize; 2],
    pub theta: Vec<f64>,
    pub action_space: ActionSpaceConfig,
    pub features: FeatureConfig,
    pub schema: PromptMode,
    pub canvas: [usize; 2],
    pub seed_lineage: Vec<u64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "promptseg-checkpoint";

impl Checkpoint {
    pub fn new(
        params: &PolicyParams,
        space: &ActionSpace,
        features: &FeatureConfig,
        seed_lineage: Vec<u64>,
        config: serde_json::Value,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            shape: [params.rows, params.cols],
            theta: params.theta.clone(),
            action_space: space.config.clone(),
            features: *features,
            schema: space.schema.mode,
            canvas: [space.schema.width, space.schema.height],
            seed_lineage,
            config,
        }
    }

    pub fn params(&self) -> Result<PolicyParams> {
        let p = PolicyParams {
            rows: self.shape[0],
            cols: self.shape[1],
            theta: self.theta.clone(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn action_space(&self) -> Result<ActionSpace> {
        let space = ActionSpace::new(
            self.action_space.clone(),
            PromptSchema::new(self.schema, self.canvas[0], self.canvas[1]),
        )?;
        if space.num_logits() != self.shape[0] || self.features.dim() != self.shape[1] {
            return Err(Error::Policy(format!(
                "checkpoint shape {:?} disagrees with its action space / feature config",
                self.shape
            )));
        }
        Ok(space)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Policy(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path, None, e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::malformed(
                path,
                None,
                format!("not a checkpoint (format '{}')", ck.format),
            ));
        }
        ck.params()?;
        ck.action_space()?;
        Ok(ck)
    }
}
