//! Mask-only group relative policy optimization.
//!
//! Per sample, `G` rollouts are drawn from the frozen old policy, executed by
//! the segmenter and scored with
//!
//! ```text
//! R = λ_format · R_format + λ_iou · R_iou
//! ```
//!
//! Rewards are standardized within the group (population std) into
//! advantages, and the policy ascends
//!
//! ```text
//! J(θ) = mean_s [ (1/G) Σ_i min(r_i a_i, clip(r_i, 1−ε, 1+ε) a_i) − β · KL(π_θ ‖ π_ref) ]
//! ```
//!
//! with `r_i = π_θ(o_i) / π_old(o_i)` over whole sequences (no length
//! normalization) and the KL taken exactly between step distributions.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{iou, BinaryMask};
use crate::policy::{
    featurize, logit_grad, sample_rollouts, ActionSpace, ActionSpaceConfig, FeatureConfig,
    Features, PolicyParams, Rollout,
};
use crate::protocol::{format_reward, parse_response, ParseResult};
use crate::scene::{mix_seed, Query, Scene};
use crate::segmenter::SegmenterBackend;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub format: f64,
    pub iou: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            format: 1.0,
            iou: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: u8,
    pub r_iou: f64,
    pub total: f64,
}

/// `pred` must be present exactly when the response parsed to a nonempty prompt set.
pub fn compute_reward(
    pr: &ParseResult,
    pred: Option<&BinaryMask>,
    gt: &BinaryMask,
    w: &RewardWeights,
) -> Result<RewardBreakdown> {
    let r_format = format_reward(pr);
    let r_iou = match (pr, pred) {
        (Err(_), None) => 0.0,
        (Ok(p), None) if p.prompts.is_empty() => {
            if gt.is_empty() {
                1.0
            } else {
                0.0
            }
        }
        (Ok(p), Some(m)) if !p.prompts.is_empty() => {
            if gt.is_empty() {
                0.0
            } else {
                iou(m, gt)?
            }
        }
        (Err(_), Some(_)) => {
            return Err(Error::Reward(
                "segmenter output given for an unparseable response".into(),
            ))
        }
        (Ok(_), Some(_)) => {
            return Err(Error::Reward(
                "segmenter output given for an empty prompt set".into(),
            ))
        }
        (Ok(_), None) => {
            return Err(Error::Reward(
                "nonempty prompt set without segmenter output".into(),
            ))
        }
    };
    Ok(RewardBreakdown {
        r_format,
        r_iou,
        total: w.format * f64::from(r_format) + w.iou * r_iou,
    })
}

/// Groups with population std at or below this get all-zero advantages.
pub const EPS_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantages {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn compute_advantages(rewards: &[f64]) -> Result<GroupAdvantages> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let advantages = if std > EPS_STD {
        rewards.iter().map(|r| (r - mean) / std).collect()
    } else {
        vec![0.0; rewards.len()]
    };
    Ok(GroupAdvantages {
        rewards: rewards.to_vec(),
        advantages,
        mean,
        std,
    })
}

pub fn surrogate_value(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// True when the clipped branch is strictly smaller, i.e. the term has zero gradient.
pub fn is_clipped(ratio: f64, advantage: f64, eps: f64) -> bool {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    clipped * advantage < ratio * advantage
}

/// `KL(p ‖ q)` for two categorical distributions given as log-probabilities.
pub fn kl_categorical(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Exact KL between the step distributions of two parameter sets.
pub fn kl_divergence(p: &PolicyParams, q: &PolicyParams, phi: &Features) -> f64 {
    if p == q {
        return 0.0;
    }
    kl_categorical(&p.step_log_probs(phi), &q.step_log_probs(phi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UpdateRule {
    /// Plain gradient ascent.
    Sgd,
    /// Adam-style first/second moment rule.
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub inner_epochs: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: RewardWeights,
    pub update: UpdateRule,
    /// Initial first-step STOP probability; sets the STOP logit bias.
    pub init_stop_prob: f64,
    /// Half-width of the uniform noise added to the initial parameters.
    pub init_noise: f64,
    pub action_space: ActionSpaceConfig,
    pub features: FeatureConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 16,
            clip_eps: 0.2,
            beta: 1e-3,
            learning_rate: 2.0,
            inner_epochs: 1,
            iterations: 400,
            batch_size: 32,
            seed: 0,
            weights: RewardWeights::default(),
            update: UpdateRule::Sgd,
            init_stop_prob: 0.2,
            init_noise: 0.01,
            action_space: ActionSpaceConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps {} not in (0, 1)", self.clip_eps));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.weights.format < 0.0 || self.weights.iou < 0.0 {
            return bad("reward weights must be >= 0".into());
        }
        if !(self.init_stop_prob > 0.0 && self.init_stop_prob < 1.0) {
            return bad(format!(
                "init_stop_prob {} not in (0, 1)",
                self.init_stop_prob
            ));
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return bad(format!("init_noise must be >= 0, got {}", self.init_noise));
        }
        if self.inner_epochs == 0 || self.batch_size == 0 {
            return bad("inner_epochs and batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        Ok(())
    }

    /// Initial (and reference) parameters: uniform over the `A` actions with
    /// STOP at `init_stop_prob`, plus seeded noise.
    pub fn initial_params(&self, space: &ActionSpace) -> PolicyParams {
        let p = self.init_stop_prob;
        let bias = (space.num_actions() as f64 * p / (1.0 - p)).ln();
        PolicyParams::init(space, &self.features, bias, self.init_noise, self.seed)
    }
}

/// One scored rollout as the objective needs it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRollout {
    pub actions: Vec<usize>,
    pub old_logprob: f64,
    pub reward: RewardBreakdown,
    /// Per-sample IoU under the evaluation convention (equal to `r_iou`).
    pub iou: f64,
}

/// A sample's features with its group of scored rollouts and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub phi: Features,
    pub rollouts: Vec<ScoredRollout>,
    pub advantages: Vec<f64>,
}

impl Group {
    /// Builds a group from hand-specified rollouts; advantages come from the rewards.
    pub fn new(phi: Features, rollouts: Vec<ScoredRollout>) -> Result<Self> {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
        let advantages = compute_advantages(&rewards)?.advantages;
        Ok(Group {
            phi,
            rollouts,
            advantages,
        })
    }
}

/// `J(θ)` over a batch of groups.
pub fn objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[Group],
    eps: f64,
    beta: f64,
) -> f64 {
    let total: f64 = groups
        .iter()
        .map(|g| {
            let lp = params.step_log_probs(&g.phi);
            let n = g.rollouts.len() as f64;
            let surr: f64 = g
                .rollouts
                .iter()
                .zip(&g.advantages)
                .map(|(r, &a)| {
                    let new_lp: f64 = r.actions.iter().map(|&x| lp[x]).sum();
                    surrogate_value((new_lp - r.old_logprob).exp(), a, eps)
                })
                .sum::<f64>()
                / n;
            surr - beta * kl_categorical(&lp, &reference.step_log_probs(&g.phi))
        })
        .sum();
    total / groups.len() as f64
}

/// Analytic `∇J(θ)` and the number of rollouts whose clipped branch was active.
pub fn objective_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[Group],
    eps: f64,
    beta: f64,
) -> Result<(PolicyParams, usize)> {
    let per_group = groups
        .par_iter()
        .map(|g| -> Result<(Vec<f64>, usize)> {
            let lp = params.step_log_probs(&g.phi);
            let mut coef = vec![0.0; params.rows];
            let mut clipped = 0;
            let n = g.rollouts.len() as f64;
            for (r, &a) in g.rollouts.iter().zip(&g.advantages) {
                let new_lp: f64 = r.actions.iter().map(|&x| lp[x]).sum();
                let ratio = (new_lp - r.old_logprob).exp();
                if is_clipped(ratio, a, eps) {
                    clipped += 1;
                    continue;
                }
                if a == 0.0 {
                    continue;
                }
                let dlogp = logit_grad(params, &g.phi, &r.actions)?;
                coef.iter_mut()
                    .zip(&dlogp)
                    .for_each(|(c, d)| *c += ratio * a * d / n);
            }
            if beta > 0.0 {
                let lq = reference.step_log_probs(&g.phi);
                let kl = kl_categorical(&lp, &lq);
                // ∂KL/∂z_j = p_j (log p_j − log q_j − KL)
                for j in 0..coef.len() {
                    coef[j] -= beta * lp[j].exp() * (lp[j] - lq[j] - kl);
                }
            }
            Ok((coef, clipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = PolicyParams::zeros(params.rows, params.cols);
    let mut clipped = 0;
    let scale = 1.0 / groups.len() as f64;
    for ((coef, c), g) in per_group.iter().zip(groups) {
        grad.add_outer(scale, coef, &g.phi);
        clipped += c;
    }
    Ok((grad, clipped))
}

/// Optimizer state carried across steps.
#[derive(Debug, Clone)]
pub struct Optimizer {
    rule: UpdateRule,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(rule: UpdateRule, lr: f64) -> Self {
        Optimizer {
            rule,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Ascent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams) {
        match self.rule {
            UpdateRule::Sgd => {
                for (p, g) in params.theta.iter_mut().zip(&grad.theta) {
                    *p += self.lr * g;
                }
            }
            UpdateRule::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if self.m.len() != grad.theta.len() {
                    self.m = vec![0.0; grad.theta.len()];
                    self.v = vec![0.0; grad.theta.len()];
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..grad.theta.len() {
                    let g = grad.theta[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    params.theta[i] +=
                        self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + epsilon);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_giou: f64,
    pub clip_frac: f64,
    pub kl: f64,
    pub wall_ms: u64,
}

/// Samples and scores one group from the old policy.
#[allow(clippy::too_many_arguments)]
pub fn collect_group(
    scene: &Scene,
    query: &Query,
    phi: Features,
    old_params: &PolicyParams,
    cfg: &GrpoConfig,
    space: &ActionSpace,
    segmenter: &dyn SegmenterBackend,
    seed: u64,
) -> Result<Group> {
    let rollouts = sample_rollouts(old_params, &phi, cfg.group_size, space, seed)?;
    let scored = rollouts
        .into_iter()
        .map(|r| score_rollout(scene, query, r, space, segmenter, &cfg.weights))
        .collect::<Result<Vec<_>>>()?;
    Group::new(phi, scored)
}

fn score_rollout(
    scene: &Scene,
    query: &Query,
    r: Rollout,
    space: &ActionSpace,
    segmenter: &dyn SegmenterBackend,
    weights: &RewardWeights,
) -> Result<ScoredRollout> {
    let parsed = parse_response(&r.text, &space.schema);
    let pred = match &parsed {
        Ok(p) if !p.prompts.is_empty() => {
            Some(segmenter.execute_set(scene, &p.prompts, &space.schema)?)
        }
        _ => None,
    };
    let reward = compute_reward(&parsed, pred.as_ref(), &query.gt_mask, weights)?;
    Ok(ScoredRollout {
        actions: r.actions,
        old_logprob: r.logprob,
        reward,
        iou: reward.r_iou,
    })
}

/// One GRPO update over a batch. Returns the new parameters and statistics.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &[(&Scene, &Query, &Features)],
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    cfg: &GrpoConfig,
    segmenter: &dyn SegmenterBackend,
    space: &ActionSpace,
    optimizer: &mut Optimizer,
    seed: u64,
) -> Result<(PolicyParams, TrainStats)> {
    cfg.validate()?;
    let start = Instant::now();
    let groups = batch
        .par_iter()
        .enumerate()
        .map(|(i, (scene, query, phi))| {
            collect_group(
                scene,
                query,
                (*phi).clone(),
                old_params,
                cfg,
                space,
                segmenter,
                mix_seed(seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut new = params.clone();
    let mut clipped = 0;
    for _ in 0..cfg.inner_epochs {
        let (grad, c) = objective_grad(&new, ref_params, &groups, cfg.clip_eps, cfg.beta)?;
        optimizer.step(&mut new, &grad);
        clipped += c;
    }
    let n_rollouts: usize = groups.iter().map(|g| g.rollouts.len()).sum();
    let mean = |f: &dyn Fn(&ScoredRollout) -> f64| {
        groups.iter().flat_map(|g| &g.rollouts).map(f).sum::<f64>() / n_rollouts as f64
    };
    let kl = groups
        .iter()
        .map(|g| kl_divergence(&new, ref_params, &g.phi))
        .sum::<f64>()
        / groups.len() as f64;
    let stats = TrainStats {
        iter: 0,
        mean_reward: mean(&|r| r.reward.total),
        mean_giou: mean(&|r| r.iou),
        clip_frac: clipped as f64 / (n_rollouts * cfg.inner_epochs) as f64,
        kl,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok((new, stats))
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: PolicyParams,
    pub params: PolicyParams,
    pub stats: Vec<TrainStats>,
}

/// Runs `cfg.iterations` GRPO steps. The old policy is refreshed every
/// iteration; the reference policy stays at initialization. Each stats record
/// is written to `log` (JSONL) as soon as its iteration finishes.
pub fn train(
    samples: &[(&Scene, &Query)],
    cfg: &GrpoConfig,
    space: &ActionSpace,
    segmenter: &dyn SegmenterBackend,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let features: Vec<Features> = samples
        .par_iter()
        .map(|(s, q)| featurize(s, q, &cfg.features))
        .collect();
    let initial = cfg.initial_params(space);
    let reference = initial.clone();
    let mut params = initial.clone();
    let mut optimizer = Optimizer::new(cfg.update, cfg.learning_rate);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut stats = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        while batch_idx.len() < cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
                    cfg.seed,
                    u64::MAX - epoch,
                )));
                epoch += 1;
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<(&Scene, &Query, &Features)> = batch_idx
            .iter()
            .map(|&i| (samples[i].0, samples[i].1, &features[i]))
            .collect();
        let old = params.clone();
        let (next, mut s) = train_step(
            &batch,
            &params,
            &old,
            &reference,
            cfg,
            segmenter,
            space,
            &mut optimizer,
            mix_seed(cfg.seed, it as u64),
        )?;
        params = next;
        s.iter = it;
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&s).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("<stats log>", e))?;
        }
        stats.push(s);
    }
    Ok(TrainOutcome {
        initial,
        params,
        stats,
    })
}
