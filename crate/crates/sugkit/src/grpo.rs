//! Group-relative policy optimisation driven by beam-decoded groups.
//!
//! The reward routine follows the shaping recipe exactly: a gap term that
//! pays top-K members and taxes the tail, a format penalty for invalid
//! sequences, rank-aware bonuses around the best ground-truth match, a
//! swap of tail slots for bad head slots, and floors that keep valid
//! sequences attractive when the truth never showed up.

use serde::{Deserialize, Serialize};

use crate::context::{self, SuggestionContext};
use crate::decoder::{decode_group, Hypothesis};
use crate::error::{CoreError, Result};
use crate::eval::normalize_query;
use crate::scorer::{Gradient, ScorerModel};
use crate::vocab::Vocabulary;

/// How training groups are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Width-G beam decode (the intended mode).
    Beam,
    /// Ancestral sampling, G independent draws.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Group size.
    pub g: usize,
    /// Head size for the gap/hit terms; must be < g.
    pub k: usize,
    /// Ratio clip half-width.
    pub eps: f64,
    /// Advantage denominator smoothing.
    pub delta: f64,
    /// KL coefficient; only 0 is supported.
    pub beta: f64,
    pub lambda_gap: f64,
    pub lambda_hit: f64,
    pub lambda_rank: f64,
    pub lambda_fmt: f64,
    pub lambda_miss: f64,
    /// Loss weight for converted (order-originated) instances.
    pub lambda_order: f64,
    pub lr: f64,
    /// Decode step budget; doubles as the validity length cap.
    pub t: usize,
    pub sampler: Sampler,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            g: 16,
            k: 12,
            eps: 0.1,
            delta: 1e-4,
            beta: 0.0,
            lambda_gap: 1.0,
            lambda_hit: 1.0,
            lambda_rank: 2.0,
            lambda_fmt: 4.0,
            lambda_miss: 1.0,
            lambda_order: 1.5,
            lr: 2e-6,
            t: 15,
            sampler: Sampler::Beam,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::Config("k must be at least 1".into()));
        }
        if self.g <= self.k {
            return Err(CoreError::Config(format!(
                "group size g ({}) must exceed head size k ({})",
                self.g, self.k
            )));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(CoreError::Config("eps must lie in (0, 1)".into()));
        }
        if !(self.delta > 0.0) {
            return Err(CoreError::Config("delta must be positive".into()));
        }
        if self.beta != 0.0 {
            return Err(CoreError::Config(
                "KL regularization is unsupported; set beta = 0".into(),
            ));
        }
        for (name, v) in [
            ("lambda_gap", self.lambda_gap),
            ("lambda_hit", self.lambda_hit),
            ("lambda_rank", self.lambda_rank),
            ("lambda_fmt", self.lambda_fmt),
            ("lambda_miss", self.lambda_miss),
            ("lambda_order", self.lambda_order),
        ] {
            if !(v >= 0.0) {
                return Err(CoreError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.lr >= 0.0) {
            return Err(CoreError::Config("lr must be non-negative".into()));
        }
        if self.t == 0 {
            return Err(CoreError::Config("t must be at least 1".into()));
        }
        Ok(())
    }
}

/// Unweighted shares of each reward term, so that
/// `R = lg*gap + lh*hit + lr*rank - lf*fmt - lm*miss + floor`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RewardTerms {
    pub r_gap: f64,
    pub r_hit: f64,
    pub r_rank: f64,
    pub r_fmt: f64,
    pub r_miss: f64,
    /// Absolute remainder introduced by the max/min floors.
    pub r_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BestMatch {
    pub index: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub v_gap: f64,
    pub v_tail: f64,
    /// Invalid head entries remaining after the tail swap.
    pub cnt_bad: usize,
    /// 1-based rank of each sequence by score (ties by index).
    pub ranks: Vec<usize>,
    pub best_match: Option<BestMatch>,
    /// Rewards as they stood before the final floor pass.
    pub pre_floor: Vec<f64>,
    pub terms: Vec<RewardTerms>,
}

fn log10_rank(rank: usize) -> f64 {
    ((rank + 1) as f64).log10()
}

/// Computes shaped rewards for one decoded group.
///
/// `truth` compares by exact string equality against the detokenized
/// queries; `None` marks an instance with no usable ground truth.
pub fn compute_rewards(
    queries: &[String],
    scores: &[f64],
    valid: &[bool],
    truth: Option<&str>,
    cfg: &GrpoConfig,
) -> Result<(Vec<f64>, RewardBreakdown)> {
    let n = queries.len();
    if scores.len() != n || valid.len() != n {
        return Err(CoreError::Input(format!(
            "group arrays disagree: {} queries, {} scores, {} validity flags",
            n,
            scores.len(),
            valid.len()
        )));
    }
    if n < 2 {
        return Err(CoreError::Input(format!(
            "a reward group needs at least 2 sequences, got {n}"
        )));
    }
    if n <= cfg.k {
        return Err(CoreError::Config(format!(
            "group size {n} must exceed k ({}) for the tail share to exist",
            cfg.k
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::Input("scores must be finite".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });
    let mut ranks = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }

    let k = cfg.k;
    let v_gap = cfg.lambda_gap;
    let v_tail = k as f64 * v_gap / ((n - k) as f64);
    let tail_share = k as f64 / ((n - k) as f64);

    let mut rewards = vec![0.0f64; n];
    let mut terms = vec![RewardTerms::default(); n];

    for i in 0..n {
        if ranks[i] <= k {
            rewards[i] += v_gap;
            terms[i].r_gap = 1.0;
        } else {
            rewards[i] -= v_tail;
            terms[i].r_gap = -tail_share;
        }
    }

    let mut cnt_bad = 0usize;
    for i in 0..n {
        if !valid[i] {
            rewards[i] -= cfg.lambda_fmt;
            terms[i].r_fmt = 1.0;
            if ranks[i] <= k {
                cnt_bad += 1;
            }
        }
    }

    let best = truth.and_then(|t| {
        (0..n)
            .filter(|&i| queries[i] == t)
            .min_by_key(|&i| ranks[i])
    });

    let pre_floor;
    if let Some(idx) = best {
        let r_star = ranks[idx];
        let mut bonus = cfg.lambda_rank / log10_rank(r_star);
        terms[idx].r_rank += 1.0 / log10_rank(r_star);
        terms[idx].r_hit = 1.0;
        if r_star <= k {
            bonus += cfg.lambda_hit;
        } else {
            bonus += cfg.lambda_hit + v_tail;
            if cfg.lambda_gap > 0.0 {
                terms[idx].r_gap += tail_share;
            }
        }
        rewards[idx] += bonus;

        for j in 0..n {
            if ranks[j] < r_star {
                let pen = cfg.lambda_rank / log10_rank(ranks[j]);
                rewards[j] -= pen;
                terms[j].r_rank -= 1.0 / log10_rank(ranks[j]);
            }
        }

        pre_floor = rewards.clone();

        // hand tail slots their head-slot pay while invalid entries occupy
        // the head; visit the tail best-first
        for &j in &order {
            if ranks[j] > k && valid[j] && cnt_bad > 0 {
                let before = rewards[j];
                rewards[j] = rewards[j].max(1.0);
                terms[j].r_floor += rewards[j] - before;
                cnt_bad -= 1;
            }
        }
    } else {
        let half = k / 2;
        for i in 0..n {
            if ranks[i] <= half {
                let target = -cfg.lambda_miss;
                if rewards[i] > target {
                    let before = rewards[i];
                    terms[i].r_miss = 1.0;
                    terms[i].r_floor += (target - before) + cfg.lambda_miss;
                    rewards[i] = target;
                }
            }
        }

        pre_floor = rewards.clone();

        for i in 0..n {
            if valid[i] {
                let before = rewards[i];
                rewards[i] = rewards[i].max(1.0);
                terms[i].r_floor += rewards[i] - before;
            }
        }
    }

    let breakdown = RewardBreakdown {
        v_gap,
        v_tail,
        cnt_bad,
        ranks,
        best_match: best.map(|index| BestMatch {
            index,
            rank: breakdown_rank(&order, index),
        }),
        pre_floor,
        terms,
    };
    Ok((rewards, breakdown))
}

fn breakdown_rank(order: &[usize], index: usize) -> usize {
    order.iter().position(|&i| i == index).unwrap() + 1
}

/// Reconstructs a reward from its term shares; used by invariants and tests.
pub fn reconstruct_reward(terms: &RewardTerms, cfg: &GrpoConfig) -> f64 {
    cfg.lambda_gap * terms.r_gap
        + cfg.lambda_hit * terms.r_hit
        + cfg.lambda_rank * terms.r_rank
        - cfg.lambda_fmt * terms.r_fmt
        - cfg.lambda_miss * terms.r_miss
        + terms.r_floor
}

fn center_exact(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    for _ in 0..2 {
        let sum: f64 = xs.iter().sum();
        if sum == 0.0 {
            return;
        }
        let adj = sum / n;
        for x in xs.iter_mut() {
            *x -= adj;
        }
    }
    // The mean passes leave at most a few ulps of residue; fold it into the
    // last element so the running sum cancels term-for-term.
    let (last, head) = xs.split_last_mut().expect("non-empty slice");
    let partial: f64 = head.iter().sum();
    *last = -partial;
}

/// Group-level reward statistics alongside the advantages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupStats {
    pub mean_reward: f64,
    /// Population standard deviation.
    pub std_reward: f64,
    /// Rank of the best truth match, when one exists in the group.
    pub hit_rank: Option<usize>,
}

/// Group-normalized advantages: `(r - mean) / (pop_std + delta)`, then
/// re-centered so the floating-point mean is exactly zero.
pub fn compute_advantages(rewards: &[f64], delta: f64) -> (Vec<f64>, GroupStats) {
    debug_assert!(delta > 0.0);
    let n = rewards.len();
    if n == 0 {
        return (
            Vec::new(),
            GroupStats {
                mean_reward: 0.0,
                std_reward: 0.0,
                hit_rank: None,
            },
        );
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let mut centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    center_exact(&mut centered);
    let var = centered.iter().map(|c| c * c).sum::<f64>() / n as f64;
    let denom = var.sqrt() + delta;
    let mut adv: Vec<f64> = centered.iter().map(|c| c / denom).collect();
    center_exact(&mut adv);
    (
        adv,
        GroupStats {
            mean_reward: mean,
            std_reward: var.sqrt(),
            hit_rank: None,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeqLoss {
    pub ratio: f64,
    pub clipped_ratio: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossDetail {
    pub per_seq: Vec<SeqLoss>,
    pub clip_fraction: f64,
}

/// Clipped surrogate loss for one group. `weights` multiplies per-sequence
/// contributions (converted instances carry `lambda_order`).
pub fn grpo_loss(
    policy_lps: &[f64],
    ref_lps: &[f64],
    advantages: &[f64],
    weights: &[f64],
    eps: f64,
) -> Result<(f64, LossDetail)> {
    let n = policy_lps.len();
    if ref_lps.len() != n || advantages.len() != n || weights.len() != n {
        return Err(CoreError::Input("loss arrays disagree in length".into()));
    }
    if n == 0 {
        return Err(CoreError::Input("empty group".into()));
    }
    if policy_lps.iter().chain(ref_lps).any(|lp| !lp.is_finite()) {
        return Err(CoreError::Input(
            "non-finite log-probability in the loss".into(),
        ));
    }
    let lo = 1.0 - eps;
    let hi = 1.0 + eps;
    let mut per_seq = Vec::with_capacity(n);
    let mut acc = 0.0f64;
    let mut clipped_count = 0usize;
    for i in 0..n {
        let ratio = (policy_lps[i] - ref_lps[i]).exp();
        let clipped_ratio = ratio.clamp(lo, hi);
        let clipped = ratio < lo || ratio > hi;
        if clipped {
            clipped_count += 1;
        }
        acc += weights[i] * advantages[i] * clipped_ratio;
        per_seq.push(SeqLoss {
            ratio,
            clipped_ratio,
            clipped,
        });
    }
    let loss = -(acc / n as f64);
    Ok((
        loss,
        LossDetail {
            per_seq,
            clip_fraction: clipped_count as f64 / n as f64,
        },
    ))
}

/// Format validity of a generated token sequence.
///
/// One trailing stop token is tolerated; the remaining body must be
/// non-empty after normalization, at most `max_tokens` long, free of
/// reserved tokens, and must not repeat any token four or more times in a
/// row.
pub fn validity_check(vocab: &Vocabulary, tokens: &[crate::vocab::TokenId], max_tokens: usize) -> bool {
    let stop_ids = vocab.stop_ids();
    let body = match tokens.last() {
        Some(last) if stop_ids.contains(last) => &tokens[..tokens.len() - 1],
        _ => tokens,
    };
    if body.is_empty() || body.len() > max_tokens {
        return false;
    }
    if body
        .iter()
        .any(|&t| (t as usize) >= vocab.len() || vocab.is_reserved(t))
    {
        return false;
    }
    let mut run = 1usize;
    for w in body.windows(2) {
        if w[0] == w[1] {
            run += 1;
            if run >= 4 {
                return false;
            }
        } else {
            run = 1;
        }
    }
    let text = vocab.detokenize(body);
    !normalize_query(&text).is_empty()
}

/// A training example: an assembled context plus the clicked (or converted)
/// query it should surface. Context fields serialize inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainInstance {
    #[serde(flatten)]
    pub context: SuggestionContext,
    pub truth: String,
    /// True when the label came from an order rather than a click.
    #[serde(default)]
    pub converted: bool,
}

/// Everything derived from decoding one instance's group.
#[derive(Debug, Clone)]
pub struct GroupSample {
    pub hyps: Vec<Hypothesis>,
    pub queries: Vec<String>,
    pub valid: Vec<bool>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub policy_lps: Vec<f64>,
    pub ref_lps: Vec<f64>,
    pub weight: f64,
    pub truth_found: bool,
    pub breakdown: RewardBreakdown,
    pub stats: GroupStats,
}

/// Ancestral sampling fallback for group construction.
pub fn sample_group(
    model: &ScorerModel,
    context: &[crate::vocab::TokenId],
    g: usize,
    t: usize,
    rng: &mut impl rand::Rng,
) -> Vec<Hypothesis> {
    let stop_ids = model.vocab().stop_ids();
    let mut out = Vec::with_capacity(g);
    for _ in 0..g {
        let mut tokens = Vec::new();
        let mut score = 0.0;
        let mut finished = false;
        let mut full = context.to_vec();
        for _ in 0..t {
            let v = model.sample_next(&full, rng);
            score += model.score_next(&full).log_prob(v);
            tokens.push(v);
            full.push(v);
            if stop_ids.contains(&v) {
                finished = true;
                break;
            }
        }
        out.push(Hypothesis {
            tokens,
            score,
            finished,
        });
    }
    out
}

/// Decodes and scores one group. Returns `None` when the group is too small
/// to train on (fewer than 2 sequences, or not enough to cover k).
pub fn build_group(
    policy: &ScorerModel,
    reference: &ScorerModel,
    ctx_tokens: &[crate::vocab::TokenId],
    truth: &str,
    converted: bool,
    cfg: &GrpoConfig,
    rng: &mut impl rand::Rng,
) -> Result<Option<GroupSample>> {
    let hyps = match cfg.sampler {
        Sampler::Beam => decode_group(policy, ctx_tokens, cfg.g, cfg.t).0,
        Sampler::Random => sample_group(policy, ctx_tokens, cfg.g, cfg.t, rng),
    };
    if hyps.len() < 2 || hyps.len() <= cfg.k {
        return Ok(None);
    }
    let vocab = policy.vocab();
    let queries: Vec<String> = hyps.iter().map(|h| vocab.detokenize(&h.tokens)).collect();
    let valid: Vec<bool> = hyps
        .iter()
        .map(|h| validity_check(vocab, &h.tokens, cfg.t))
        .collect();
    let scores: Vec<f64> = hyps.iter().map(|h| h.score).collect();
    let (rewards, breakdown) = compute_rewards(&queries, &scores, &valid, Some(truth), cfg)?;
    let (advantages, mut stats) = compute_advantages(&rewards, cfg.delta);
    stats.hit_rank = breakdown.best_match.map(|b| b.rank);
    let policy_lps = scores.clone();
    let mut ref_lps = Vec::with_capacity(hyps.len());
    for h in &hyps {
        ref_lps.push(reference.sequence_logprob(ctx_tokens, &h.tokens)?);
    }
    let truth_found = queries.iter().any(|q| q == truth);
    Ok(Some(GroupSample {
        hyps,
        queries,
        valid,
        rewards,
        advantages,
        policy_lps,
        ref_lps,
        weight: if converted { cfg.lambda_order } else { 1.0 },
        truth_found,
        breakdown,
        stats,
    }))
}

/// Per-step training report, one JSONL record per optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub group_hit_rate: f64,
    pub clip_fraction: f64,
    pub skipped_groups: usize,
}

/// One optimisation step over a batch of instances. The reference model is
/// the frozen policy snapshot taken at the start of training.
pub fn train_step(
    policy: &mut ScorerModel,
    reference: &ScorerModel,
    batch: &[TrainInstance],
    cfg: &GrpoConfig,
    step: usize,
    rng: &mut impl rand::Rng,
) -> Result<StepReport> {
    cfg.validate()?;
    let vocab = policy.vocab().clone();
    let mut grad: Gradient = Gradient::new();
    let mut loss_sum = 0.0f64;
    let mut reward_sum = 0.0f64;
    let mut reward_count = 0usize;
    let mut hit_groups = 0usize;
    let mut used_groups = 0usize;
    let mut skipped = 0usize;
    let mut clipped_seqs = 0usize;
    let mut total_seqs = 0usize;

    struct Pending {
        ctx: Vec<crate::vocab::TokenId>,
        group: GroupSample,
        detail: LossDetail,
    }
    let mut pendings: Vec<Pending> = Vec::new();

    for inst in batch {
        let (ctx_tokens, _) = context::serialize(&inst.context, &vocab);
        let group = match build_group(
            policy,
            reference,
            &ctx_tokens,
            &inst.truth,
            inst.converted,
            cfg,
            rng,
        )? {
            Some(g) => g,
            None => {
                skipped += 1;
                continue;
            }
        };
        let weights = vec![group.weight; group.hyps.len()];
        let (loss, detail) = grpo_loss(
            &group.policy_lps,
            &group.ref_lps,
            &group.advantages,
            &weights,
            cfg.eps,
        )?;
        used_groups += 1;
        loss_sum += loss;
        reward_sum += group.rewards.iter().sum::<f64>();
        reward_count += group.rewards.len();
        if group.truth_found {
            hit_groups += 1;
        }
        clipped_seqs += detail.per_seq.iter().filter(|s| s.clipped).count();
        total_seqs += detail.per_seq.len();
        pendings.push(Pending {
            ctx: ctx_tokens,
            group,
            detail,
        });
    }

    if used_groups > 0 {
        let batch_scale = 1.0 / used_groups as f64;
        for p in &pendings {
            let n = p.group.hyps.len() as f64;
            for (i, h) in p.group.hyps.iter().enumerate() {
                let seq = &p.detail.per_seq[i];
                if seq.clipped {
                    continue;
                }
                let coeff =
                    -(p.group.weight * p.group.advantages[i] * seq.ratio) * batch_scale / n;
                if coeff == 0.0 {
                    continue;
                }
                let seq_grad = policy.logprob_gradient(&p.ctx, &h.tokens)?;
                for (key, row) in seq_grad {
                    let entry = grad
                        .entry(key)
                        .or_insert_with(|| vec![0.0; vocab.len()]);
                    for (dst, src) in entry.iter_mut().zip(row.iter()) {
                        *dst += coeff * src;
                    }
                }
            }
        }
    }

    let loss = if used_groups > 0 {
        loss_sum / used_groups as f64
    } else {
        0.0
    };
    if !loss.is_finite() {
        return Err(CoreError::Diverged(format!(
            "non-finite loss at step {step}"
        )));
    }
    if !grad.is_empty() {
        policy.apply_update(&grad, -cfg.lr);
    }

    Ok(StepReport {
        step,
        loss,
        mean_reward: if reward_count > 0 {
            reward_sum / reward_count as f64
        } else {
            0.0
        },
        group_hit_rate: if used_groups > 0 {
            hit_groups as f64 / used_groups as f64
        } else {
            0.0
        },
        clip_fraction: if total_seqs > 0 {
            clipped_seqs as f64 / total_seqs as f64
        } else {
            0.0
        },
        skipped_groups: skipped,
    })
}

/// Full training run: freezes the reference, walks shuffled batches, and
/// returns one report per step.
pub fn train_grpo(
    policy: &mut ScorerModel,
    instances: &[TrainInstance],
    cfg: &GrpoConfig,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(CoreError::Input("no training instances".into()));
    }
    if batch_size == 0 {
        return Err(CoreError::Config("batch_size must be at least 1".into()));
    }
    let reference = policy.clone();
    let mut rng = crate::rng::substream(seed, "grpo-train");
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut cursor = instances.len();
    let mut reports = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor >= order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(instances[order[cursor]].clone());
            cursor += 1;
        }
        reports.push(train_step(
            policy, &reference, &batch, cfg, step, &mut rng,
        )?);
    }
    Ok(reports)
}
