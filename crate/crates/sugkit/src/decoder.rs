//! Beam decoding: a vanilla reference and the quality-aware accelerated
//! variant.
//!
//! `beam_search` is the oracle: stepped search with width `k`, expanding
//! every active token per beam. Stop-token extensions leave the frontier
//! and accumulate in a finished pool at every step; the output is the top-k
//! of the pool plus whatever the frontier still holds.
//!
//! `qa_beam_search` runs the same loop with a restricted continuing fan-out
//! (`k_search` tokens per beam), a sliding score window that gates which
//! finished candidates are accepted, a score threshold `tau`, and two early
//! exits (saturation and fail-safe). With the gates disabled it reproduces
//! `beam_search` exactly: stop tokens are always evaluated and never occupy
//! fan-out slots, and a beam never contributes more than `k_search`
//! survivors to the next frontier, so the restricted fan-out loses nothing.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scorer::ScorerModel;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens only (no context); finished ones end with a stop id.
    pub tokens: Vec<TokenId>,
    /// Cumulative log-probability under the decoded model.
    pub score: f64,
    pub finished: bool,
}

/// Gating and budget knobs for [`qa_beam_search`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QabsParams {
    /// Result count.
    pub k: usize,
    /// Step budget (max generated tokens).
    pub t: usize,
    /// Score threshold for candidates and beams.
    pub tau: f64,
    /// Saturation exit once the accepted pool reaches `alpha * k`.
    pub alpha: f64,
    /// Fail-safe exit needs at least this many accepted candidates.
    pub r_min: usize,
    /// Continuing fan-out per beam and frontier width.
    pub k_search: usize,
    /// Capacity of the per-step score window.
    pub k_win: usize,
}

impl Default for QabsParams {
    fn default() -> Self {
        Self {
            k: 12,
            t: 15,
            tau: -15.0,
            alpha: 1.8,
            r_min: 4,
            k_search: 12,
            k_win: 15,
        }
    }
}

impl QabsParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.t == 0 || self.k_search == 0 || self.k_win == 0 {
            return Err(CoreError::Config(
                "k, t, k_search and k_win must all be at least 1".into(),
            ));
        }
        if self.tau.is_nan() {
            return Err(CoreError::Config("tau must not be NaN".into()));
        }
        if !(self.alpha * self.k as f64 >= 1.0) {
            return Err(CoreError::Config(format!(
                "alpha * k must be at least 1, got {}",
                self.alpha * self.k as f64
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    /// Accepted pool reached `alpha * k`.
    Saturation,
    /// Best remaining candidate fell below `tau` with enough results banked.
    FailSafe,
    /// Step budget `t` ran out.
    Budget,
    /// The frontier emptied before the budget.
    BeamsExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub steps: usize,
    pub model_calls: usize,
    pub exit_reason: ExitReason,
    pub result_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Suggestion {
    pub query: String,
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SuggestionList {
    pub items: Vec<Suggestion>,
}

/// Final ranking: score desc, finished first, shorter first, then token
/// order. Applied identically by both decoders so outputs stay comparable.
fn cmp_final(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| b.finished.cmp(&a.finished))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Frontier ranking during a step (all candidates share a length).
fn cmp_frontier(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn rank_and_truncate(mut pool: Vec<Hypothesis>, k: usize) -> Vec<Hypothesis> {
    pool.sort_by(cmp_final);
    pool.truncate(k);
    pool
}

fn extend_context(context: &[TokenId], generated: &[TokenId]) -> Vec<TokenId> {
    let mut full = Vec::with_capacity(context.len() + generated.len());
    full.extend_from_slice(context);
    full.extend_from_slice(generated);
    full
}

/// Keeps the best `cap` scores seen during a step; `min` is `-inf` until
/// the window fills.
struct ScoreWindow {
    cap: usize,
    vals: Vec<f64>,
}

impl ScoreWindow {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            vals: Vec::with_capacity(cap.min(1024)),
        }
    }

    fn update(&mut self, s: f64) {
        if self.cap == 0 {
            return;
        }
        if self.vals.len() < self.cap {
            let pos = self.vals.partition_point(|&x| x < s);
            self.vals.insert(pos, s);
        } else if s > self.vals[0] {
            self.vals.remove(0);
            let pos = self.vals.partition_point(|&x| x < s);
            self.vals.insert(pos, s);
        }
    }

    fn min(&self) -> f64 {
        if self.cap == 0 || self.vals.len() < self.cap {
            f64::NEG_INFINITY
        } else {
            self.vals[0]
        }
    }
}

/// Vanilla beam search: width `k`, full active-vocabulary expansion, `t`
/// steps. Returns the ranked top-k hypotheses and decode statistics.
pub fn beam_search(
    model: &ScorerModel,
    context: &[TokenId],
    k: usize,
    t: usize,
) -> (Vec<Hypothesis>, DecodeStats) {
    let stop_ids = model.vocab().stop_ids();
    let width = model.vocab().len();
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut calls = 0usize;
    let mut steps = 0usize;
    let mut exit_reason = ExitReason::Budget;

    if k == 0 {
        beams.clear();
    }
    for _ in 0..t {
        if beams.is_empty() {
            exit_reason = ExitReason::BeamsExhausted;
            break;
        }
        steps += 1;
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for beam in &beams {
            let full = extend_context(context, &beam.tokens);
            let dist = model.score_next(&full);
            calls += 1;
            for v in 0..width as TokenId {
                let lp = dist.log_probs[v as usize];
                if !lp.is_finite() {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(v);
                let hyp = Hypothesis {
                    tokens,
                    score: beam.score + lp,
                    finished: stop_ids.contains(&v),
                };
                if hyp.finished {
                    finished.push(hyp);
                } else {
                    candidates.push(hyp);
                }
            }
        }
        candidates.sort_by(cmp_frontier);
        candidates.truncate(k);
        beams = candidates;
    }

    let mut pool = finished;
    pool.extend(beams);
    let ranked = rank_and_truncate(pool, k);
    let stats = DecodeStats {
        steps,
        model_calls: calls,
        exit_reason,
        result_count: ranked.len(),
    };
    (ranked, stats)
}

/// Quality-aware accelerated beam search.
pub fn qa_beam_search(
    model: &ScorerModel,
    context: &[TokenId],
    params: &QabsParams,
) -> (Vec<Hypothesis>, DecodeStats) {
    debug_assert!(params.validate().is_ok(), "invalid QabsParams");
    let stop_ids = model.vocab().stop_ids();
    let width = model.vocab().len();
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut accepted: Vec<Hypothesis> = Vec::new();
    let mut calls = 0usize;
    let mut steps = 0usize;
    let mut exit_reason = ExitReason::Budget;

    if params.k == 0 {
        beams.clear();
    }
    'outer: for _ in 0..params.t {
        if beams.is_empty() {
            exit_reason = ExitReason::BeamsExhausted;
            break;
        }
        steps += 1;
        let mut candidates: Vec<Hypothesis> = Vec::new();
        let mut pending: Vec<Hypothesis> = Vec::new();
        let mut window = ScoreWindow::new(params.k_win);

        for beam in &beams {
            let full = extend_context(context, &beam.tokens);
            let dist = model.score_next(&full);
            calls += 1;

            // continuing fan-out: best k_search non-stop tokens
            let mut continuing: Vec<(TokenId, f64)> = (0..width as TokenId)
                .filter(|v| !stop_ids.contains(v))
                .filter_map(|v| {
                    let lp = dist.log_probs[v as usize];
                    lp.is_finite().then_some((v, lp))
                })
                .collect();
            continuing.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            continuing.truncate(params.k_search);
            for (v, lp) in continuing {
                let s_new = beam.score + lp;
                window.update(s_new);
                let mut tokens = beam.tokens.clone();
                tokens.push(v);
                candidates.push(Hypothesis {
                    tokens,
                    score: s_new,
                    finished: false,
                });
            }

            // stop tokens are always evaluated and never use fan-out slots
            for &v in &stop_ids {
                let lp = dist.log_probs[v as usize];
                if !lp.is_finite() {
                    continue;
                }
                let s_new = beam.score + lp;
                window.update(s_new);
                if s_new > params.tau {
                    let mut tokens = beam.tokens.clone();
                    tokens.push(v);
                    pending.push(Hypothesis {
                        tokens,
                        score: s_new,
                        finished: true,
                    });
                }
            }
        }

        for hyp in pending {
            if hyp.score > window.min() && hyp.score >= params.tau {
                accepted.push(hyp);
            }
        }

        if accepted.len() as f64 >= params.alpha * params.k as f64 {
            exit_reason = ExitReason::Saturation;
            break 'outer;
        }
        if let Some(best) = candidates
            .iter()
            .map(|h| h.score)
            .max_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal))
        {
            if best < params.tau && accepted.len() >= params.r_min {
                exit_reason = ExitReason::FailSafe;
                break 'outer;
            }
        }

        candidates.retain(|h| h.score >= params.tau);
        candidates.sort_by(cmp_frontier);
        candidates.truncate(params.k_search);
        beams = candidates;
    }

    let mut pool = accepted;
    pool.extend(beams);
    let ranked = rank_and_truncate(pool, params.k);
    let stats = DecodeStats {
        steps,
        model_calls: calls,
        exit_reason,
        result_count: ranked.len(),
    };
    (ranked, stats)
}

/// Decodes a training group: the top-g results of the oracle beam search
/// at width g. Fewer than g distinct sequences may exist; the group is then
/// whatever is available.
pub fn decode_group(
    model: &ScorerModel,
    context: &[TokenId],
    g: usize,
    t: usize,
) -> (Vec<Hypothesis>, DecodeStats) {
    beam_search(model, context, g, t)
}

/// Detokenizes ranked hypotheses. Unfinished entries are dropped unless
/// nothing finished, in which case they are kept (and flagged).
pub fn to_suggestions(vocab: &Vocabulary, hyps: &[Hypothesis]) -> SuggestionList {
    let any_finished = hyps.iter().any(|h| h.finished);
    let items = hyps
        .iter()
        .filter(|h| h.finished || !any_finished)
        .map(|h| Suggestion {
            query: vocab.detokenize(&h.tokens),
            score: h.score,
            finished: h.finished,
        })
        .collect();
    SuggestionList { items }
}
