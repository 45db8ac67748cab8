//! Order-c tabular softmax language model.
//!
//! The model stores one logits row per observed context (the last `order`
//! tokens, left-padded with `<PAD>`). Rows absent from the table are all
//! zeros, i.e. uniform over the active head. Pruning the LM head only
//! shrinks the active set; probabilities renormalize over the survivors.
//!
//! Everything is exact and deterministic: log-softmax reductions run over
//! active ids in ascending order, the table is an ordered map, and
//! checkpoints round-trip bit-for-bit through JSON.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::vocab::{TokenId, Vocabulary, PAD_ID};

const CHECKPOINT_VERSION: u32 = 1;

/// Log-probabilities over the full vocabulary; inactive ids are `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub log_probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn log_prob(&self, id: TokenId) -> f64 {
        self.log_probs
            .get(id as usize)
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Log of the total probability mass; 0 for a well-formed distribution.
    pub fn log_mass(&self) -> f64 {
        let finite: Vec<f64> = self
            .log_probs
            .iter()
            .copied()
            .filter(|lp| lp.is_finite())
            .collect();
        if finite.is_empty() {
            return f64::NEG_INFINITY;
        }
        let m = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + finite.iter().map(|lp| (lp - m).exp()).sum::<f64>().ln()
    }
}

/// Sparse gradient with respect to logits rows, keyed by context.
pub type Gradient = BTreeMap<Vec<TokenId>, Vec<f64>>;

#[derive(Debug, Clone, Serialize)]
pub struct SftReport {
    /// Mean token cross-entropy at the start of each epoch, before that
    /// epoch's update.
    pub epoch_losses: Vec<f64>,
    /// Loss after the final update.
    pub final_loss: f64,
    pub tokens_per_epoch: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PruneOutcome {
    pub active_size: usize,
    /// True when `top_n` exceeded the vocabulary and was clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelData", into = "ModelData")]
pub struct ScorerModel {
    vocab: Vocabulary,
    order: usize,
    active_head: BTreeSet<TokenId>,
    logits: BTreeMap<Vec<TokenId>, Vec<f64>>,
}

/// Wire form: the logits map becomes a sorted pair list because JSON keys
/// must be strings.
#[derive(Serialize, Deserialize)]
struct ModelData {
    vocab: Vocabulary,
    order: usize,
    active_head: Vec<TokenId>,
    logits: Vec<(Vec<TokenId>, Vec<f64>)>,
}

impl From<ScorerModel> for ModelData {
    fn from(m: ScorerModel) -> Self {
        ModelData {
            vocab: m.vocab,
            order: m.order,
            active_head: m.active_head.into_iter().collect(),
            logits: m.logits.into_iter().collect(),
        }
    }
}

impl TryFrom<ModelData> for ScorerModel {
    type Error = CoreError;

    fn try_from(d: ModelData) -> Result<Self> {
        let model = ScorerModel {
            vocab: d.vocab,
            order: d.order,
            active_head: d.active_head.into_iter().collect(),
            logits: d.logits.into_iter().collect(),
        };
        model.check_invariants()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: ScorerModel,
}

impl ScorerModel {
    /// A model with no learned rows: uniform over the full vocabulary for
    /// every context.
    pub fn new_uniform(vocab: Vocabulary, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(CoreError::Config("model order must be at least 1".into()));
        }
        let active_head = (0..vocab.len() as TokenId).collect();
        Ok(Self {
            vocab,
            order,
            active_head,
            logits: BTreeMap::new(),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn active_head(&self) -> &BTreeSet<TokenId> {
        &self.active_head
    }

    pub fn row_count(&self) -> usize {
        self.logits.len()
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.order == 0 {
            return Err(CoreError::Invariant("model order is zero".into()));
        }
        let width = self.vocab.len();
        for reserved in self.vocab.reserved_ids() {
            if !self.active_head.contains(&reserved) {
                return Err(CoreError::Invariant(format!(
                    "reserved token id {reserved} missing from active head"
                )));
            }
        }
        if let Some(&max) = self.active_head.iter().next_back() {
            if max as usize >= width {
                return Err(CoreError::Invariant(format!(
                    "active head id {max} out of range for width {width}"
                )));
            }
        }
        for (ctx, row) in &self.logits {
            if ctx.len() != self.order {
                return Err(CoreError::Invariant(format!(
                    "context key length {} differs from order {}",
                    ctx.len(),
                    self.order
                )));
            }
            if row.len() != width {
                return Err(CoreError::Invariant(format!(
                    "logits row width {} differs from vocabulary size {width}",
                    row.len()
                )));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::Invariant("non-finite logit".into()));
            }
        }
        Ok(())
    }

    /// The table key for a context: its last `order` tokens, left-padded
    /// with `<PAD>`.
    pub fn context_key(&self, context: &[TokenId]) -> Vec<TokenId> {
        let mut key = vec![PAD_ID; self.order];
        let tail = &context[context.len().saturating_sub(self.order)..];
        key[self.order - tail.len()..].copy_from_slice(tail);
        key
    }

    /// Sets one logit; creates the row on first touch. Intended for fixture
    /// construction; training goes through [`Self::apply_update`].
    pub fn set_logit(&mut self, context: &[TokenId], token: TokenId, value: f64) {
        let key = self.context_key(context);
        let width = self.vocab.len();
        let row = self.logits.entry(key).or_insert_with(|| vec![0.0; width]);
        row[token as usize] = value;
    }

    pub fn logit(&self, context: &[TokenId], token: TokenId) -> f64 {
        let key = self.context_key(context);
        self.logits
            .get(&key)
            .map(|row| row[token as usize])
            .unwrap_or(0.0)
    }

    /// Next-token log-probabilities for a context. Softmax runs over the
    /// active head only; inactive ids come back as `-inf`.
    pub fn score_next(&self, context: &[TokenId]) -> TokenDistribution {
        let key = self.context_key(context);
        let width = self.vocab.len();
        let row = self.logits.get(&key);
        let logit = |v: TokenId| row.map(|r| r[v as usize]).unwrap_or(0.0);

        let mut max = f64::NEG_INFINITY;
        for &v in &self.active_head {
            max = max.max(logit(v));
        }
        let mut sum = 0.0;
        for &v in &self.active_head {
            sum += (logit(v) - max).exp();
        }
        let lse = max + sum.ln();

        let mut log_probs = vec![f64::NEG_INFINITY; width];
        for &v in &self.active_head {
            log_probs[v as usize] = logit(v) - lse;
        }
        TokenDistribution { log_probs }
    }

    /// Sum of stepwise log-probabilities of `continuation` after `context`.
    /// `-inf` when any step uses an inactive token; error on out-of-range
    /// ids.
    pub fn sequence_logprob(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
        let width = self.vocab.len() as TokenId;
        let mut ctx = context.to_vec();
        let mut total = 0.0;
        for &y in continuation {
            if y >= width {
                return Err(CoreError::Input(format!("token id {y} out of range")));
            }
            total += self.score_next(&ctx).log_prob(y);
            ctx.push(y);
        }
        Ok(total)
    }

    /// Analytic gradient of `sequence_logprob` with respect to every logits
    /// entry it touches: `d log p / d logit[ctx][v] = 1[v = y] - p(v | ctx)`
    /// accumulated over steps. Requires every continuation token active.
    pub fn logprob_gradient(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<Gradient> {
        let width = self.vocab.len();
        let mut grad: Gradient = BTreeMap::new();
        let mut ctx = context.to_vec();
        for &y in continuation {
            if y as usize >= width {
                return Err(CoreError::Input(format!("token id {y} out of range")));
            }
            if !self.active_head.contains(&y) {
                return Err(CoreError::Input(format!(
                    "token id {y} is pruned from the active head"
                )));
            }
            let dist = self.score_next(&ctx);
            let key = self.context_key(&ctx);
            let row = grad.entry(key).or_insert_with(|| vec![0.0; width]);
            for &v in &self.active_head {
                let p = dist.log_probs[v as usize].exp();
                row[v as usize] += f64::from(v == y) - p;
            }
            ctx.push(y);
        }
        Ok(grad)
    }

    /// Adds `scale * grad` to the logits, creating rows on first touch.
    pub fn apply_update(&mut self, grad: &Gradient, scale: f64) {
        let width = self.vocab.len();
        for (key, g) in grad {
            let row = self
                .logits
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; width]);
            for (slot, dv) in row.iter_mut().zip(g) {
                *slot += scale * dv;
            }
        }
    }

    /// Mean token cross-entropy of `(context, continuation)` pairs.
    pub fn dataset_loss(&self, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0usize;
        for (ctx, cont) in pairs {
            total -= self.sequence_logprob(ctx, cont)?;
            tokens += cont.len();
        }
        if tokens == 0 {
            return Err(CoreError::Input("training set has no target tokens".into()));
        }
        Ok(total / tokens as f64)
    }

    /// Full-batch gradient descent on mean token cross-entropy.
    pub fn sft_train(
        &mut self,
        pairs: &[(Vec<TokenId>, Vec<TokenId>)],
        epochs: usize,
        lr: f64,
    ) -> Result<SftReport> {
        let tokens: usize = pairs.iter().map(|(_, cont)| cont.len()).sum();
        if tokens == 0 {
            return Err(CoreError::Input("training set has no target tokens".into()));
        }
        let scale = 1.0 / tokens as f64;
        let mut epoch_losses = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut grad: Gradient = BTreeMap::new();
            let mut total_nll = 0.0;
            for (context, continuation) in pairs {
                let mut ctx = context.clone();
                for &y in continuation {
                    if !self.active_head.contains(&y) {
                        return Err(CoreError::Input(format!(
                            "target token id {y} is not in the active head"
                        )));
                    }
                    let dist = self.score_next(&ctx);
                    total_nll -= dist.log_prob(y);
                    let key = self.context_key(&ctx);
                    let row = grad
                        .entry(key)
                        .or_insert_with(|| vec![0.0; self.vocab.len()]);
                    for &v in &self.active_head {
                        let p = dist.log_probs[v as usize].exp();
                        row[v as usize] += (p - f64::from(v == y)) * scale;
                    }
                    ctx.push(y);
                }
            }
            let loss = total_nll * scale;
            if !loss.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite loss {loss} at epoch {epoch}"
                )));
            }
            epoch_losses.push(loss);
            self.apply_update(&grad, -lr);
        }
        let final_loss = self.dataset_loss(pairs)?;
        if !final_loss.is_finite() {
            return Err(CoreError::Diverged(format!(
                "non-finite loss {final_loss} after final update"
            )));
        }
        Ok(SftReport {
            epoch_losses,
            final_loss,
            tokens_per_epoch: tokens,
        })
    }

    /// Restricts the LM head to the reserved tokens plus the `top_n` most
    /// frequent tokens (ties by id). Logits are untouched; probabilities
    /// renormalize over the surviving set.
    pub fn prune_head(
        &self,
        frequencies: &BTreeMap<TokenId, u64>,
        top_n: usize,
    ) -> Result<(Self, PruneOutcome)> {
        let reserved = self.vocab.reserved_ids();
        if top_n < reserved.len() {
            return Err(CoreError::Config(format!(
                "top_n {top_n} is below the reserved token count {}",
                reserved.len()
            )));
        }
        let width = self.vocab.len();
        let clamped = top_n > width;
        let take = top_n.min(width);

        let mut ranked: Vec<TokenId> = (0..width as TokenId).collect();
        ranked.sort_by_key(|id| (std::cmp::Reverse(frequencies.get(id).copied().unwrap_or(0)), *id));

        let mut active: BTreeSet<TokenId> = reserved;
        active.extend(ranked.into_iter().take(take));

        let mut model = self.clone();
        let outcome = PruneOutcome {
            active_size: active.len(),
            clamped,
        };
        model.active_head = active;
        Ok((model, outcome))
    }

    /// Samples one token from `score_next(context)`.
    pub fn sample_next<R: Rng>(&self, context: &[TokenId], rng: &mut R) -> TokenId {
        let dist = self.score_next(context);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut last = PAD_ID;
        for &v in &self.active_head {
            cum += dist.log_probs[v as usize].exp();
            last = v;
            if u < cum {
                return v;
            }
        }
        last
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: Checkpoint = serde_json::from_str(&text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(CoreError::Input(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                doc.version
            )));
        }
        Ok(doc.model)
    }
}

/// Token occurrence counts over a corpus of token sequences.
pub fn token_frequencies<'a, I>(sequences: I) -> BTreeMap<TokenId, u64>
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    let mut freqs = BTreeMap::new();
    for seq in sequences {
        for &id in seq {
            *freqs.entry(id).or_insert(0) += 1;
        }
    }
    freqs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::vocab::{EOSUG_ID, UNK_ID};

    fn small_vocab() -> Vocabulary {
        Vocabulary::char_level("abcd".chars())
    }

    fn random_model(seed: u64, order: usize) -> ScorerModel {
        let vocab = small_vocab();
        let mut model = ScorerModel::new_uniform(vocab.clone(), order).unwrap();
        let mut rng = substream(seed, "scorer-test");
        let width = vocab.len() as TokenId;
        for _ in 0..20 {
            let ctx: Vec<TokenId> = (0..order)
                .map(|_| rng.gen_range(0..width))
                .collect();
            for v in 0..width {
                model.set_logit(&ctx, v, rng.gen_range(-2.0..2.0));
            }
        }
        model
    }

    #[test]
    fn distribution_normalizes_and_is_deterministic() {
        let model = random_model(3, 2);
        let ctx = [9, 10];
        let a = model.score_next(&ctx);
        let b = model.score_next(&ctx);
        assert_eq!(a.log_probs, b.log_probs);
        assert!(a.log_mass().abs() < 1e-9);
    }

    #[test]
    fn unseen_context_is_uniform_over_active_head() {
        let model = random_model(4, 3);
        let dist = model.score_next(&[12, 12, 12, 12, 12]);
        let expected = -(model.active_head().len() as f64).ln();
        for &v in model.active_head() {
            assert!((dist.log_probs[v as usize] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn context_key_pads_on_the_left() {
        let model = random_model(1, 3);
        assert_eq!(model.context_key(&[]), vec![PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(model.context_key(&[9]), vec![PAD_ID, PAD_ID, 9]);
        assert_eq!(model.context_key(&[9, 10, 11, 12]), vec![10, 11, 12]);
    }

    #[test]
    fn sequence_logprob_accumulates_stepwise() {
        // GIVEN a model and a three-token continuation
        let model = random_model(5, 2);
        let ctx = vec![9, 10];
        let cont = vec![11, 9, EOSUG_ID];
        // WHEN scoring the sequence in one call and step by step
        let total = model.sequence_logprob(&ctx, &cont).unwrap();
        let mut manual = 0.0;
        let mut c = ctx.clone();
        for &y in &cont {
            manual += model.score_next(&c).log_prob(y);
            c.push(y);
        }
        // THEN both agree exactly
        assert_eq!(total, manual);
    }

    #[test]
    fn sequence_logprob_rejects_out_of_range_tokens() {
        let model = random_model(6, 2);
        assert!(model.sequence_logprob(&[9], &[999]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = random_model(7, 2);
        let ctx = vec![9, 10, 11];
        let cont = vec![10, 12, EOSUG_ID];
        let grad = model.logprob_gradient(&ctx, &cont).unwrap();
        let h = 1e-6;
        for (key, row) in &grad {
            for &v in model.active_head() {
                let mut plus = model.clone();
                plus.set_logit(key, v, model.logit(key, v) + h);
                let mut minus = model.clone();
                minus.set_logit(key, v, model.logit(key, v) - h);
                let fd = (plus.sequence_logprob(&ctx, &cont).unwrap()
                    - minus.sequence_logprob(&ctx, &cont).unwrap())
                    / (2.0 * h);
                let g = row[v as usize];
                assert!(
                    (fd - g).abs() <= 1e-4 * g.abs().max(fd.abs()).max(1e-4),
                    "entry ({key:?}, {v}): analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn sft_memorizes_a_single_pair() {
        // GIVEN a fresh uniform model and one training pair
        let vocab = small_vocab();
        let mut model = ScorerModel::new_uniform(vocab.clone(), 3).unwrap();
        let ctx = vocab.tokenize("ab").0;
        let mut target = vocab.tokenize("cd").0;
        target.push(EOSUG_ID);
        let pairs = vec![(ctx.clone(), target.clone())];
        // WHEN training for a while
        let report = model.sft_train(&pairs, 200, 1.0).unwrap();
        // THEN the loss decreases and greedy decoding reproduces the target
        assert!(report.final_loss < report.epoch_losses[0]);
        let mut c = ctx;
        for &want in &target {
            let dist = model.score_next(&c);
            let best = (0..vocab.len() as TokenId)
                .max_by(|&a, &b| {
                    dist.log_prob(a)
                        .partial_cmp(&dist.log_prob(b))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .unwrap();
            assert_eq!(best, want);
            c.push(want);
        }
    }

    #[test]
    fn sft_epoch_loss_is_monotone_on_worked_example() {
        let vocab = small_vocab();
        let mut model = ScorerModel::new_uniform(vocab.clone(), 2).unwrap();
        let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = ["ab", "ac", "ad"]
            .iter()
            .map(|s| {
                let mut t = vocab.tokenize(s).0;
                t.push(EOSUG_ID);
                (vocab.tokenize("a").0, t)
            })
            .collect();
        let report = model.sft_train(&pairs, 50, 0.5).unwrap();
        for w in report.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss went up: {w:?}");
        }
    }

    #[test]
    fn prune_keeps_reserved_and_top_n_and_renormalizes_upward() {
        let model = random_model(8, 2);
        let vocab = model.vocab().clone();
        let mut freqs = BTreeMap::new();
        freqs.insert(9, 10u64);
        freqs.insert(10, 5);
        freqs.insert(11, 5);
        let (pruned, outcome) = model.prune_head(&freqs, 10).unwrap();
        assert!(!outcome.clamped);
        for r in vocab.reserved_ids() {
            assert!(pruned.active_head().contains(&r));
        }
        assert!(pruned.active_head().contains(&9));
        // tie between 10 and 11 resolves to the smaller id
        assert!(pruned.active_head().contains(&10));

        let ctx = [9, 10];
        let full = model.score_next(&ctx);
        let cut = pruned.score_next(&ctx);
        for &v in pruned.active_head() {
            assert!(cut.log_probs[v as usize] >= full.log_probs[v as usize] - 1e-12);
        }
        assert!(cut.log_mass().abs() < 1e-9);
    }

    #[test]
    fn prune_clamps_oversized_top_n() {
        let model = random_model(9, 1);
        let freqs = BTreeMap::new();
        let (pruned, outcome) = model.prune_head(&freqs, 1000).unwrap();
        assert!(outcome.clamped);
        assert_eq!(pruned.active_head().len(), model.vocab().len());
    }

    #[test]
    fn prune_rejects_top_n_below_reserved() {
        let model = random_model(10, 1);
        assert!(model.prune_head(&BTreeMap::new(), 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = random_model(11, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_checkpoint(&path).unwrap();
        let loaded = ScorerModel::load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);
        let second = dir.path().join("model2.json");
        loaded.save_checkpoint(&second).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }

    #[test]
    fn checkpoint_version_mismatch_is_an_input_error() {
        let model = random_model(12, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_checkpoint(&path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&path, text).unwrap();
        match ScorerModel::load_checkpoint(&path) {
            Err(CoreError::Input(msg)) => assert!(msg.contains("version")),
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn unk_stays_active_after_pruning() {
        let model = random_model(13, 1);
        let (pruned, _) = model.prune_head(&BTreeMap::new(), 9).unwrap();
        assert!(pruned.active_head().contains(&UNK_ID));
    }
}
