//! Deterministic synthetic data: test vocabularies, random tabular models,
//! and a small two-city query world used by the end-to-end learning study
//! and the benchmark harness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::context::{assemble, serialize, SuggestionContext};
use crate::decoder::{decode_group, QabsParams};
use crate::error::Result;
use crate::eval::{evaluate, EvalInstance};
use crate::grpo::{train_grpo, GrpoConfig, Sampler, TrainInstance};
use crate::miner::{CandidateIndex, ClickLogRecord, CooccurrenceCounts, Day};
use crate::rng::substream;
use crate::scorer::ScorerModel;
use crate::vocab::{TokenId, Vocabulary, EOSUG_ID};

/// Character vocabulary with `n_content` letters starting at 'a'.
pub fn decoder_test_vocab(n_content: usize) -> Vocabulary {
    assert!(n_content <= 26);
    Vocabulary::char_level("abcdefghijklmnopqrstuvwxyz".chars().take(n_content))
}

/// Order-1 model with every single-token context row materialized and
/// logits drawn uniformly from `(-2*spread, 2*spread)`. When `stop_hazard`
/// is given, the stop token's probability is exactly that value in every
/// row (which makes width-k beam search provably exact against full
/// enumeration).
pub fn random_order1_model(
    vocab: &Vocabulary,
    seed: u64,
    spread: f64,
    stop_hazard: Option<f64>,
) -> ScorerModel {
    let mut rng = substream(seed, "rand-model");
    let mut model = ScorerModel::new_uniform(vocab.clone(), 1).unwrap();
    let width = vocab.len() as TokenId;
    let stop_ids = vocab.stop_ids();
    for ctx_tok in 0..width {
        let key = [ctx_tok];
        let mut continuing = Vec::new();
        for v in 0..width {
            if stop_ids.contains(&v) {
                continue;
            }
            let logit = rng.gen_range(-2.0 * spread..2.0 * spread);
            model.set_logit(&key, v, logit);
            continuing.push(logit);
        }
        for &s in &stop_ids {
            let logit = match stop_hazard {
                Some(q) => {
                    let max = continuing.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let lse = max
                        + continuing
                            .iter()
                            .map(|l| (l - max).exp())
                            .sum::<f64>()
                            .ln();
                    (q / (1.0 - q)).ln() + lse
                }
                None => rng.gen_range(-2.0 * spread..2.0 * spread),
            };
            model.set_logit(&key, s, logit);
        }
    }
    model
}

const ALPHABET: &str = "abcdefghijklmnop";
const MIN_QUERY: usize = 4;
const MAX_QUERY: usize = 8;

/// A small two-city world. Queries are drawn from an order-2 character
/// transition table; each (prefix, city) pair ranks the prefix's query
/// pool with its own Zipf weights, so city conditioning carries signal.
pub struct SynthWorld {
    pub vocab: Vocabulary,
    pub cities: Vec<String>,
    pub prefixes: Vec<String>,
    pools: BTreeMap<String, Vec<String>>,
    weights: BTreeMap<(String, String), Vec<f64>>,
}

fn sample_from_table(
    table: &BTreeMap<(char, char), Vec<(char, f64)>>,
    prefix: &str,
    rng: &mut ChaCha12Rng,
) -> String {
    let mut q: Vec<char> = prefix.chars().collect();
    loop {
        if q.len() >= MAX_QUERY || (q.len() >= MIN_QUERY && rng.gen_bool(0.35)) {
            break;
        }
        let key = (q[q.len() - 2], q[q.len() - 1]);
        let opts = &table[&key];
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut chosen = opts[0].0;
        for (c, w) in opts {
            cum += w;
            if u < cum {
                chosen = *c;
                break;
            }
        }
        q.push(chosen);
    }
    q.into_iter().collect()
}

pub fn build_world(seed: u64) -> SynthWorld {
    let mut rng = substream(seed, "world");
    let vocab = Vocabulary::char_level(ALPHABET.chars());
    let chars: Vec<char> = ALPHABET.chars().collect();

    let mut table: BTreeMap<(char, char), Vec<(char, f64)>> = BTreeMap::new();
    for &c1 in &chars {
        for &c2 in &chars {
            let mut opts: Vec<char> = Vec::new();
            while opts.len() < 3 {
                let c = chars[rng.gen_range(0..chars.len())];
                if !opts.contains(&c) {
                    opts.push(c);
                }
            }
            table.insert(
                (c1, c2),
                vec![(opts[0], 0.55), (opts[1], 0.30), (opts[2], 0.15)],
            );
        }
    }

    let mut prefixes: Vec<String> = Vec::new();
    while prefixes.len() < 12 {
        let p: String = [
            chars[rng.gen_range(0..chars.len())],
            chars[rng.gen_range(0..chars.len())],
        ]
        .iter()
        .collect();
        if !prefixes.contains(&p) {
            prefixes.push(p);
        }
    }

    let mut pools = BTreeMap::new();
    for p in &prefixes {
        let mut pool: Vec<String> = Vec::new();
        let mut tries = 0;
        while pool.len() < 6 && tries < 200 {
            let q = sample_from_table(&table, p, &mut rng);
            if !pool.contains(&q) {
                pool.push(q);
            }
            tries += 1;
        }
        pools.insert(p.clone(), pool);
    }

    let cities = vec!["north".to_string(), "south".to_string()];
    let mut weights = BTreeMap::new();
    for p in &prefixes {
        let pool = &pools[p];
        for city in &cities {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut rng);
            let mut w = vec![0.0; pool.len()];
            for (rank, &j) in idx.iter().enumerate() {
                w[j] = 1.0 / ((rank + 1) as f64).powf(1.3);
            }
            let total: f64 = w.iter().sum();
            for x in &mut w {
                *x /= total;
            }
            weights.insert((p.clone(), city.clone()), w);
        }
    }

    SynthWorld {
        vocab,
        cities,
        prefixes,
        pools,
        weights,
    }
}

impl SynthWorld {
    pub fn pool(&self, prefix: &str) -> &[String] {
        &self.pools[prefix]
    }

    pub fn sample_truth(&self, prefix: &str, city: &str, rng: &mut ChaCha12Rng) -> String {
        let pool = &self.pools[prefix];
        let w = &self.weights[&(prefix.to_string(), city.to_string())];
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (q, &weight) in pool.iter().zip(w) {
            cum += weight;
            if u < cum {
                return q.clone();
            }
        }
        pool.last().expect("non-empty pool").clone()
    }

    /// Click-log stream with ~90% clicks, ~10% of clicks converting.
    pub fn sample_logs(&self, n: usize, days: Day, rng: &mut ChaCha12Rng) -> Vec<ClickLogRecord> {
        (0..n)
            .map(|_| {
                let prefix = self.prefixes[rng.gen_range(0..self.prefixes.len())].clone();
                let city = self.cities[rng.gen_range(0..self.cities.len())].clone();
                let query = self.sample_truth(&prefix, &city, rng);
                let clicked = rng.gen_bool(0.9);
                ClickLogRecord {
                    day: rng.gen_range(1..=days),
                    city,
                    prefix,
                    query,
                    clicked,
                    ordered: clicked && rng.gen_bool(0.1),
                }
            })
            .collect()
    }

    pub fn build_index(&self, logs: &[ClickLogRecord], window: (Day, Day)) -> Result<CandidateIndex> {
        let (counts, _) = CooccurrenceCounts::ingest_logs(logs, window)?;
        Ok(counts.build_index())
    }

    fn make_context(&self, prefix: &str, city: &str, index: &CandidateIndex, m: usize) -> SuggestionContext {
        assemble(prefix, city, index, &[], &[], &[], m, 0)
    }

    pub fn train_instances(
        &self,
        index: &CandidateIndex,
        n: usize,
        m: usize,
        rng: &mut ChaCha12Rng,
    ) -> Vec<TrainInstance> {
        (0..n)
            .map(|_| {
                let prefix = &self.prefixes[rng.gen_range(0..self.prefixes.len())];
                let city = &self.cities[rng.gen_range(0..self.cities.len())];
                TrainInstance {
                    context: self.make_context(prefix, city, index, m),
                    truth: self.sample_truth(prefix, city, rng),
                    converted: rng.gen_bool(0.1),
                }
            })
            .collect()
    }

    pub fn eval_instances(
        &self,
        index: &CandidateIndex,
        n: usize,
        m: usize,
        rng: &mut ChaCha12Rng,
    ) -> Vec<EvalInstance> {
        (0..n)
            .map(|_| {
                let prefix = &self.prefixes[rng.gen_range(0..self.prefixes.len())];
                let city = &self.cities[rng.gen_range(0..self.cities.len())];
                EvalInstance {
                    context: self.make_context(prefix, city, index, m),
                    truth: self.sample_truth(prefix, city, rng),
                    clicked: true,
                    ordered: rng.gen_bool(0.2),
                }
            })
            .collect()
    }

    /// SFT pairs: serialized context as input, truth plus stop as target.
    pub fn sft_pairs(&self, instances: &[TrainInstance]) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
        instances
            .iter()
            .map(|inst| {
                let (ctx, _) = serialize(&inst.context, &self.vocab);
                let (mut cont, _) = self.vocab.tokenize(&inst.truth);
                cont.push(EOSUG_ID);
                (ctx, cont)
            })
            .collect()
    }
}

/// Fraction of instances whose truth appears in the width-g decoded group.
pub fn group_hit_rate(model: &ScorerModel, instances: &[EvalInstance], g: usize, t: usize) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let vocab = model.vocab();
    let hits = instances
        .iter()
        .filter(|inst| {
            let (ctx, _) = serialize(&inst.context, vocab);
            let (hyps, _) = decode_group(model, &ctx, g, t);
            hyps.iter().any(|h| vocab.detokenize(&h.tokens) == inst.truth)
        })
        .count();
    hits as f64 / instances.len() as f64
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExperimentOutcome {
    pub sft_hit: f64,
    pub grpo_hit: f64,
    pub beam_mrr: f64,
    pub random_mrr: f64,
}

/// Knobs for [`learning_experiment`], sized so ten runs stay fast.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentParams {
    pub n_logs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub m_candidates: usize,
    pub order: usize,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub grpo_rounds: usize,
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub grpo_lr: f64,
    pub g: usize,
    pub k: usize,
    pub t: usize,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            n_logs: 6000,
            n_train: 2000,
            n_test: 500,
            m_candidates: 4,
            order: 5,
            sft_epochs: 20,
            sft_lr: 30.0,
            grpo_rounds: 30,
            steps_per_round: 40,
            batch_size: 8,
            grpo_lr: 2.0,
            g: 8,
            k: 4,
            t: 10,
        }
    }
}

/// Trains an SFT seed, fine-tunes it with beam-driven and random-sampled
/// GRPO (fresh reference snapshot each round), and reports held-out group
/// hit-rates plus evaluator MRR for both fine-tuned models.
pub fn learning_experiment(seed: u64, params: &ExperimentParams) -> Result<ExperimentOutcome> {
    let world = build_world(seed);
    let mut rng = substream(seed, "experiment");
    let logs = world.sample_logs(params.n_logs, 7, &mut rng);
    let index = world.build_index(&logs, (1, 7))?;
    let train = world.train_instances(&index, params.n_train, params.m_candidates, &mut rng);
    let test = world.eval_instances(&index, params.n_test, params.m_candidates, &mut rng);

    let mut policy = ScorerModel::new_uniform(world.vocab.clone(), params.order)?;
    let pairs = world.sft_pairs(&train);
    policy.sft_train(&pairs, params.sft_epochs, params.sft_lr)?;

    let sft_hit = group_hit_rate(&policy, &test, params.g, params.t);

    let cfg_beam = GrpoConfig {
        g: params.g,
        k: params.k,
        t: params.t,
        lr: params.grpo_lr,
        sampler: Sampler::Beam,
        ..GrpoConfig::default()
    };
    let cfg_random = GrpoConfig {
        sampler: Sampler::Random,
        ..cfg_beam
    };

    let mut beam_policy = policy.clone();
    for round in 0..params.grpo_rounds {
        train_grpo(
            &mut beam_policy,
            &train,
            &cfg_beam,
            params.steps_per_round,
            params.batch_size,
            seed.wrapping_mul(1000).wrapping_add(round as u64),
        )?;
    }
    let grpo_hit = group_hit_rate(&beam_policy, &test, params.g, params.t);

    let mut random_policy = policy.clone();
    for round in 0..params.grpo_rounds {
        train_grpo(
            &mut random_policy,
            &train,
            &cfg_random,
            params.steps_per_round,
            params.batch_size,
            seed.wrapping_mul(1000).wrapping_add(round as u64),
        )?;
    }

    let decode = QabsParams {
        k: params.k,
        t: params.t,
        k_search: 8,
        ..QabsParams::default()
    };
    let (beam_report, _) = evaluate(&beam_policy, &test, &decode)?;
    let (random_report, _) = evaluate(&random_policy, &test, &decode)?;

    Ok(ExperimentOutcome {
        sft_hit,
        grpo_hit,
        beam_mrr: beam_report.mix.map(|m| m.mrr).unwrap_or(0.0),
        random_mrr: random_report.mix.map(|m| m.mrr).unwrap_or(0.0),
    })
}
