//! Deterministic fixtures shared by the criterion suite.
//!
//! Everything is derived from the synthetic world so the benches exercise the
//! same token statistics the tests do: an SFT-trained scorer, serialized
//! suggestion contexts, reward groups drawn from mined candidates, and raw
//! click logs for the ingest path.

use rand::seq::SliceRandom;
use rand::Rng;
use sugkit::context::serialize;
use sugkit::decoder::QabsParams;
use sugkit::grpo::GrpoConfig;
use sugkit::miner::ClickLogRecord;
use sugkit::rng::substream;
use sugkit::scorer::ScorerModel;
use sugkit::synth::build_world;
use sugkit::TokenId;

pub struct DecodeFixture {
    pub model: ScorerModel,
    pub contexts: Vec<Vec<TokenId>>,
    pub params: QabsParams,
}

/// Scorer plus serialized contexts for decode benches. The model sees a few
/// SFT epochs first; a uniform head would let every beam exit on the first
/// score-window check and the decode numbers would measure nothing.
pub fn decode_fixture(seed: u64, instances: usize) -> DecodeFixture {
    let world = build_world(seed);
    let mut rng = substream(seed, "bench-decode");
    let logs = world.sample_logs(2000, 7, &mut rng);
    let index = world.build_index(&logs, (1, 7)).expect("index");
    let train = world.train_instances(&index, 200, 6, &mut rng);
    let mut model = ScorerModel::new_uniform(world.vocab.clone(), 5).expect("model");
    model
        .sft_train(&world.sft_pairs(&train), 6, 30.0)
        .expect("sft");
    let contexts = world
        .eval_instances(&index, instances, 6, &mut rng)
        .into_iter()
        .map(|e| serialize(&e.context, model.vocab()).0)
        .collect();
    DecodeFixture {
        model,
        contexts,
        params: QabsParams::default(),
    }
}

pub struct RewardGroup {
    pub queries: Vec<String>,
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
    pub truth: Option<String>,
}

/// Groups of mined queries with plausible scores and validity flags, sized
/// for the default `GrpoConfig`.
pub fn reward_fixture(seed: u64, groups: usize) -> (Vec<RewardGroup>, GrpoConfig) {
    let world = build_world(seed);
    let mut rng = substream(seed, "bench-rewards");
    let logs = world.sample_logs(2000, 7, &mut rng);
    let index = world.build_index(&logs, (1, 7)).expect("index");
    let cfg = GrpoConfig::default();

    let mut pool: Vec<String> = world
        .prefixes
        .iter()
        .flat_map(|p| world.cities.iter().flat_map(|c| index.lookup(p, c, 10)))
        .map(|cand| cand.query)
        .collect();
    pool.sort();
    pool.dedup();
    assert!(pool.len() >= 2, "world too small for a reward pool");

    let out = (0..groups)
        .map(|_| {
            let mut queries = Vec::with_capacity(cfg.g);
            let mut valid = Vec::with_capacity(cfg.g);
            for _ in 0..cfg.g {
                if rng.gen_bool(0.15) {
                    queries.push("#".repeat(cfg.t + 5));
                    valid.push(false);
                } else {
                    queries.push(pool.choose(&mut rng).unwrap().clone());
                    valid.push(true);
                }
            }
            let scores = (0..cfg.g).map(|_| rng.gen_range(-20.0..-0.1)).collect();
            let truth = rng
                .gen_bool(0.7)
                .then(|| pool.choose(&mut rng).unwrap().clone());
            RewardGroup {
                queries,
                scores,
                valid,
                truth,
            }
        })
        .collect();
    (out, cfg)
}

/// Raw click logs spanning two weeks for the ingest bench.
pub fn log_fixture(seed: u64, n: usize) -> Vec<ClickLogRecord> {
    let world = build_world(seed);
    let mut rng = substream(seed, "bench-miner");
    world.sample_logs(n, 14, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sugkit::decoder::{beam_search, qa_beam_search};
    use sugkit::grpo::compute_rewards;
    use sugkit::miner::CooccurrenceCounts;

    #[test]
    fn decode_fixture_is_deterministic_and_decodable() {
        let a = decode_fixture(11, 8);
        let b = decode_fixture(11, 8);
        assert_eq!(a.contexts, b.contexts);
        assert_eq!(a.contexts.len(), 8);

        let ctx = &a.contexts[0];
        let (_, qa) = qa_beam_search(&a.model, ctx, &a.params);
        let (_, vanilla) = beam_search(&a.model, ctx, a.params.k_search, a.params.t);
        assert!(qa.model_calls <= vanilla.model_calls);
    }

    #[test]
    fn reward_groups_are_scorable() {
        let (groups, cfg) = reward_fixture(11, 16);
        assert_eq!(groups.len(), 16);
        for g in &groups {
            let (rewards, _) = compute_rewards(
                &g.queries,
                &g.scores,
                &g.valid,
                g.truth.as_deref(),
                &cfg,
            )
            .expect("group scores");
            assert_eq!(rewards.len(), cfg.g);
            assert!(rewards.iter().all(|r| r.is_finite()));
        }
    }

    #[test]
    fn log_fixture_feeds_the_miner() {
        let logs = log_fixture(11, 500);
        assert_eq!(logs.len(), 500);
        let (_, report) = CooccurrenceCounts::ingest_logs(&logs, (1, 14)).unwrap();
        assert!(report.accepted > 0);
    }
}
