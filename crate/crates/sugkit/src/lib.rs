//! City-aware query suggestion toolkit.
//!
//! The crate covers the whole offline stack for a local-search suggestion
//! service built around small, fully inspectable components:
//!
//! * [`miner`]: prefix/query co-occurrence counting over click logs with a
//!   sliding retention window, plus the city-first candidate index.
//! * [`context`]: assembly and token serialization of the model input
//!   (prefix, cached candidates, hot words, behavior history, user profile).
//! * [`scorer`]: an order-c tabular softmax language model with exact
//!   log-probabilities, analytic gradients, SFT training and head pruning.
//! * [`decoder`]: vanilla beam search and the quality-aware accelerated
//!   variant with score-window gating and early exits.
//! * [`grpo`]: group-relative policy optimization driven by beam-decoded
//!   groups and a rank-aware shaped reward.
//! * [`eval`]: offline metrics (hit rate, MRR, diversity, quality) with
//!   traffic slicing.
//! * [`synth`]: deterministic synthetic worlds for tests and benchmarks.
//!
//! Everything is deterministic given a seed: tables are ordered maps, RNG
//! streams are named, and floating-point reductions run in a fixed order.

pub mod context;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod jsonl;
pub mod miner;
pub mod rng;
pub mod scorer;
pub mod synth;
pub mod vocab;

pub use context::{ContextFixtures, SerializeReport, SuggestionContext};
pub use decoder::{
    beam_search, decode_group, qa_beam_search, to_suggestions, DecodeStats, ExitReason, Hypothesis,
    QabsParams, Suggestion, SuggestionList,
};
pub use error::CoreError;
pub use eval::{evaluate, normalize_query, DecodeDumpRecord, EvalInstance, EvalReport, SliceMetrics};
pub use grpo::{
    compute_advantages, compute_rewards, grpo_loss, train_grpo, validity_check, GrpoConfig,
    GroupSample, GroupStats, RewardBreakdown, RewardTerms, Sampler, StepReport, TrainInstance,
};
pub use miner::{CandidateIndex, ClickLogRecord, CooccurrenceCounts, Day, IngestReport};
pub use scorer::{PruneOutcome, ScorerModel, SftReport, TokenDistribution};
pub use vocab::{TokenId, Vocabulary};
