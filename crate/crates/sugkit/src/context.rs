//! Model-input assembly and token serialization.
//!
//! The scorer consumes one flat token sequence built from five segments in
//! a fixed order: typed prefix, cached candidates, hot words, behavior
//! history, user profile. Each segment opens with its own marker token and
//! list items are joined with `<SEP>`, so the serialization is injective
//! for in-vocabulary content and parses back losslessly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::jsonl;
use crate::miner::CandidateIndex;
use crate::vocab::{
    TokenId, Vocabulary, BEH_MARK_ID, CAND_MARK_ID, HOT_MARK_ID, PREFIX_MARK_ID, PROF_MARK_ID,
    SEP_ID, UNK_ID,
};

/// Most recent behavior entries kept when assembling a context.
pub const HISTORY_CAP: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionContext {
    pub prefix: String,
    /// Lookup key only; the city itself is not serialized, it acts through
    /// the candidate list.
    #[serde(default)]
    pub city: String,
    #[serde(default)]
    pub candidates: Vec<String>,
    #[serde(default)]
    pub hot_words: Vec<String>,
    #[serde(default)]
    pub behavior_history: Vec<String>,
    #[serde(default)]
    pub user_profile: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SerializeReport {
    /// Characters replaced by `<UNK>`.
    pub unk_replacements: usize,
}

/// Side inputs (hot words, history, profile) keyed by an opaque string,
/// typically a city or user id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextFixtures {
    entries: BTreeMap<String, FixtureEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub key: String,
    #[serde(default)]
    pub hot_words: Vec<String>,
    #[serde(default)]
    pub behavior_history: Vec<String>,
    #[serde(default)]
    pub user_profile: Vec<String>,
}

impl ContextFixtures {
    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for row in jsonl::read_records::<FixtureEntry>(path)? {
            let entry = row.map_err(CoreError::Input)?;
            entries.insert(entry.key.clone(), entry);
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&FixtureEntry> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, entry: FixtureEntry) {
        self.entries.insert(entry.key.clone(), entry);
    }
}

/// Builds the model input for one request: candidate lookup (city-first,
/// global backfill, at most `m`), hot words capped at `n`, history capped
/// at the most recent [`HISTORY_CAP`] entries (most recent last).
pub fn assemble(
    prefix: &str,
    city: &str,
    index: &CandidateIndex,
    hot_words: &[String],
    behavior_history: &[String],
    user_profile: &[String],
    m: usize,
    n: usize,
) -> SuggestionContext {
    let candidates = index
        .lookup(prefix, city, m)
        .into_iter()
        .map(|c| c.query)
        .collect();
    let history_tail = behavior_history.len().saturating_sub(HISTORY_CAP);
    SuggestionContext {
        prefix: prefix.to_string(),
        city: city.to_string(),
        candidates,
        hot_words: hot_words.iter().take(n).cloned().collect(),
        behavior_history: behavior_history[history_tail..].to_vec(),
        user_profile: user_profile.to_vec(),
    }
}

fn push_list(out: &mut Vec<TokenId>, unk: &mut usize, vocab: &Vocabulary, items: &[String]) {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push(SEP_ID);
        }
        let (ids, replaced) = vocab.tokenize(item);
        *unk += replaced;
        out.extend(ids);
    }
}

/// Flattens a context into tokens. All five segment markers are always
/// present, even over empty bodies, so positions stay comparable.
pub fn serialize(context: &SuggestionContext, vocab: &Vocabulary) -> (Vec<TokenId>, SerializeReport) {
    let mut out = Vec::new();
    let mut unk = 0usize;

    out.push(PREFIX_MARK_ID);
    let (prefix_ids, replaced) = vocab.tokenize(&context.prefix);
    unk += replaced;
    out.extend(prefix_ids);

    out.push(CAND_MARK_ID);
    push_list(&mut out, &mut unk, vocab, &context.candidates);
    out.push(HOT_MARK_ID);
    push_list(&mut out, &mut unk, vocab, &context.hot_words);
    out.push(BEH_MARK_ID);
    push_list(&mut out, &mut unk, vocab, &context.behavior_history);
    out.push(PROF_MARK_ID);
    push_list(&mut out, &mut unk, vocab, &context.user_profile);

    (
        out,
        SerializeReport {
            unk_replacements: unk,
        },
    )
}

/// Inverse of [`serialize`]. The city is not part of the token stream, so
/// it comes back empty. Fails on token streams that do not follow the
/// segment grammar.
pub fn parse(tokens: &[TokenId], vocab: &Vocabulary) -> Result<SuggestionContext> {
    const ORDER: [TokenId; 5] = [
        PREFIX_MARK_ID,
        CAND_MARK_ID,
        HOT_MARK_ID,
        BEH_MARK_ID,
        PROF_MARK_ID,
    ];
    let mut segments: Vec<Vec<Vec<TokenId>>> = Vec::with_capacity(ORDER.len());
    let mut idx = 0usize;

    for (seg, &mark) in ORDER.iter().enumerate() {
        if tokens.get(idx) != Some(&mark) {
            return Err(CoreError::Input(format!(
                "expected segment marker {mark} at position {idx}"
            )));
        }
        idx += 1;
        let end = tokens[idx..]
            .iter()
            .position(|t| ORDER.get(seg + 1).is_some_and(|next| t == next))
            .map(|off| idx + off)
            .unwrap_or(tokens.len());
        let body = &tokens[idx..end];
        let mut items: Vec<Vec<TokenId>> = vec![Vec::new()];
        for &t in body {
            if t == SEP_ID {
                items.push(Vec::new());
            } else if vocab.is_reserved(t) && t != UNK_ID {
                return Err(CoreError::Input(format!(
                    "unexpected reserved token {t} inside a segment body"
                )));
            } else {
                items.last_mut().expect("items is never empty").push(t);
            }
        }
        segments.push(items);
        idx = end;
    }
    if idx != tokens.len() {
        return Err(CoreError::Input("trailing tokens after the profile segment".into()));
    }

    let to_strings = |items: &[Vec<TokenId>]| -> Vec<String> {
        if items.len() == 1 && items[0].is_empty() {
            return Vec::new();
        }
        items.iter().map(|ids| vocab.detokenize(ids)).collect()
    };

    Ok(SuggestionContext {
        prefix: vocab.detokenize(&segments[0].concat()),
        city: String::new(),
        candidates: to_strings(&segments[1]),
        hot_words: to_strings(&segments[2]),
        behavior_history: to_strings(&segments[3]),
        user_profile: to_strings(&segments[4]),
    })
}
