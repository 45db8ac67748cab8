//! Offline evaluation: hit-rate@K, MRR, result-set diversity and a
//! format-quality score, reported for the full set plus click/order slices.

use serde::{Deserialize, Serialize};

use crate::context::{self, SuggestionContext};
use crate::decoder::{qa_beam_search, to_suggestions, DecodeStats, QabsParams};
use crate::error::Result;
use crate::grpo::validity_check;
use crate::scorer::ScorerModel;
use crate::vocab::Vocabulary;

/// Punctuation stripped by [`normalize_query`], beyond ASCII punctuation.
const WIDE_PUNCT: &[char] = &[
    '。', '，', '、', '；', '：', '？', '！', '「', '」', '『', '』', '（', '）', '《', '》',
    '〈', '〉', '【', '】', '〔', '〕', '・', '…', '—', '～', '·', '“', '”', '‘', '’', '〜',
    '｡', '｢', '｣', '､', '･', '！', '？', '，', '；', '：', '（', '）', '［', '］', '｛', '｝',
    '＂', '＇', '｀', '＾', '＜', '＞', '＝', '＋', '－', '＊', '／', '＼', '｜', '＠', '＃',
    '＄', '％', '＆', '＿', '．', '￥',
];

fn is_strippable(c: char) -> bool {
    c.is_ascii_punctuation() || WIDE_PUNCT.contains(&c)
}

/// Canonical query form: lowercase, punctuation removed, whitespace
/// collapsed to single spaces, no leading or trailing space.
pub fn normalize_query(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        if c.is_whitespace() {
            if !out.is_empty() {
                pending_space = true;
            }
            continue;
        }
        if is_strippable(c) {
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        for lc in c.to_lowercase() {
            out.push(lc);
        }
    }
    out
}

fn require_instances(n: usize) -> Result<()> {
    if n == 0 {
        Err(crate::error::CoreError::Input(
            "metric undefined on an empty dataset".into(),
        ))
    } else {
        Ok(())
    }
}

/// Fraction of instances whose truth appears (exact match) in the top-k.
pub fn hit_rate_at_k(lists: &[Vec<String>], truths: &[String], k: usize) -> Result<f64> {
    require_instances(lists.len())?;
    let hits = lists
        .iter()
        .zip(truths)
        .filter(|(list, truth)| list.iter().take(k).any(|q| q == *truth))
        .count();
    Ok(hits as f64 / lists.len() as f64)
}

/// Mean reciprocal rank of the first exact truth match, 0 when absent.
pub fn mrr(lists: &[Vec<String>], truths: &[String]) -> Result<f64> {
    require_instances(lists.len())?;
    let total: f64 = lists
        .iter()
        .zip(truths)
        .map(|(list, truth)| {
            list.iter()
                .position(|q| q == truth)
                .map_or(0.0, |pos| 1.0 / (pos + 1) as f64)
        })
        .sum();
    Ok(total / lists.len() as f64)
}

/// Distinct suggestions across all lists over the total slot budget N*k.
pub fn diversity(lists: &[Vec<String>], k: usize) -> Result<f64> {
    require_instances(lists.len().min(k))?;
    let mut seen = std::collections::BTreeSet::new();
    for list in lists {
        for q in list.iter().take(k) {
            seen.insert(q.clone());
        }
    }
    Ok(seen.len() as f64 / (lists.len() * k) as f64)
}

/// Format validity of a raw query string under the shared token rules.
pub fn string_format_valid(vocab: &Vocabulary, query: &str, max_tokens: usize) -> bool {
    let (tokens, _) = vocab.tokenize(query);
    validity_check(vocab, &tokens, max_tokens)
}

/// Share of the N*k slot budget holding suggestions that are format-valid
/// and not normalized duplicates of a higher-ranked entry in the same list.
pub fn quality(
    lists: &[Vec<String>],
    vocab: &Vocabulary,
    k: usize,
    max_tokens: usize,
) -> Result<f64> {
    require_instances(lists.len().min(k))?;
    let mut good = 0usize;
    for list in lists {
        let mut seen = std::collections::BTreeSet::new();
        for q in list.iter().take(k) {
            let norm = normalize_query(q);
            let fresh = seen.insert(norm);
            if fresh && string_format_valid(vocab, q, max_tokens) {
                good += 1;
            }
        }
    }
    Ok(good as f64 / (lists.len() * k) as f64)
}

/// One held-out example. `clicked`/`ordered` pick the report slices.
/// Context fields serialize inline alongside truth and the slice flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    #[serde(flatten)]
    pub context: SuggestionContext,
    pub truth: String,
    #[serde(default)]
    pub clicked: bool,
    #[serde(default)]
    pub ordered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub instances: usize,
    pub hr_at_k: f64,
    pub mrr: f64,
    pub div: f64,
    pub qua: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    /// Instances that produced a non-empty suggestion list.
    pub evaluated: usize,
    /// Instances whose decode came back empty.
    pub failed: usize,
    pub mix: Option<SliceMetrics>,
    pub click: Option<SliceMetrics>,
    pub order: Option<SliceMetrics>,
}

/// Per-instance decode trace for offline inspection.
#[derive(Debug, Clone, Serialize)]
pub struct DecodeDumpRecord {
    pub index: usize,
    pub queries: Vec<String>,
    pub scores: Vec<f64>,
    pub stats: DecodeStats,
}

fn slice_metrics(
    lists: &[Vec<String>],
    truths: &[String],
    mask: &[bool],
    vocab: &Vocabulary,
    k: usize,
    max_tokens: usize,
) -> Option<SliceMetrics> {
    let mut sel_lists = Vec::new();
    let mut sel_truths = Vec::new();
    for i in 0..lists.len() {
        if mask[i] {
            sel_lists.push(lists[i].clone());
            sel_truths.push(truths[i].clone());
        }
    }
    if sel_lists.is_empty() {
        return None;
    }
    Some(SliceMetrics {
        instances: sel_lists.len(),
        hr_at_k: hit_rate_at_k(&sel_lists, &sel_truths, k).expect("non-empty slice"),
        mrr: mrr(&sel_lists, &sel_truths).expect("non-empty slice"),
        div: diversity(&sel_lists, k).expect("non-empty slice"),
        qua: quality(&sel_lists, vocab, k, max_tokens).expect("non-empty slice"),
    })
}

/// Runs the accelerated decoder over every instance and aggregates metrics.
/// Instances whose decode yields nothing are counted in `failed` and
/// excluded from the slices.
pub fn evaluate(
    model: &ScorerModel,
    instances: &[EvalInstance],
    params: &QabsParams,
) -> Result<(EvalReport, Vec<DecodeDumpRecord>)> {
    params.validate()?;
    let vocab = model.vocab();
    let mut lists: Vec<Vec<String>> = Vec::new();
    let mut truths: Vec<String> = Vec::new();
    let mut clicked: Vec<bool> = Vec::new();
    let mut ordered: Vec<bool> = Vec::new();
    let mut dump = Vec::with_capacity(instances.len());
    let mut failed = 0usize;

    for (index, inst) in instances.iter().enumerate() {
        let (ctx_tokens, _) = context::serialize(&inst.context, vocab);
        let (hyps, stats) = qa_beam_search(model, &ctx_tokens, params);
        let suggestions = to_suggestions(vocab, &hyps);
        dump.push(DecodeDumpRecord {
            index,
            queries: suggestions.items.iter().map(|s| s.query.clone()).collect(),
            scores: suggestions.items.iter().map(|s| s.score).collect(),
            stats,
        });
        if suggestions.items.is_empty() {
            failed += 1;
            continue;
        }
        lists.push(suggestions.items.into_iter().map(|s| s.query).collect());
        truths.push(inst.truth.clone());
        clicked.push(inst.clicked);
        ordered.push(inst.ordered);
    }

    let all_mask = vec![true; lists.len()];
    let report = EvalReport {
        k: params.k,
        evaluated: lists.len(),
        failed,
        mix: slice_metrics(&lists, &truths, &all_mask, vocab, params.k, params.t),
        click: slice_metrics(&lists, &truths, &clicked, vocab, params.k, params.t),
        order: slice_metrics(&lists, &truths, &ordered, vocab, params.k, params.t),
    };
    Ok((report, dump))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::decoder_test_vocab;

    fn lists(raw: &[&[&str]]) -> Vec<Vec<String>> {
        raw.iter()
            .map(|l| l.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    fn truths(raw: &[&str]) -> Vec<String> {
        raw.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_query("  A  B "), "a b");
        assert_eq!(normalize_query("Hello, World!"), "hello world");
        assert_eq!(normalize_query("a.b"), "ab");
        assert_eq!(normalize_query("咖啡店。"), "咖啡店");
        assert_eq!(normalize_query("！？"), "");
        assert_eq!(normalize_query("a ， b"), "a b");
        assert_eq!(normalize_query(""), "");
        assert_eq!(normalize_query("   "), "");
    }

    #[test]
    fn metric_fixture_values() {
        let l = lists(&[&["a", "b"], &["c"]]);
        let t = truths(&["b", "d"]);
        assert!((hit_rate_at_k(&l, &t, 2).unwrap() - 0.5).abs() < 1e-12);
        assert!((hit_rate_at_k(&l, &t, 1).unwrap() - 0.0).abs() < 1e-12);
        assert!((mrr(&l, &t).unwrap() - 0.25).abs() < 1e-12);
        assert!((diversity(&l, 2).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn quality_dedups_on_the_normalized_form() {
        // vocabulary covering upper case and '!' so every entry stays
        // format-valid; "A!" then normalizes onto the duplicate "a"
        let vocab = crate::vocab::Vocabulary::char_level("aAb!cd".chars());
        let l = lists(&[&["a", "A!", "b"]]);
        let q = quality(&l, &vocab, 3, 15).unwrap();
        assert!((q - 2.0 / 3.0).abs() < 1e-12, "got {q}");
    }

    #[test]
    fn quality_counts_valid_unduplicated_slots() {
        let vocab = decoder_test_vocab(8);
        // '!' is not in this vocabulary: "a!" tokenizes with UNK => invalid
        let l = lists(&[&["ab", "ab"], &["a!", "cd"]]);
        let q = quality(&l, &vocab, 2, 15).unwrap();
        assert!((q - 0.5).abs() < 1e-12, "got {q}");
    }

    #[test]
    fn mrr_never_exceeds_hit_rate() {
        let l = lists(&[&["a", "b", "c"], &["d", "e"], &["x"]]);
        let t = truths(&["c", "z", "x"]);
        let m = mrr(&l, &t).unwrap();
        let h = hit_rate_at_k(&l, &t, 3).unwrap();
        assert!(m <= h + 1e-12);
        assert!((0.0..=1.0).contains(&m));
        assert!((0.0..=1.0).contains(&h));
    }

    #[test]
    fn empty_inputs_are_undefined() {
        let l: Vec<Vec<String>> = Vec::new();
        let t: Vec<String> = Vec::new();
        assert!(hit_rate_at_k(&l, &t, 5).is_err());
        assert!(mrr(&l, &t).is_err());
        assert!(diversity(&l, 5).is_err());
        let vocab = decoder_test_vocab(3);
        assert!(quality(&l, &vocab, 5, 15).is_err());
    }

    #[test]
    fn evaluate_slices_and_dump() {
        use crate::context::SuggestionContext;
        let vocab = decoder_test_vocab(6);
        let model = crate::scorer::ScorerModel::new_uniform(vocab, 2).unwrap();
        let mk = |clicked, ordered| EvalInstance {
            context: SuggestionContext {
                prefix: "a".into(),
                city: "north".into(),
                candidates: vec![],
                hot_words: vec![],
                behavior_history: vec![],
                user_profile: vec![],
            },
            truth: "ab".into(),
            clicked,
            ordered,
        };
        let instances = vec![mk(true, false), mk(false, false), mk(true, true)];
        let params = QabsParams {
            k: 4,
            t: 3,
            tau: f64::NEG_INFINITY,
            alpha: f64::INFINITY,
            r_min: 1,
            k_search: 4,
            k_win: 16,
        };
        let (report, dump) = evaluate(&model, &instances, &params).unwrap();
        assert_eq!(report.evaluated, 3);
        assert_eq!(report.failed, 0);
        assert_eq!(report.mix.as_ref().unwrap().instances, 3);
        assert_eq!(report.click.as_ref().unwrap().instances, 2);
        assert_eq!(report.order.as_ref().unwrap().instances, 1);
        assert_eq!(dump.len(), 3);
        assert!(dump.iter().all(|d| d.queries.len() == d.scores.len()));
        // identical contexts decode identically
        assert_eq!(dump[0].queries, dump[1].queries);
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
