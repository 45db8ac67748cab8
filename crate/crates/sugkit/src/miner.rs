//! Prefix/query co-occurrence mining over click logs.
//!
//! Counts are kept per day so the retention window can slide: advancing by
//! one day evicts everything older than the window and ingests the new
//! day's records. Only clicked records count; impressions never contribute.
//! The queryable artifact is a [`CandidateIndex`] with per-city lists and a
//! global fallback, both sorted by count.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type Day = u32;

const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickLogRecord {
    pub day: Day,
    pub city: String,
    pub prefix: String,
    pub query: String,
    pub clicked: bool,
    /// An order (conversion) implies a click; violations are rejected.
    #[serde(default)]
    pub ordered: bool,
}

impl ClickLogRecord {
    fn is_malformed(&self) -> bool {
        self.prefix.is_empty() || self.query.is_empty() || (self.ordered && !self.clicked)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected_malformed: usize,
    pub skipped_unclicked: usize,
    pub skipped_out_of_window: usize,
}

/// Clicked co-occurrence counts keyed `(prefix, city, query)`, bucketed by
/// day. Global (city-agnostic) counts are derived, so they equal the sum
/// over cities by construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    per_day: BTreeMap<Day, BTreeMap<(String, String, String), u64>>,
    window_days: u32,
}

impl CooccurrenceCounts {
    /// Builds counts from scratch over an inclusive day window. Records
    /// outside the window, unclicked records, and malformed records are
    /// skipped and tallied in the report.
    pub fn ingest_logs(
        records: &[ClickLogRecord],
        window: (Day, Day),
    ) -> Result<(Self, IngestReport)> {
        let (lo, hi) = window;
        if lo > hi {
            return Err(CoreError::Input(format!(
                "ingest window start {lo} is after end {hi}"
            )));
        }
        let mut counts = CooccurrenceCounts {
            per_day: BTreeMap::new(),
            window_days: hi - lo + 1,
        };
        let mut report = IngestReport::default();
        for rec in records {
            counts.add(rec, (lo, hi), &mut report);
        }
        Ok((counts, report))
    }

    fn add(&mut self, rec: &ClickLogRecord, window: (Day, Day), report: &mut IngestReport) {
        if rec.is_malformed() {
            report.rejected_malformed += 1;
            return;
        }
        if rec.day < window.0 || rec.day > window.1 {
            report.skipped_out_of_window += 1;
            return;
        }
        if !rec.clicked {
            report.skipped_unclicked += 1;
            return;
        }
        let key = (rec.prefix.clone(), rec.city.clone(), rec.query.clone());
        *self
            .per_day
            .entry(rec.day)
            .or_default()
            .entry(key)
            .or_insert(0) += 1;
        report.accepted += 1;
    }

    /// Advances the window to `day`: evicts days older than `retention`
    /// days and ingests the new day's records. `records` must all carry
    /// `day`, and `day` must be strictly newer than anything ingested.
    pub fn slide_window(
        &mut self,
        day: Day,
        records: &[ClickLogRecord],
        retention: u32,
    ) -> Result<IngestReport> {
        if retention == 0 {
            return Err(CoreError::Config("retention must be at least 1 day".into()));
        }
        if let Some(last) = self.last_day() {
            if day <= last {
                return Err(CoreError::Ordering(format!(
                    "slide day {day} is not after the last ingested day {last}"
                )));
            }
        }
        if let Some(bad) = records.iter().find(|r| r.day != day) {
            return Err(CoreError::Ordering(format!(
                "slide expected records for day {day}, found day {}",
                bad.day
            )));
        }
        let cutoff = day.saturating_sub(retention - 1);
        self.per_day.retain(|&d, _| d >= cutoff);
        self.window_days = retention;
        let mut report = IngestReport::default();
        for rec in records {
            self.add(rec, (cutoff, day), &mut report);
        }
        Ok(report)
    }

    pub fn last_day(&self) -> Option<Day> {
        self.per_day.keys().next_back().copied()
    }

    pub fn window_days(&self) -> u32 {
        self.window_days
    }

    pub fn city_count(&self, prefix: &str, city: &str, query: &str) -> u64 {
        let key = (prefix.to_string(), city.to_string(), query.to_string());
        self.per_day
            .values()
            .filter_map(|m| m.get(&key))
            .sum()
    }

    pub fn global_count(&self, prefix: &str, query: &str) -> u64 {
        self.per_day
            .values()
            .flat_map(|m| m.iter())
            .filter(|((p, _, q), _)| p == prefix && q == query)
            .map(|(_, c)| c)
            .sum()
    }

    /// Aggregates the day buckets into a queryable index.
    pub fn build_index(&self) -> CandidateIndex {
        let mut city: BTreeMap<(String, String, String), u64> = BTreeMap::new();
        for bucket in self.per_day.values() {
            for (key, count) in bucket {
                *city.entry(key.clone()).or_insert(0) += count;
            }
        }

        let mut city_lists: BTreeMap<String, BTreeMap<String, Vec<(String, u64)>>> =
            BTreeMap::new();
        let mut global: BTreeMap<(String, String), u64> = BTreeMap::new();
        for ((prefix, city_name, query), count) in city {
            *global.entry((prefix.clone(), query.clone())).or_insert(0) += count;
            city_lists
                .entry(prefix)
                .or_default()
                .entry(city_name)
                .or_default()
                .push((query, count));
        }

        let mut global_lists: BTreeMap<String, Vec<(String, u64)>> = BTreeMap::new();
        for ((prefix, query), count) in global {
            global_lists.entry(prefix).or_default().push((query, count));
        }

        for lists in city_lists.values_mut() {
            for list in lists.values_mut() {
                sort_candidates(list);
            }
        }
        for list in global_lists.values_mut() {
            sort_candidates(list);
        }

        CandidateIndex {
            window_days: self.window_days,
            built_at_day: self.last_day().unwrap_or(0),
            city_lists,
            global_lists,
        }
    }
}

/// Count descending, then query ascending by byte order.
fn sort_candidates(list: &mut [(String, u64)]) {
    list.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Candidate {
    pub query: String,
    pub count: u64,
}

/// Prefix-to-query lists, per city plus a global fallback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateIndex {
    pub window_days: u32,
    pub built_at_day: Day,
    city_lists: BTreeMap<String, BTreeMap<String, Vec<(String, u64)>>>,
    global_lists: BTreeMap<String, Vec<(String, u64)>>,
}

#[derive(Serialize, Deserialize)]
struct IndexDoc {
    version: u32,
    index: CandidateIndex,
}

impl CandidateIndex {
    /// Up to `m` candidates: the city's list first, then global backfill
    /// skipping queries the city already supplied.
    pub fn lookup(&self, prefix: &str, city: &str, m: usize) -> Vec<Candidate> {
        let mut out = Vec::with_capacity(m);
        if m == 0 {
            return out;
        }
        if let Some(list) = self
            .city_lists
            .get(prefix)
            .and_then(|cities| cities.get(city))
        {
            for (query, count) in list.iter().take(m) {
                out.push(Candidate {
                    query: query.clone(),
                    count: *count,
                });
            }
        }
        if out.len() < m {
            if let Some(list) = self.global_lists.get(prefix) {
                for (query, count) in list {
                    if out.len() == m {
                        break;
                    }
                    if out.iter().any(|c| &c.query == query) {
                        continue;
                    }
                    out.push(Candidate {
                        query: query.clone(),
                        count: *count,
                    });
                }
            }
        }
        out
    }

    pub fn prefix_count(&self) -> usize {
        self.global_lists.len()
    }

    pub fn city_count(&self) -> usize {
        let mut cities: Vec<&str> = self
            .city_lists
            .values()
            .flat_map(|m| m.keys().map(String::as_str))
            .collect();
        cities.sort_unstable();
        cities.dedup();
        cities.len()
    }

    pub fn global_list(&self, prefix: &str) -> Option<&[(String, u64)]> {
        self.global_lists.get(prefix).map(Vec::as_slice)
    }

    pub fn city_list(&self, prefix: &str, city: &str) -> Option<&[(String, u64)]> {
        self.city_lists
            .get(prefix)
            .and_then(|m| m.get(city))
            .map(Vec::as_slice)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = IndexDoc {
            version: INDEX_VERSION,
            index: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: IndexDoc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if doc.version != INDEX_VERSION {
            return Err(CoreError::Input(format!(
                "unsupported index version {} (expected {INDEX_VERSION})",
                doc.version
            )));
        }
        Ok(doc.index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(day: Day, city: &str, prefix: &str, query: &str, clicked: bool) -> ClickLogRecord {
        ClickLogRecord {
            day,
            city: city.into(),
            prefix: prefix.into(),
            query: query.into(),
            clicked,
            ordered: false,
        }
    }

    #[test]
    fn only_clicked_in_window_records_count() {
        let records = vec![
            rec(1, "north", "pi", "pizza", true),
            rec(1, "north", "pi", "pizza", true),
            rec(2, "north", "pi", "pizza", false),
            rec(9, "north", "pi", "pizza", true),
            rec(1, "north", "", "pizza", true),
        ];
        let (counts, report) = CooccurrenceCounts::ingest_logs(&records, (1, 7)).unwrap();
        assert_eq!(report.accepted, 2);
        assert_eq!(report.skipped_unclicked, 1);
        assert_eq!(report.skipped_out_of_window, 1);
        assert_eq!(report.rejected_malformed, 1);
        assert_eq!(counts.city_count("pi", "north", "pizza"), 2);
        assert_eq!(counts.global_count("pi", "pizza"), 2);
    }

    #[test]
    fn order_without_click_is_malformed() {
        let mut bad = rec(1, "north", "pi", "pizza", false);
        bad.ordered = true;
        let (_, report) = CooccurrenceCounts::ingest_logs(&[bad], (1, 7)).unwrap();
        assert_eq!(report.rejected_malformed, 1);
    }

    #[test]
    fn global_count_sums_cities() {
        let records = vec![
            rec(1, "north", "pi", "pizza", true),
            rec(2, "south", "pi", "pizza", true),
            rec(3, "south", "pi", "pizza", true),
        ];
        let (counts, _) = CooccurrenceCounts::ingest_logs(&records, (1, 7)).unwrap();
        assert_eq!(counts.city_count("pi", "north", "pizza"), 1);
        assert_eq!(counts.city_count("pi", "south", "pizza"), 2);
        assert_eq!(counts.global_count("pi", "pizza"), 3);
    }

    #[test]
    fn slide_evicts_the_oldest_day_and_matches_fresh_ingest() {
        // GIVEN seven days of traffic
        let mut records: Vec<ClickLogRecord> = Vec::new();
        for day in 1..=7 {
            records.push(rec(day, "north", "pi", format!("q{day}").as_str(), true));
        }
        let (mut slid, _) = CooccurrenceCounts::ingest_logs(&records, (1, 7)).unwrap();
        // WHEN sliding to day 8
        let day8 = vec![rec(8, "north", "pi", "q8", true)];
        slid.slide_window(8, &day8, 7).unwrap();
        // THEN day-1 counts vanish and the result equals a fresh ingest of days 2..=8
        assert_eq!(slid.global_count("pi", "q1"), 0);
        assert_eq!(slid.global_count("pi", "q8"), 1);
        let mut all = records;
        all.extend(day8);
        let (fresh, _) = CooccurrenceCounts::ingest_logs(&all, (2, 8)).unwrap();
        assert_eq!(slid, fresh);
    }

    #[test]
    fn slide_with_no_records_only_evicts() {
        let records = vec![rec(1, "n", "a", "x", true), rec(2, "n", "a", "y", true)];
        let (mut counts, _) = CooccurrenceCounts::ingest_logs(&records, (1, 2)).unwrap();
        counts.slide_window(3, &[], 2).unwrap();
        assert_eq!(counts.global_count("a", "x"), 0);
        assert_eq!(counts.global_count("a", "y"), 1);
    }

    #[test]
    fn slide_rejects_stale_or_mixed_days() {
        let records = vec![rec(5, "n", "a", "x", true)];
        let (mut counts, _) = CooccurrenceCounts::ingest_logs(&records, (1, 7)).unwrap();
        assert!(matches!(
            counts.slide_window(5, &[], 7),
            Err(CoreError::Ordering(_))
        ));
        assert!(matches!(
            counts.slide_window(8, &[rec(7, "n", "a", "x", true)], 7),
            Err(CoreError::Ordering(_))
        ));
    }

    #[test]
    fn lookup_is_city_first_with_global_backfill() {
        // GIVEN a city list with 2 candidates and a global pool of 10 unique queries
        let mut records = Vec::new();
        for (i, q) in ["hub1", "hub2"].iter().enumerate() {
            for _ in 0..(5 - i) {
                records.push(rec(1, "north", "h", q, true));
            }
        }
        for i in 0..8 {
            records.push(rec(1, "south", "h", format!("glob{i}").as_str(), true));
        }
        let (counts, _) = CooccurrenceCounts::ingest_logs(&records, (1, 7)).unwrap();
        let index = counts.build_index();
        // WHEN looking up with m = 10 in the small city
        let got = index.lookup("h", "north", 10);
        // THEN the two city entries come first, then global backfill without duplicates
        assert_eq!(got.len(), 10);
        assert_eq!(got[0].query, "hub1");
        assert_eq!(got[1].query, "hub2");
        let rest: Vec<&str> = got[2..].iter().map(|c| c.query.as_str()).collect();
        assert!(rest.iter().all(|q| q.starts_with("glob")));
        let mut dedup = rest.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), rest.len());
    }

    #[test]
    fn lookup_handles_empty_cases() {
        let (counts, _) = CooccurrenceCounts::ingest_logs(&[], (1, 7)).unwrap();
        let index = counts.build_index();
        assert!(index.lookup("none", "north", 10).is_empty());
        let (counts, _) =
            CooccurrenceCounts::ingest_logs(&[rec(1, "n", "a", "x", true)], (1, 7)).unwrap();
        assert!(counts.build_index().lookup("a", "n", 0).is_empty());
    }

    #[test]
    fn lists_sort_by_count_then_query_bytes() {
        let records = vec![
            rec(1, "n", "a", "beta", true),
            rec(1, "n", "a", "beta", true),
            rec(1, "n", "a", "alpha", true),
            rec(1, "n", "a", "gamma", true),
        ];
        let (counts, _) = CooccurrenceCounts::ingest_logs(&records, (1, 7)).unwrap();
        let index = counts.build_index();
        let list = index.global_list("a").unwrap();
        assert_eq!(
            list.iter().map(|(q, _)| q.as_str()).collect::<Vec<_>>(),
            vec!["beta", "alpha", "gamma"]
        );
    }

    #[test]
    fn index_serialization_is_deterministic_and_versioned() {
        let records = vec![
            rec(1, "north", "pi", "pizza", true),
            rec(2, "south", "pi", "pie", true),
        ];
        let (counts, _) = CooccurrenceCounts::ingest_logs(&records, (1, 7)).unwrap();
        let index = counts.build_index();

        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        index.save(&a).unwrap();
        let loaded = CandidateIndex::load(&a).unwrap();
        assert_eq!(index, loaded);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let text = std::fs::read_to_string(&a)
            .unwrap()
            .replacen("\"version\":1", "\"version\":3", 1);
        std::fs::write(&a, text).unwrap();
        assert!(matches!(
            CandidateIndex::load(&a),
            Err(CoreError::Input(_))
        ));
    }
}
