//! The mine / train / suggest / eval commands.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::json;
use sugkit::context::{assemble, serialize, ContextFixtures};
use sugkit::error::{CoreError, Result};
use sugkit::eval::evaluate;
use sugkit::grpo::TrainInstance;
use sugkit::jsonl;
use sugkit::miner::{CandidateIndex, ClickLogRecord, CooccurrenceCounts};
use sugkit::scorer::ScorerModel;
use sugkit::vocab::{TokenId, Vocabulary, EOSUG_ID};
use sugkit::{qa_beam_search, to_suggestions, EvalInstance};

use crate::config::RunConfig;

/// Strict JSONL load: any unparsable record is an input error.
pub fn read_strict<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    jsonl::read_records(path)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| {
                CoreError::Input(format!("{} record {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn mine(cfg: &RunConfig, logs: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let logs_path = logs.unwrap_or(&cfg.paths.logs);
    let out_path = out.unwrap_or(&cfg.paths.index);

    let records: Vec<ClickLogRecord> = read_strict(logs_path)?;
    let end = records.iter().map(|r| r.day).max().unwrap_or(1);
    let start = end.saturating_sub(cfg.window - 1).max(1);
    let (counts, report) = CooccurrenceCounts::ingest_logs(&records, (start, end))?;
    let index = counts.build_index();

    ensure_parent(out_path)?;
    index.save(out_path)?;
    println!(
        "{}",
        json!({
            "window": [start, end],
            "index": out_path,
            "ingest": report,
        })
    );
    Ok(())
}

fn corpus_vocab(instances: &[TrainInstance]) -> Vocabulary {
    let mut text = String::new();
    for inst in instances {
        text.push_str(&inst.context.prefix);
        for s in inst
            .context
            .candidates
            .iter()
            .chain(&inst.context.hot_words)
            .chain(&inst.context.behavior_history)
            .chain(&inst.context.user_profile)
        {
            text.push_str(s);
        }
        text.push_str(&inst.truth);
    }
    Vocabulary::char_level(text.chars())
}

fn sft_pairs(
    instances: &[TrainInstance],
    vocab: &Vocabulary,
) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    instances
        .iter()
        .map(|inst| {
            let (ctx, _) = serialize(&inst.context, vocab);
            let (mut cont, _) = vocab.tokenize(&inst.truth);
            cont.push(EOSUG_ID);
            (ctx, cont)
        })
        .collect()
}

pub fn train_sft(cfg: &RunConfig, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let data_path = data.unwrap_or(&cfg.paths.train_data);
    let out_path = out.unwrap_or(&cfg.paths.checkpoint);

    let instances: Vec<TrainInstance> = read_strict(data_path)?;
    if instances.is_empty() {
        return Err(CoreError::Input(format!(
            "{}: empty training dataset",
            data_path.display()
        )));
    }
    let vocab = corpus_vocab(&instances);
    let pairs = sft_pairs(&instances, &vocab);
    let mut model = ScorerModel::new_uniform(vocab, cfg.order)?;
    let report = model.sft_train(&pairs, cfg.sft_epochs, cfg.sft_lr)?;

    fs::create_dir_all(&cfg.paths.reports)?;
    let rows: Vec<serde_json::Value> = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(epoch, loss)| json!({ "epoch": epoch, "loss": loss }))
        .collect();
    jsonl::write_records(&cfg.paths.reports.join("sft_steps.jsonl"), &rows)?;

    ensure_parent(out_path)?;
    model.save_checkpoint(out_path)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub fn train_grpo(
    cfg: &RunConfig,
    data: Option<&Path>,
    init: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let data_path = data.unwrap_or(&cfg.paths.train_data);
    let init_path = init.unwrap_or(&cfg.paths.checkpoint);
    let out_path = out.unwrap_or(&cfg.paths.checkpoint);

    let mut model = ScorerModel::load_checkpoint(init_path)?;
    let instances: Vec<TrainInstance> = read_strict(data_path)?;
    let reports = sugkit::grpo::train_grpo(
        &mut model,
        &instances,
        &cfg.grpo(),
        cfg.steps,
        cfg.batch_size,
        cfg.seed,
    )?;

    fs::create_dir_all(&cfg.paths.reports)?;
    jsonl::write_records(&cfg.paths.reports.join("grpo_steps.jsonl"), &reports)?;

    ensure_parent(out_path)?;
    model.save_checkpoint(out_path)?;
    let last = reports.last().expect("at least one training step");
    println!("{}", serde_json::to_string(last)?);
    Ok(())
}

pub fn suggest(
    cfg: &RunConfig,
    prefix: &str,
    city: &str,
    user: Option<&str>,
    trace: bool,
) -> Result<()> {
    let model = ScorerModel::load_checkpoint(&cfg.paths.checkpoint)?;
    let index = CandidateIndex::load(&cfg.paths.index)?;
    let (hot_words, behavior, profile) = match user {
        Some(key) => {
            let fixtures = ContextFixtures::load(&cfg.paths.fixtures)?;
            let entry = fixtures.get(key).ok_or_else(|| {
                CoreError::Input(format!(
                    "no fixture entry {key:?} in {}",
                    cfg.paths.fixtures.display()
                ))
            })?;
            (
                entry.hot_words.clone(),
                entry.behavior_history.clone(),
                entry.user_profile.clone(),
            )
        }
        None => (Vec::new(), Vec::new(), Vec::new()),
    };

    let ctx = assemble(prefix, city, &index, &hot_words, &behavior, &profile, cfg.m, cfg.n);
    let (tokens, _) = serialize(&ctx, model.vocab());
    let (hyps, stats) = qa_beam_search(&model, &tokens, &cfg.qabs());
    let list = to_suggestions(model.vocab(), &hyps);
    for (i, s) in list.items.iter().take(cfg.k).enumerate() {
        println!("{}\t{}\t{}", i + 1, s.query, s.score);
    }
    if trace {
        eprintln!("{}", serde_json::to_string(&stats)?);
    }
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    report: Option<&Path>,
    dump: Option<&Path>,
) -> Result<()> {
    let data_path = dataset.unwrap_or(&cfg.paths.eval_data);
    let default_report = cfg.paths.reports.join("eval_report.json");
    let report_path = report.unwrap_or(&default_report);
    let default_dump = cfg.paths.reports.join("decode_dump.jsonl");
    let dump_path = dump.unwrap_or(&default_dump);

    let model = ScorerModel::load_checkpoint(&cfg.paths.checkpoint)?;
    let instances: Vec<EvalInstance> = read_strict(data_path)?;
    let (report, dump_rows) = evaluate(&model, &instances, &cfg.qabs())?;

    ensure_parent(report_path)?;
    fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
    ensure_parent(dump_path)?;
    jsonl::write_records(dump_path, &dump_rows)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
