//! Latency/quality grids over an eval dataset. Wall-clock numbers are
//! informational; model-call counts are the reproducible cost measure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sugkit::context::serialize;
use sugkit::decoder::{beam_search, qa_beam_search, DecodeStats, Hypothesis};
use sugkit::error::{CoreError, Result};
use sugkit::eval::{diversity, hit_rate_at_k, mrr, quality};
use sugkit::scorer::{token_frequencies, ScorerModel};
use sugkit::vocab::{TokenId, Vocabulary};
use sugkit::{to_suggestions, EvalInstance, QabsParams};

use crate::commands::read_strict;
use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scenario {
    #[value(name = "qabs_vs_vanilla")]
    QabsVsVanilla,
    #[value(name = "prune_grid")]
    PruneGrid,
    #[value(name = "beam_width_grid")]
    BeamWidthGrid,
    #[value(name = "candidate_grid")]
    CandidateGrid,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::QabsVsVanilla => "qabs_vs_vanilla",
            Scenario::PruneGrid => "prune_grid",
            Scenario::BeamWidthGrid => "beam_width_grid",
            Scenario::CandidateGrid => "candidate_grid",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub axis: String,
    pub label: String,
    pub value: f64,
    pub instances: usize,
    pub latency_ms_mean: f64,
    pub latency_ms_p50: f64,
    pub latency_ms_p99: f64,
    pub model_calls_total: u64,
    pub model_calls_mean: f64,
    pub hr_at_k: f64,
    pub mrr: f64,
    pub diversity: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub scenario: String,
    /// Metric cutoff shared by every point.
    pub k: usize,
    pub points: Vec<BenchPoint>,
}

struct Decoded {
    lists: Vec<Vec<String>>,
    truths: Vec<String>,
    latencies_ms: Vec<f64>,
    calls: Vec<u64>,
}

/// Decodes every instance, keeping at most `cap` suggestions per list so the
/// metric formulas see lists no longer than their cutoff.
fn decode_all(
    instances: &[EvalInstance],
    vocab: &Vocabulary,
    cap: usize,
    mut decode: impl FnMut(&[TokenId]) -> (Vec<Hypothesis>, DecodeStats),
) -> Decoded {
    let mut out = Decoded {
        lists: Vec::with_capacity(instances.len()),
        truths: Vec::with_capacity(instances.len()),
        latencies_ms: Vec::with_capacity(instances.len()),
        calls: Vec::with_capacity(instances.len()),
    };
    for inst in instances {
        let (tokens, _) = serialize(&inst.context, vocab);
        let start = Instant::now();
        let (hyps, stats) = decode(&tokens);
        out.latencies_ms.push(start.elapsed().as_secs_f64() * 1e3);
        let list = to_suggestions(vocab, &hyps);
        out.lists
            .push(list.items.into_iter().take(cap).map(|s| s.query).collect());
        out.truths.push(inst.truth.clone());
        out.calls.push(stats.model_calls as u64);
    }
    out
}

/// Nearest-rank percentile of an unsorted sample.
fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn make_point(
    decoded: &Decoded,
    vocab: &Vocabulary,
    cfg: &RunConfig,
    axis: &str,
    label: String,
    value: f64,
) -> Result<BenchPoint> {
    let n = decoded.lists.len();
    let calls_total: u64 = decoded.calls.iter().sum();
    Ok(BenchPoint {
        axis: axis.to_string(),
        label,
        value,
        instances: n,
        latency_ms_mean: decoded.latencies_ms.iter().sum::<f64>() / n as f64,
        latency_ms_p50: percentile(&decoded.latencies_ms, 0.50),
        latency_ms_p99: percentile(&decoded.latencies_ms, 0.99),
        model_calls_total: calls_total,
        model_calls_mean: calls_total as f64 / n as f64,
        hr_at_k: hit_rate_at_k(&decoded.lists, &decoded.truths, cfg.k)?,
        mrr: mrr(&decoded.lists, &decoded.truths)?,
        diversity: diversity(&decoded.lists, cfg.k)?,
        quality: quality(&decoded.lists, vocab, cfg.k, cfg.t)?,
    })
}

fn qabs_vs_vanilla(
    model: &ScorerModel,
    instances: &[EvalInstance],
    cfg: &RunConfig,
) -> Result<Vec<BenchPoint>> {
    let vocab = model.vocab();
    // same search width on both sides; the accelerated decoder differs only
    // in its gating and early exits
    let vanilla = decode_all(instances, vocab, cfg.k, |ctx| {
        beam_search(model, ctx, cfg.k_search, cfg.t)
    });
    let params = cfg.qabs();
    let qabs = decode_all(instances, vocab, cfg.k, |ctx| {
        qa_beam_search(model, ctx, &params)
    });
    for (i, (q, v)) in qabs.calls.iter().zip(&vanilla.calls).enumerate() {
        if q > v {
            return Err(CoreError::Invariant(format!(
                "accelerated decode spent {q} model calls against {v} vanilla on instance {i}"
            )));
        }
    }
    Ok(vec![
        make_point(&vanilla, vocab, cfg, "decoder", "vanilla".into(), 0.0)?,
        make_point(&qabs, vocab, cfg, "decoder", "qabs".into(), 1.0)?,
    ])
}

fn prune_grid(
    model: &ScorerModel,
    instances: &[EvalInstance],
    cfg: &RunConfig,
) -> Result<Vec<BenchPoint>> {
    let vocab = model.vocab();
    let sequences: Vec<Vec<TokenId>> = instances
        .iter()
        .flat_map(|inst| {
            let (ctx, _) = serialize(&inst.context, vocab);
            let (truth, _) = vocab.tokenize(&inst.truth);
            [ctx, truth]
        })
        .collect();
    let freqs = token_frequencies(sequences.iter().map(|s| s.as_slice()));

    let width = vocab.len();
    let reserved = vocab.reserved_ids().len();
    let mut grid: Vec<usize> = [width, width * 3 / 4, width / 2, width / 4]
        .into_iter()
        .map(|v| v.max(reserved))
        .collect();
    grid.dedup();

    let params = cfg.qabs();
    let mut points = Vec::new();
    for top_n in grid {
        let (pruned, _) = model.prune_head(&freqs, top_n)?;
        let decoded = decode_all(instances, vocab, cfg.k, |ctx| {
            qa_beam_search(&pruned, ctx, &params)
        });
        points.push(make_point(
            &decoded,
            vocab,
            cfg,
            "top_n",
            top_n.to_string(),
            top_n as f64,
        )?);
    }
    Ok(points)
}

fn beam_width_grid(
    model: &ScorerModel,
    instances: &[EvalInstance],
    cfg: &RunConfig,
) -> Result<Vec<BenchPoint>> {
    let vocab = model.vocab();
    let mut widths = Vec::new();
    let mut w = cfg.k;
    loop {
        widths.push(w);
        if w <= 2 {
            break;
        }
        w -= 2;
    }

    let mut points = Vec::new();
    for w in widths {
        let params = QabsParams {
            k: w,
            k_search: w,
            ..cfg.qabs()
        };
        let decoded = decode_all(instances, vocab, cfg.k, |ctx| {
            qa_beam_search(model, ctx, &params)
        });
        points.push(make_point(&decoded, vocab, cfg, "K", w.to_string(), w as f64)?);
    }
    Ok(points)
}

fn candidate_grid(
    model: &ScorerModel,
    instances: &[EvalInstance],
    cfg: &RunConfig,
) -> Result<Vec<BenchPoint>> {
    let vocab = model.vocab();
    let mut counts = Vec::new();
    let mut m = cfg.m;
    loop {
        counts.push(m);
        if m == 0 {
            break;
        }
        m = m.saturating_sub(2);
    }

    let params = cfg.qabs();
    let mut points = Vec::new();
    for m in counts {
        let trimmed: Vec<EvalInstance> = instances
            .iter()
            .cloned()
            .map(|mut inst| {
                inst.context.candidates.truncate(m);
                inst
            })
            .collect();
        let decoded = decode_all(&trimmed, vocab, cfg.k, |ctx| {
            qa_beam_search(model, ctx, &params)
        });
        points.push(make_point(&decoded, vocab, cfg, "m", m.to_string(), m as f64)?);
    }
    Ok(points)
}

fn to_csv(report: &BenchReport) -> String {
    let mut out = String::from(
        "scenario,axis,label,value,instances,latency_ms_mean,latency_ms_p50,latency_ms_p99,\
         model_calls_total,model_calls_mean,hr_at_k,mrr,diversity,quality\n",
    );
    for p in &report.points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            report.scenario,
            p.axis,
            p.label,
            p.value,
            p.instances,
            p.latency_ms_mean,
            p.latency_ms_p50,
            p.latency_ms_p99,
            p.model_calls_total,
            p.model_calls_mean,
            p.hr_at_k,
            p.mrr,
            p.diversity,
            p.quality
        )
        .expect("writing to a string cannot fail");
    }
    out
}

pub fn run(
    cfg: &RunConfig,
    scenario: Scenario,
    dataset: Option<&Path>,
    json_out: Option<&Path>,
    csv_out: Option<&Path>,
) -> Result<()> {
    let model = ScorerModel::load_checkpoint(&cfg.paths.checkpoint)?;
    let data_path = dataset.unwrap_or(&cfg.paths.eval_data);
    let instances: Vec<EvalInstance> = read_strict(data_path)?;
    if instances.is_empty() {
        return Err(CoreError::Input(format!(
            "{}: empty eval dataset",
            data_path.display()
        )));
    }

    let points = match scenario {
        Scenario::QabsVsVanilla => qabs_vs_vanilla(&model, &instances, cfg)?,
        Scenario::PruneGrid => prune_grid(&model, &instances, cfg)?,
        Scenario::BeamWidthGrid => beam_width_grid(&model, &instances, cfg)?,
        Scenario::CandidateGrid => candidate_grid(&model, &instances, cfg)?,
    };
    let report = BenchReport {
        scenario: scenario.name().to_string(),
        k: cfg.k,
        points,
    };

    let default_json: PathBuf = cfg.paths.reports.join(format!("bench_{}.json", report.scenario));
    let json_path = json_out.unwrap_or(&default_json);
    let default_csv: PathBuf = cfg.paths.reports.join(format!("bench_{}.csv", report.scenario));
    let csv_path = csv_out.unwrap_or(&default_csv);

    fs::create_dir_all(&cfg.paths.reports)?;
    if let Some(dir) = json_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(json_path, serde_json::to_string_pretty(&report)?)?;
    if let Some(dir) = csv_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(csv_path, to_csv(&report))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
