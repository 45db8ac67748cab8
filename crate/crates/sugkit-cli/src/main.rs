use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sugkit::error::Result;
use sugkit::grpo::Sampler;
use sugkit_cli::config::RunConfig;
use sugkit_cli::{bench, commands, exit_code};

#[derive(Parser)]
#[command(
    name = "sugkit",
    version,
    about = "Offline pipeline for city-aware query suggestion: candidate mining, \
             scorer training, accelerated decoding, evaluation and benchmarks"
)]
struct Cli {
    /// Config file (TOML). Falls back to $SUGKIT_CONFIG, then to defaults.
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Every config key is overridable by a flag of the same name.
#[derive(Args)]
struct Overrides {
    #[arg(long = "m", value_name = "N", global = true)]
    m: Option<usize>,
    #[arg(long = "n", value_name = "N", global = true)]
    n: Option<usize>,
    #[arg(long = "K", value_name = "N", global = true)]
    k: Option<usize>,
    #[arg(long = "G", value_name = "N", global = true)]
    g: Option<usize>,
    #[arg(long = "eps", value_name = "X", global = true)]
    eps: Option<f64>,
    #[arg(long = "delta", value_name = "X", global = true)]
    delta: Option<f64>,
    #[arg(long = "lambda_gap", value_name = "X", global = true)]
    lambda_gap: Option<f64>,
    #[arg(long = "lambda_hit", value_name = "X", global = true)]
    lambda_hit: Option<f64>,
    #[arg(long = "lambda_rank", value_name = "X", global = true)]
    lambda_rank: Option<f64>,
    #[arg(long = "lambda_fmt", value_name = "X", global = true)]
    lambda_fmt: Option<f64>,
    #[arg(long = "lambda_miss", value_name = "X", global = true)]
    lambda_miss: Option<f64>,
    #[arg(long = "lambda_order", value_name = "X", global = true)]
    lambda_order: Option<f64>,
    #[arg(long = "tau", value_name = "X", global = true, allow_hyphen_values = true)]
    tau: Option<f64>,
    #[arg(long = "alpha", value_name = "X", global = true)]
    alpha: Option<f64>,
    #[arg(long = "R_min", value_name = "N", global = true)]
    r_min: Option<usize>,
    #[arg(long = "K_win", value_name = "N", global = true)]
    k_win: Option<usize>,
    #[arg(long = "T", value_name = "N", global = true)]
    t: Option<usize>,
    #[arg(long = "K_search", value_name = "N", global = true)]
    k_search: Option<usize>,
    #[arg(long = "lr", value_name = "X", global = true)]
    lr: Option<f64>,
    #[arg(long = "beta", value_name = "X", global = true)]
    beta: Option<f64>,
    #[arg(long = "seed", value_name = "N", global = true)]
    seed: Option<u64>,
    #[arg(long = "sampler", value_parser = ["beam", "random"], global = true)]
    sampler: Option<String>,
    #[arg(long = "window", value_name = "DAYS", global = true)]
    window: Option<u32>,
    #[arg(long = "order", value_name = "N", global = true)]
    order: Option<usize>,
    #[arg(long = "sft_epochs", value_name = "N", global = true)]
    sft_epochs: Option<usize>,
    #[arg(long = "sft_lr", value_name = "X", global = true)]
    sft_lr: Option<f64>,
    #[arg(long = "steps", value_name = "N", global = true)]
    steps: Option<usize>,
    #[arg(long = "batch_size", value_name = "N", global = true)]
    batch_size: Option<usize>,
}

macro_rules! override_scalar {
    ($cfg:expr, $self:expr, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $self.$field {
            $cfg.$field = v;
        })+
    };
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        override_scalar!(
            cfg, self, m, n, k, g, eps, delta, lambda_gap, lambda_hit, lambda_rank,
            lambda_fmt, lambda_miss, lambda_order, tau, alpha, r_min, k_win, t, k_search,
            lr, beta, seed, window, order, sft_epochs, sft_lr, steps, batch_size,
        );
        if let Some(s) = &self.sampler {
            cfg.sampler = match s.as_str() {
                "random" => Sampler::Random,
                _ => Sampler::Beam,
            };
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ingest click logs over the trailing window and write the candidate index.
    Mine {
        /// Click log JSONL; defaults to paths.logs.
        #[arg(long)]
        logs: Option<PathBuf>,
        /// Output index file; defaults to paths.index.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a scorer checkpoint.
    Train {
        #[command(subcommand)]
        mode: TrainMode,
    },
    /// Decode ranked suggestions for one prefix.
    Suggest {
        prefix: String,
        #[arg(long, default_value = "")]
        city: String,
        /// Fixture key supplying hot words, history and profile.
        #[arg(long)]
        user: Option<String>,
        /// Print decode statistics as JSON on stderr.
        #[arg(long)]
        trace: bool,
    },
    /// Score an eval dataset; writes the metric report and the decode dump.
    Eval {
        /// Eval JSONL; defaults to paths.eval_data.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report JSON; defaults to <reports>/eval_report.json.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Raw decode dump JSONL; defaults to <reports>/decode_dump.jsonl.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Run a latency/quality grid; writes BenchReport JSON and plot-ready CSV.
    Bench {
        #[arg(value_enum)]
        scenario: bench::Scenario,
        /// Eval JSONL; defaults to paths.eval_data.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report JSON; defaults to <reports>/bench_<scenario>.json.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Plot CSV; defaults to <reports>/bench_<scenario>.csv.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TrainMode {
    /// Supervised seeding from (context, truth) pairs.
    Sft {
        /// Training JSONL; defaults to paths.train_data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output checkpoint; defaults to paths.checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Group-relative policy optimisation from a seed checkpoint.
    Grpo {
        /// Training JSONL; defaults to paths.train_data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Seed checkpoint; defaults to paths.checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output checkpoint; defaults to paths.checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(flag: Option<&Path>) -> Result<RunConfig> {
    if let Some(path) = flag {
        return RunConfig::load(path);
    }
    match std::env::var("SUGKIT_CONFIG") {
        Ok(path) if !path.is_empty() => RunConfig::load(Path::new(&path)),
        _ => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;

    match &cli.command {
        Command::Mine { logs, out } => commands::mine(&cfg, logs.as_deref(), out.as_deref()),
        Command::Train { mode } => match mode {
            TrainMode::Sft { data, out } => {
                commands::train_sft(&cfg, data.as_deref(), out.as_deref())
            }
            TrainMode::Grpo { data, init, out } => {
                commands::train_grpo(&cfg, data.as_deref(), init.as_deref(), out.as_deref())
            }
        },
        Command::Suggest {
            prefix,
            city,
            user,
            trace,
        } => commands::suggest(&cfg, prefix, city, user.as_deref(), *trace),
        Command::Eval {
            dataset,
            report,
            dump,
        } => commands::eval(&cfg, dataset.as_deref(), report.as_deref(), dump.as_deref()),
        Command::Bench {
            scenario,
            dataset,
            json,
            csv,
        } => bench::run(&cfg, *scenario, dataset.as_deref(), json.as_deref(), csv.as_deref()),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
