//! `chart-tir`: single entry point for the tool-integrated chart reasoning
//! pipeline.
//!
//! Exit codes: 0 success, 2 usage error, 3 config error, 4 runtime failure.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use config::{AppConfig, ConfigError};
use manifest::ManifestBuilder;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "chart-tir",
    version,
    about = "Tool-integrated chart reasoning: rollouts, rewards, GRPO kernel, data synthesis, and evaluation"
)]
struct Cli {
    /// Config file (TOML); defaults to $CHART_TIR_CONFIG when set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set rollout.group_size=4. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize chart images with the plot agent and quality filter.
    SynthCharts {
        /// Number of charts to attempt.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (charts/ assets + charts.meta.jsonl + audit).
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate QA pairs over synthesized and/or mined charts, with the
    /// four-stage quality check.
    SynthQa {
        #[arg(long)]
        charts_meta: Option<PathBuf>,
        #[arg(long)]
        arxiv_records: Option<PathBuf>,
        /// PNG asset store the records reference.
        #[arg(long)]
        assets: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill cold-start SFT trajectories from a teacher policy.
    Coldstart {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        assets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample G-trajectory groups over a QA dataset.
    Rollout {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        assets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        group_size: Option<u32>,
    },
    /// Score a trajectory store against a QA dataset.
    RewardCheck {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the objective over a MaskedTokenBatch fixture file.
    GrpoEval {
        #[arg(long)]
        fixtures: PathBuf,
    },
    /// Run a benchmark dataset under greedy decoding.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Third-party layout: chartqa, charxiv, chartqapro, chartbench,
        /// chartx, reachqa. Defaults to the canonical qa-jsonl.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        assets: PathBuf,
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
        #[arg(long, default_value = "traj.jsonl")]
        store: PathBuf,
        /// Optional per-item CSV export.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Average pixel entropy over a directory of PNG images.
    Entropy {
        #[arg(long)]
        images: PathBuf,
    },
    /// Dataset statistics for QA files, chart metadata, and stores.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        charts_meta: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match AppConfig::load(cli.config.as_deref(), &cli.set) {
        Ok(c) => c,
        Err(e) => return fail("config", &e.to_string(), 3),
    };
    match run(&cli.command, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<ConfigError>().is_some() {
                fail("config", &format!("{e:#}"), 3)
            } else {
                fail("runtime", &format!("{e:#}"), 4)
            }
        }
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let error = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{error}");
    ExitCode::from(code)
}

fn run(command: &Command, config: &AppConfig) -> anyhow::Result<()> {
    let name = command_name(command);
    let manifest = ManifestBuilder::start(name, config);
    let outputs = match command {
        Command::SynthCharts { n, seed, out_dir } => {
            commands::synth_charts(config, *n, *seed, out_dir)?
        }
        Command::SynthQa { charts_meta, arxiv_records, assets, seed, out } => commands::synth_qa(
            config,
            charts_meta.as_deref(),
            arxiv_records.as_deref(),
            assets,
            *seed,
            out,
        )?,
        Command::Coldstart { dataset, assets, out } => {
            commands::coldstart(config, dataset, assets, out)?
        }
        Command::Rollout { dataset, assets, out, group_size } => {
            commands::rollout(config, dataset, assets, out, *group_size)?
        }
        Command::RewardCheck { store, dataset, out } => {
            commands::reward_check(config, store, dataset, out.as_deref())?
        }
        Command::GrpoEval { fixtures } => commands::grpo_eval(config, fixtures)?,
        Command::Eval { dataset, format, assets, report, store, csv } => commands::eval(
            config,
            dataset,
            format.as_deref(),
            assets,
            report,
            store,
            csv.as_deref(),
        )?,
        Command::Entropy { images } => commands::entropy(images)?,
        Command::Stats { dataset, charts_meta, store } => {
            commands::stats(dataset, charts_meta.as_deref(), store.as_deref())?
        }
    };
    if !outputs.is_empty() {
        let refs: Vec<&std::path::Path> = outputs.iter().map(PathBuf::as_path).collect();
        manifest.finish(&refs)?;
    }
    Ok(())
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::SynthCharts { .. } => "synth-charts",
        Command::SynthQa { .. } => "synth-qa",
        Command::Coldstart { .. } => "coldstart",
        Command::Rollout { .. } => "rollout",
        Command::RewardCheck { .. } => "reward-check",
        Command::GrpoEval { .. } => "grpo-eval",
        Command::Eval { .. } => "eval",
        Command::Entropy { .. } => "entropy",
        Command::Stats { .. } => "stats",
    }
}
