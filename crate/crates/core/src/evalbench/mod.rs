//! Benchmark runner and dataset metrics: accuracy reports, tool-usage
//! distributions, and average pixel entropy.

use crate::clients::{JudgeClient, PolicyClient, SamplingParams};
use crate::model::store::{write_trajectories, TrajectoryEntry};
use crate::model::{AssetStore, QAItem, ToolAction};
use crate::reward::{accuracy_reward, MatchPolicy, RewardError};
use crate::rollout::{run_trajectory, RolloutConfig, RolloutError};
use crate::sandbox::Sandbox;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub mod adapters;
pub mod entropy;

pub use entropy::avg_pixel_entropy;

/// Report schema version, embedded in emitted JSON.
pub const REPORT_SCHEMA_VERSION: &str = "eval-report-v1";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset malformed: {0}")]
    DatasetMalformed(String),
    #[error("entropy over an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Share of executed tool calls by kind, in percent. The two entries sum to
/// exactly 100 whenever any call exists (code_pct is defined as the
/// complement) and are both 0 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolDistribution {
    pub crop_pct: f64,
    pub code_pct: f64,
}

/// Aggregated benchmark results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: String,
    pub n_items: usize,
    pub accuracy: f64,
    pub per_qtype_accuracy: BTreeMap<String, f64>,
    pub tool_distribution: ToolDistribution,
    pub mean_turns: f64,
    pub config_hash: String,
    /// Entropy conventions recorded alongside any entropy figures.
    pub entropy_log_base: u32,
    pub grayscale: String,
}

/// Percentages of executed tool calls by kind over a trajectory store.
pub fn tool_distribution<'a>(
    trajectories: impl IntoIterator<Item = &'a crate::model::Trajectory>,
) -> ToolDistribution {
    let mut crop = 0u64;
    let mut code = 0u64;
    for t in trajectories {
        for step in &t.steps {
            match step.action {
                ToolAction::Crop { .. } => crop += 1,
                ToolAction::CodeExec { .. } => code += 1,
            }
        }
    }
    let total = crop + code;
    if total == 0 {
        return ToolDistribution { crop_pct: 0.0, code_pct: 0.0 };
    }
    let crop_pct = round2(100.0 * crop as f64 / total as f64);
    ToolDistribution { crop_pct, code_pct: round2(100.0 - crop_pct) }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Everything a benchmark run needs besides the dataset.
pub struct BenchmarkContext<'a> {
    pub policy: &'a PolicyClient,
    pub sandbox: &'a Sandbox,
    pub assets: &'a AssetStore,
    pub rollout: RolloutConfig,
    pub match_policy: MatchPolicy,
    pub judge: Option<&'a JudgeClient>,
    pub config_hash: String,
}

/// Runs one trajectory per dataset item under greedy decoding (temperature
/// 0) and scores answers with the accuracy reward. Returns the report plus
/// the trajectory store entries.
pub fn run_benchmark(
    items: &[QAItem],
    ctx: &BenchmarkContext<'_>,
) -> Result<(EvalReport, Vec<TrajectoryEntry>), EvalError> {
    if items.is_empty() {
        return Err(EvalError::DatasetMalformed("dataset has no items".into()));
    }
    let cfg = RolloutConfig {
        sampling: SamplingParams { temperature: 0.0, ..ctx.rollout.sampling },
        ..ctx.rollout.clone()
    };

    let mut entries = Vec::with_capacity(items.len());
    let mut correct_total = 0.0;
    let mut per_qtype: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut turns_total = 0usize;

    for item in items {
        let image = ctx.assets.load(&item.image_ref).map_err(|e| {
            EvalError::DatasetMalformed(format!("image {:?}: {e}", item.image_ref))
        })?;
        let outcome = run_trajectory(ctx.policy, &image, &item.question, &cfg, ctx.sandbox)?;
        let acc = accuracy_reward(
            outcome.trajectory.answer.as_deref(),
            &item.answer,
            item.answer_type,
            &ctx.match_policy,
            ctx.judge,
        )?;
        correct_total += acc;
        let bucket = per_qtype.entry(item.qtype.to_string()).or_insert((0.0, 0));
        bucket.0 += acc;
        bucket.1 += 1;
        turns_total += outcome.raw_turns.len();
        entries.push(TrajectoryEntry {
            trajectory: outcome.trajectory,
            raw_turns: Some(outcome.raw_turns),
        });
    }

    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        n_items: items.len(),
        accuracy: correct_total / items.len() as f64,
        per_qtype_accuracy: per_qtype
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect(),
        tool_distribution: tool_distribution(entries.iter().map(|e| &e.trajectory)),
        mean_turns: turns_total as f64 / items.len() as f64,
        config_hash: ctx.config_hash.clone(),
        entropy_log_base: 2,
        grayscale: "bt601".into(),
    };
    Ok((report, entries))
}

/// Runs the benchmark and writes both the JSON report and the trajectory
/// store.
pub fn run_benchmark_to_files(
    items: &[QAItem],
    ctx: &BenchmarkContext<'_>,
    report_path: &Path,
    store_path: &Path,
) -> Result<EvalReport, EvalError> {
    let (report, entries) = run_benchmark(items, ctx)?;
    write_trajectories(store_path, &entries)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialization");
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(report_path, json)?;
    Ok(report)
}

/// Per-item CSV rows (`index,qtype,answer_type,gold,predicted,accuracy`),
/// the optional export alongside the JSON report.
pub fn per_item_csv(
    items: &[QAItem],
    entries: &[TrajectoryEntry],
    match_policy: &MatchPolicy,
) -> Result<String, EvalError> {
    let mut out = String::from("index,qtype,answer_type,gold,predicted,accuracy\n");
    for (i, (item, entry)) in items.iter().zip(entries).enumerate() {
        let acc = accuracy_reward(
            entry.trajectory.answer.as_deref(),
            &item.answer,
            item.answer_type,
            match_policy,
            None,
        )?;
        out.push_str(&format!(
            "{i},{},{:?},{},{},{}\n",
            item.qtype,
            item.answer_type,
            csv_field(&item.answer),
            csv_field(entry.trajectory.answer.as_deref().unwrap_or("")),
            acc
        ));
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Dataset statistics over a QA file: counts by question type, answer type,
/// difficulty, and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_items: usize,
    pub by_qtype: BTreeMap<String, usize>,
    pub by_answer_type: BTreeMap<String, usize>,
    pub by_difficulty: BTreeMap<String, usize>,
    pub by_provenance: BTreeMap<String, usize>,
    pub by_aspect: BTreeMap<String, usize>,
}

pub fn dataset_stats(items: &[QAItem]) -> DatasetStats {
    let mut stats = DatasetStats {
        n_items: items.len(),
        by_qtype: BTreeMap::new(),
        by_answer_type: BTreeMap::new(),
        by_difficulty: BTreeMap::new(),
        by_provenance: BTreeMap::new(),
        by_aspect: BTreeMap::new(),
    };
    for item in items {
        *stats.by_qtype.entry(item.qtype.to_string()).or_default() += 1;
        *stats
            .by_answer_type
            .entry(format!("{:?}", item.answer_type).to_lowercase())
            .or_default() += 1;
        *stats.by_difficulty.entry(item.difficulty.to_string()).or_default() += 1;
        *stats
            .by_provenance
            .entry(format!("{:?}", item.provenance).to_lowercase())
            .or_default() += 1;
        *stats.by_aspect.entry(item.aspect.clone()).or_default() += 1;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, ImageRef, Observation, Step, TerminatedBy, Trajectory};

    fn store_with(crops: usize, codes: usize) -> Vec<Trajectory> {
        let image = ImageRef { source_id: "i".into(), content_hash: "h".into(), width: 1, height: 1 };
        let mut steps = Vec::new();
        for _ in 0..crops {
            steps.push(Step {
                reasoning: "r".into(),
                action: ToolAction::Crop { bbox: BBox::new(0, 0, 10, 10).unwrap() },
                observation: Observation::Text { content: "x".into(), truncated: false },
            });
        }
        for _ in 0..codes {
            steps.push(Step {
                reasoning: "r".into(),
                action: ToolAction::code("print(1)").unwrap(),
                observation: Observation::Text { content: "1".into(), truncated: false },
            });
        }
        vec![Trajectory {
            image,
            question: "q".into(),
            steps,
            final_reasoning: String::new(),
            answer: None,
            terminated_by: TerminatedBy::TurnLimit,
        }]
    }

    #[test]
    fn tool_distribution_hand_counts() {
        let store = store_with(3, 1);
        let d = tool_distribution(&store);
        assert_eq!(d, ToolDistribution { crop_pct: 75.00, code_pct: 25.00 });
    }

    #[test]
    fn tool_distribution_empty_store() {
        let store = store_with(0, 0);
        let d = tool_distribution(&store);
        assert_eq!(d, ToolDistribution { crop_pct: 0.0, code_pct: 0.0 });
    }

    #[test]
    fn tool_distribution_code_only() {
        let store = store_with(0, 5);
        let d = tool_distribution(&store);
        assert_eq!(d, ToolDistribution { crop_pct: 0.0, code_pct: 100.0 });
    }

    #[test]
    fn tool_distribution_sums_to_hundred() {
        let store = store_with(1, 2);
        let d = tool_distribution(&store);
        assert_eq!(d.crop_pct + d.code_pct, 100.0);
    }
}
