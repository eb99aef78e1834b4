//! Dual-source data synthesis: chart-spec sampling, plot-code generation
//! with sandbox repair, image quality filtering, arXiv-record filtering, QA
//! generation with four-stage checking, and cold-start trajectory
//! distillation.
//!
//! Every stage processes records independently and writes line-delimited
//! JSON checkpoints, so stages are resumable and, under cassettes and a
//! fixed seed, whole-pipeline outputs are byte-identical across runs.

use crate::clients::ClientError;
use crate::model::{AspectPools, ChartImage, ModelError};
use crate::sandbox::SandboxError;
use serde::{Deserialize, Serialize};

mod chartgen;
mod coldstart;
mod pipeline;
mod qa;
mod sampler;

pub use chartgen::{filter_arxiv_record, filter_image, generate_chart, GeneratedChart};
pub use coldstart::{distill_cold_start, ColdStartOutcome, SftMessage, SftPart, SftRecord};
pub use pipeline::{
    synthesize_charts, synthesize_qa, ChartSynthesisRun, QaSource, QaSynthesisRun,
};
pub use qa::{check_qa, generate_qa};
pub use sampler::{sample_chart_spec, SamplerPools, SubplotBucket};

/// Prompt template version for the checker agent, recorded in manifests.
pub const CHECKER_TEMPLATE_VERSION: &str = "checker-v1";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    /// Chart code never rendered after exhausting the repair budget.
    #[error("chart rendering failed after {attempts} attempts: {last_error}")]
    RenderFailed { attempts: u32, last_error: String },
    #[error("judge verdict unparseable: {0:?}")]
    UnparseableVerdict(String),
    #[error("generator reply unparseable: {0}")]
    GenerationUnparseable(String),
    #[error("aspect {aspect:?} is not in the configured {qtype} pool")]
    AspectNotInPool { aspect: String, qtype: String },
    #[error("record invalid: {0}")]
    RecordInvalid(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A curated snippet reproducing a real-world chart, used to condition the
/// plot generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSnippet {
    pub id: String,
    pub layout_tag: LayoutTag,
    pub code: String,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutTag {
    SinglePlot,
    MultiSubplot,
}

/// The bundled seed reference library. Corpus size is a data property, not a
/// code property; this ships the format plus a working starter set.
pub fn bundled_reference_library() -> Vec<ReferenceSnippet> {
    let text = include_str!("reference_library.jsonl");
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled reference library is valid"))
        .collect()
}

/// Loads a reference library from a JSONL file (one snippet per line).
pub fn load_reference_library(path: &std::path::Path) -> Result<Vec<ReferenceSnippet>, SynthError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| SynthError::RecordInvalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// A pre-extracted figure record mined from a paper.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxivFigureRecord {
    pub image: ChartImage,
    pub caption: String,
    pub context: String,
    pub field_tag: String,
}

impl ArxivFigureRecord {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.caption.trim().is_empty() && self.context.trim().is_empty() {
            return Err(SynthError::RecordInvalid(
                "arXiv figure record needs a caption or context".into(),
            ));
        }
        Ok(())
    }
}

/// On-disk form of an arXiv figure record (`arxiv_records.jsonl`): the image
/// lives in the asset store under `source_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArxivRecordRow {
    pub source_id: String,
    pub caption: String,
    pub context: String,
    pub field_tag: String,
}

/// Image quality judgment: visual quality and semantic completeness, each
/// 1-5; `keep` iff both scores reach their thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub visual_score: u8,
    pub semantic_score: u8,
    pub keep: bool,
}

/// Outcome of the four-stage QA check: image alignment, reasoning
/// verification, majority voting, and difficulty scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub alignment_ok: bool,
    pub reasoning_ok: bool,
    pub votes: Vec<String>,
    /// Fraction of votes agreeing with the modal answer.
    pub agreement: f64,
    pub difficulty: u8,
    pub kept: bool,
}

/// Synthesis thresholds and pools. The distribution defaults mirror the
/// dataset statistics the sampler targets; all are overridable per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub max_repairs: u32,
    pub visual_threshold: u8,
    pub semantic_threshold: u8,
    pub votes_n: usize,
    pub vote_threshold: f64,
    /// Minimum difficulty for reasoning items; recognition items are not
    /// difficulty-filtered.
    pub difficulty_threshold: u8,
    pub aspects: AspectPools,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            max_repairs: 3,
            visual_threshold: 3,
            semantic_threshold: 3,
            votes_n: 5,
            vote_threshold: 0.8,
            difficulty_threshold: 3,
            aspects: AspectPools::default(),
        }
    }
}

/// One row of `charts.meta.jsonl`: what was generated and how it was judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartMetaRecord {
    pub source_id: String,
    pub spec: crate::model::ChartSpec,
    pub code: String,
    pub repairs: u32,
    pub verdict: QualityVerdict,
}

/// One row of `qa.audit.jsonl`: every candidate item with its full check
/// report, kept or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaAuditRecord {
    pub item: crate::model::QAItem,
    pub report: CheckReport,
}

pub fn write_jsonl<T: Serialize>(
    path: &std::path::Path,
    rows: &[T],
) -> Result<(), SynthError> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        let line = serde_json::to_string(row).expect("jsonl row serialization");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &std::path::Path,
) -> Result<Vec<T>, SynthError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| SynthError::RecordInvalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::{ExecLimits, LocalSandbox};

    #[test]
    fn bundled_library_parses_and_tags() {
        let lib = bundled_reference_library();
        assert!(lib.len() >= 3);
        assert!(lib.iter().any(|s| s.layout_tag == LayoutTag::SinglePlot));
        assert!(lib.iter().any(|s| s.layout_tag == LayoutTag::MultiSubplot));
        let mut ids: Vec<&str> = lib.iter().map(|s| s.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), lib.len(), "snippet ids must be unique");
    }

    /// Library invariant: every snippet renders at least one image artifact
    /// in the sandbox.
    #[test]
    fn bundled_library_renders() {
        let sandbox = LocalSandbox::default();
        let limits = ExecLimits { wall_timeout_s: 60.0, cpu_timeout_s: 60.0, ..ExecLimits::default() };
        for snippet in bundled_reference_library() {
            let exec = sandbox
                .execute_keep(&snippet.code, &limits, &[])
                .unwrap_or_else(|e| panic!("snippet {} failed to start: {e}", snippet.id));
            assert!(
                exec.result.succeeded(),
                "snippet {} exited {:?}: {}",
                snippet.id,
                exec.result.exit_status,
                exec.result.stderr
            );
            assert!(
                exec.result.artifacts.iter().any(|a| a.ends_with(".png")),
                "snippet {} produced no image artifact",
                snippet.id
            );
        }
    }

    #[test]
    fn arxiv_record_invariant() {
        let img = ChartImage::from_fn("a", 2, 2, |_, _| [0, 0, 0]).unwrap();
        let empty = ArxivFigureRecord {
            image: img.clone(),
            caption: " ".into(),
            context: String::new(),
            field_tag: "cs".into(),
        };
        assert!(empty.validate().is_err());
        let ok = ArxivFigureRecord { caption: "Figure 1: loss".into(), ..empty };
        assert!(ok.validate().is_ok());
    }
}
