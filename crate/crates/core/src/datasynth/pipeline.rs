//! Stage drivers: whole-corpus chart synthesis, QA synthesis, and cold-start
//! distillation, each writing its JSONL checkpoint and audit log.

use super::{
    check_qa, filter_image, generate_chart, sample_chart_spec, ChartMetaRecord, LayoutTag,
    QaAuditRecord, ReferenceSnippet, SamplerPools, SynthConfig, SynthError,
};
use crate::clients::LlmClient;
use crate::model::store::write_qa_items;
use crate::model::{AssetStore, Provenance, QAItem, QuestionType};
use crate::sandbox::Sandbox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Tally of one chart-synthesis run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChartSynthesisRun {
    pub requested: usize,
    pub kept: usize,
    pub discarded_by_filter: usize,
    pub render_failures: usize,
}

/// Synthesizes `n` charts: sample a spec, pair it with a layout-matched
/// reference, render with repair, judge quality, and keep survivors as PNG
/// assets plus `charts.meta.jsonl` rows. Every judged chart lands in the
/// audit log, kept or not. Deterministic for a fixed seed under cassettes.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_charts(
    llm: &LlmClient,
    sandbox: &Sandbox,
    pools: &SamplerPools,
    references: &[ReferenceSnippet],
    cfg: &SynthConfig,
    n: usize,
    seed: u64,
    assets: &AssetStore,
    meta_path: &Path,
    audit_path: &Path,
) -> Result<ChartSynthesisRun, SynthError> {
    if references.is_empty() {
        return Err(SynthError::RecordInvalid("reference library is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = ChartSynthesisRun { requested: n, ..Default::default() };
    let mut kept_rows: Vec<ChartMetaRecord> = Vec::new();
    let mut audit_rows: Vec<ChartMetaRecord> = Vec::new();

    for i in 0..n {
        let mut spec = sample_chart_spec(&mut rng, pools);
        let wanted = if spec.num_subplots == 1 {
            LayoutTag::SinglePlot
        } else {
            LayoutTag::MultiSubplot
        };
        let matching: Vec<&ReferenceSnippet> =
            references.iter().filter(|r| r.layout_tag == wanted).collect();
        let pool = if matching.is_empty() {
            references.iter().collect::<Vec<_>>()
        } else {
            matching
        };
        let reference = pool[rng.random_range(0..pool.len())];
        spec.reference_id = Some(reference.id.clone());

        let source_id = format!("synth-{seed}-{i:05}");
        let chart = match generate_chart(llm, &spec, reference, cfg.max_repairs, sandbox, &source_id)
        {
            Ok(c) => c,
            Err(SynthError::RenderFailed { .. }) => {
                run.render_failures += 1;
                continue;
            }
            Err(other) => return Err(other),
        };
        let verdict =
            filter_image(llm, &chart.image, cfg.visual_threshold, cfg.semantic_threshold)?;
        let row = ChartMetaRecord {
            source_id: source_id.clone(),
            spec,
            code: chart.code,
            repairs: chart.repairs,
            verdict,
        };
        audit_rows.push(row.clone());
        if verdict.keep {
            assets.save(&chart.image)?;
            kept_rows.push(row);
            run.kept += 1;
        } else {
            run.discarded_by_filter += 1;
        }
    }

    super::write_jsonl(meta_path, &kept_rows)?;
    super::write_jsonl(audit_path, &audit_rows)?;
    Ok(run)
}

/// One QA-synthesis input: a chart already in the asset store plus its
/// textual context (plot code for synthetic charts, caption/context for
/// mined ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaSource {
    pub source_id: String,
    pub context: String,
    pub provenance: Provenance,
}

/// Tally of one QA-synthesis run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QaSynthesisRun {
    pub candidates: usize,
    pub kept: usize,
}

/// Generates candidate QA pairs per chart (one sampled aspect per question
/// type), pushes every candidate through the four-stage check, and writes
/// kept items to `qa.jsonl` with the full audit trail in `qa.audit.jsonl`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_qa(
    generator: &LlmClient,
    checker: &LlmClient,
    sources: &[QaSource],
    cfg: &SynthConfig,
    seed: u64,
    assets: &AssetStore,
    qa_path: &Path,
    audit_path: &Path,
) -> Result<QaSynthesisRun, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = QaSynthesisRun::default();
    let mut kept: Vec<QAItem> = Vec::new();
    let mut audit: Vec<QaAuditRecord> = Vec::new();

    for source in sources {
        let image = assets.load(&source.source_id)?;
        for qtype in [QuestionType::Recognition, QuestionType::Reasoning] {
            let pool = cfg.aspects.for_qtype(qtype);
            let aspect = &pool[rng.random_range(0..pool.len())];
            let candidates = super::generate_qa(
                generator,
                &image,
                &source.context,
                aspect,
                qtype,
                &cfg.aspects,
                source.provenance,
            )?;
            for item in candidates {
                run.candidates += 1;
                let report = check_qa(
                    checker,
                    &item,
                    &image,
                    cfg.votes_n,
                    cfg.vote_threshold,
                    cfg.difficulty_threshold,
                )?;
                let keep = report.kept;
                audit.push(QaAuditRecord { item: item.clone(), report });
                if keep {
                    kept.push(item);
                    run.kept += 1;
                }
            }
        }
    }

    write_qa_items(qa_path, &kept)?;
    super::write_jsonl(audit_path, &audit)?;
    Ok(run)
}
