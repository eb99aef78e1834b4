//! One function per subcommand. Each returns the list of files it produced;
//! artifact-producing commands get a manifest written next to their primary
//! output by the caller.

use crate::config::{AppConfig, CassetteMode, EndpointConfig};
use anyhow::{bail, Context};
use chart_tir::clients::{
    CassetteRecorder, CassetteReplayer, ChatTransport, HttpTransport, JudgeClient, LlmClient,
    ModelClient, PolicyClient, SamplingParams,
};
use chart_tir::datasynth::{
    self, distill_cold_start, filter_arxiv_record, synthesize_charts, synthesize_qa,
    ArxivFigureRecord, ArxivRecordRow, ChartMetaRecord, QaSource,
};
use chart_tir::evalbench::{
    self, adapters, avg_pixel_entropy, dataset_stats, tool_distribution, BenchmarkContext,
};
use chart_tir::grpo::{grpo_objective, per_trajectory_terms};
use chart_tir::model::store::{read_qa_items, read_trajectories, write_trajectories, TrajectoryEntry};
use chart_tir::model::{AssetStore, ChartImage, MaskedTokenBatch, Provenance, QAItem};
use chart_tir::reward::total_reward;
use chart_tir::rollout::{run_group, RolloutConfig};
use chart_tir::sandbox::{LocalSandbox, RemoteSandbox, Sandbox};
use chart_tir::tools::ToolConfig;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

fn build_model_client(cfg: &EndpointConfig) -> anyhow::Result<ModelClient> {
    let transport: Arc<dyn ChatTransport> = match (&cfg.cassette, cfg.cassette_mode) {
        (Some(path), CassetteMode::Replay) => Arc::new(
            CassetteReplayer::load(path)
                .with_context(|| format!("loading cassette {}", path.display()))?,
        ),
        (Some(path), CassetteMode::Record) => {
            let live = Arc::new(HttpTransport::new(
                &cfg.endpoint_url,
                cfg.api_key_env.as_deref(),
                cfg.timeout_s,
            ));
            Arc::new(CassetteRecorder::create(path, live)?)
        }
        (None, _) => Arc::new(HttpTransport::new(
            &cfg.endpoint_url,
            cfg.api_key_env.as_deref(),
            cfg.timeout_s,
        )),
    };
    Ok(ModelClient::new(transport, &cfg.model)
        .with_retry(cfg.retry())
        .with_max_inflight(cfg.max_inflight))
}

fn build_sandbox(config: &AppConfig) -> anyhow::Result<Sandbox> {
    let sandbox = match &config.sandbox.remote_url {
        Some(url) => Sandbox::remote(RemoteSandbox::new(url), config.sandbox.pool_size),
        None => Sandbox::local(
            LocalSandbox::new(config.sandbox.interpreter_cmd.clone())?,
            config.sandbox.pool_size,
        ),
    };
    Ok(sandbox)
}

fn rollout_config(config: &AppConfig) -> RolloutConfig {
    RolloutConfig {
        max_assistant_turns: config.rollout.max_assistant_turns,
        max_parse_failures: config.rollout.max_parse_failures,
        group_size: config.rollout.group_size,
        sampling: SamplingParams {
            temperature: config.rollout.temperature,
            max_tokens: config.rollout.max_tokens,
            want_logprobs: false,
        },
        tool_cfg: ToolConfig {
            min_crop_side: config.tools.min_crop_side,
            crop_resize_factor: config.tools.crop_resize_factor,
            exec_limits: config.sandbox.exec_limits(),
        },
        group_failure_threshold: config.rollout.group_failure_threshold,
    }
}

fn judge_client(config: &AppConfig) -> anyhow::Result<Option<JudgeClient>> {
    if config.reward.judge_fallback {
        Ok(Some(JudgeClient::new(build_model_client(&config.judge)?)))
    } else {
        Ok(None)
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("json output"));
}

pub fn synth_charts(
    config: &AppConfig,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> anyhow::Result<Vec<PathBuf>> {
    let llm = LlmClient::new(build_model_client(&config.llm)?);
    let sandbox = build_sandbox(config)?;
    let references = match &config.synth.reference_library {
        Some(path) => datasynth::load_reference_library(path)?,
        None => datasynth::bundled_reference_library(),
    };
    let assets = AssetStore::new(out_dir.join("charts"));
    let meta_path = out_dir.join("charts.meta.jsonl");
    let audit_path = out_dir.join("charts.audit.jsonl");
    let run = synthesize_charts(
        &llm,
        &sandbox,
        &crate::config::sampler_pools(),
        &references,
        &config.synth.synth_config(),
        n,
        seed,
        &assets,
        &meta_path,
        &audit_path,
    )?;
    print_json(&run);
    Ok(vec![meta_path, audit_path])
}

#[allow(clippy::too_many_arguments)]
pub fn synth_qa(
    config: &AppConfig,
    charts_meta: Option<&Path>,
    arxiv_records: Option<&Path>,
    assets_dir: &Path,
    seed: u64,
    out: &Path,
) -> anyhow::Result<Vec<PathBuf>> {
    let llm = LlmClient::new(build_model_client(&config.llm)?);
    let assets = AssetStore::new(assets_dir);
    let mut sources: Vec<QaSource> = Vec::new();

    if let Some(meta_path) = charts_meta {
        let rows: Vec<ChartMetaRecord> = datasynth::read_jsonl(meta_path)?;
        sources.extend(rows.into_iter().map(|row| QaSource {
            source_id: row.source_id,
            context: row.code,
            provenance: Provenance::Synth,
        }));
    }
    if let Some(records_path) = arxiv_records {
        let rows: Vec<ArxivRecordRow> = datasynth::read_jsonl(records_path)?;
        for row in rows {
            let image = assets.load(&row.source_id)?;
            let record = ArxivFigureRecord {
                image,
                caption: row.caption.clone(),
                context: row.context.clone(),
                field_tag: row.field_tag.clone(),
            };
            if filter_arxiv_record(&llm, &record)? {
                sources.push(QaSource {
                    source_id: row.source_id,
                    context: format!("{}\n{}", row.caption, row.context),
                    provenance: Provenance::ArxivMined,
                });
            }
        }
    }
    if sources.is_empty() {
        bail!("no QA sources: pass --charts-meta and/or --arxiv-records");
    }

    let audit_path = audit_sibling(out, "audit.jsonl");
    let run = synthesize_qa(
        &llm,
        &llm,
        &sources,
        &config.synth.synth_config(),
        seed,
        &assets,
        out,
        &audit_path,
    )?;
    print_json(&run);
    Ok(vec![out.to_path_buf(), audit_path])
}

fn audit_sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let base = stem.strip_suffix(".jsonl").unwrap_or(&stem);
    path.with_file_name(format!("{base}.{suffix}"))
}

pub fn coldstart(
    config: &AppConfig,
    dataset: &Path,
    assets_dir: &Path,
    out: &Path,
) -> anyhow::Result<Vec<PathBuf>> {
    let items = read_qa_items(dataset)?;
    if items.is_empty() {
        bail!("dataset malformed: {} has no items", dataset.display());
    }
    let teacher = PolicyClient::new(build_model_client(&config.policy)?);
    let sandbox = build_sandbox(config)?;
    let judge = judge_client(config)?;
    let outcome = distill_cold_start(
        &teacher,
        &items,
        &AssetStore::new(assets_dir),
        &rollout_config(config),
        &sandbox,
        &config.reward.match_policy(),
        judge.as_ref(),
    )?;
    datasynth::write_jsonl(out, &outcome.records)?;
    let summary = serde_json::json!({
        "attempted": outcome.attempted,
        "retained": outcome.records.len(),
        "discarded_tool_error": outcome.discarded_tool_error,
        "discarded_wrong_answer": outcome.discarded_wrong_answer,
        "discarded_non_compliant": outcome.discarded_non_compliant,
        "discarded_policy_failure": outcome.discarded_policy_failure,
    });
    print_json(&summary);
    Ok(vec![out.to_path_buf()])
}

pub fn rollout(
    config: &AppConfig,
    dataset: &Path,
    assets_dir: &Path,
    out: &Path,
    group_size: Option<u32>,
) -> anyhow::Result<Vec<PathBuf>> {
    let items = read_qa_items(dataset)?;
    if items.is_empty() {
        bail!("dataset malformed: {} has no items", dataset.display());
    }
    let policy = PolicyClient::new(build_model_client(&config.policy)?);
    let sandbox = build_sandbox(config)?;
    let assets = AssetStore::new(assets_dir);
    let mut cfg = rollout_config(config);
    if let Some(g) = group_size {
        cfg.group_size = g;
    }

    let mut entries: Vec<TrajectoryEntry> = Vec::new();
    let mut member_failures = 0usize;
    for item in &items {
        let image = assets.load(&item.image_ref)?;
        let group = run_group(&policy, &image, &item.question, &cfg, &sandbox)?;
        member_failures += group.failures.iter().flatten().count();
        for (trajectory, raw_turns) in
            group.sample.trajectories.into_iter().zip(group.raw_turns)
        {
            entries.push(TrajectoryEntry { trajectory, raw_turns: Some(raw_turns) });
        }
    }
    write_trajectories(out, &entries)?;
    let summary = serde_json::json!({
        "items": items.len(),
        "group_size": cfg.group_size,
        "trajectories": entries.len(),
        "member_policy_failures": member_failures,
        "store": out,
    });
    print_json(&summary);
    Ok(vec![out.to_path_buf()])
}

#[derive(Serialize)]
struct RewardRow {
    index: usize,
    source_id: String,
    question: String,
    acc: f64,
    format: f64,
    tool: f64,
    total: f64,
    raw_turns_missing: bool,
}

pub fn reward_check(
    config: &AppConfig,
    store: &Path,
    dataset: &Path,
    out: Option<&Path>,
) -> anyhow::Result<Vec<PathBuf>> {
    let entries = read_trajectories(store)?;
    let items = read_qa_items(dataset)?;
    let judge = judge_client(config)?;
    let policy = config.reward.match_policy();

    let gold: std::collections::HashMap<(String, String), &QAItem> = items
        .iter()
        .map(|item| ((item.image_ref.clone(), item.question.clone()), item))
        .collect();

    let mut rows: Vec<RewardRow> = Vec::new();
    for (index, entry) in entries.iter().enumerate() {
        let t = &entry.trajectory;
        let key = (t.image.source_id.clone(), t.question.clone());
        let Some(item) = gold.get(&key) else {
            bail!(
                "trajectory {index} has no dataset row for image {:?} question {:?}",
                key.0,
                key.1
            );
        };
        // Records without raw turns cannot prove structural compliance, so
        // format scores 0 and the row is flagged.
        let empty: Vec<String> = Vec::new();
        let raw_turns = entry.raw_turns.as_ref().unwrap_or(&empty);
        let breakdown = total_reward(
            t,
            raw_turns,
            &item.answer,
            item.answer_type,
            config.reward.lambda1,
            config.reward.lambda2,
            &policy,
            judge.as_ref(),
        )?;
        rows.push(RewardRow {
            index,
            source_id: key.0,
            question: key.1,
            acc: breakdown.acc,
            format: breakdown.format,
            tool: breakdown.tool,
            total: breakdown.total,
            raw_turns_missing: entry.raw_turns.is_none(),
        });
    }

    let n = rows.len().max(1) as f64;
    let report = serde_json::json!({
        "n_trajectories": rows.len(),
        "mean": {
            "acc": rows.iter().map(|r| r.acc).sum::<f64>() / n,
            "format": rows.iter().map(|r| r.format).sum::<f64>() / n,
            "tool": rows.iter().map(|r| r.tool).sum::<f64>() / n,
            "total": rows.iter().map(|r| r.total).sum::<f64>() / n,
        },
        "lambda1": config.reward.lambda1,
        "lambda2": config.reward.lambda2,
        "per_trajectory": rows,
    });
    match out {
        Some(path) => {
            std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
            Ok(vec![path.to_path_buf()])
        }
        None => {
            print_json(&report);
            Ok(vec![])
        }
    }
}

pub fn grpo_eval(config: &AppConfig, fixtures: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let batch: Vec<MaskedTokenBatch> = datasynth::read_jsonl(fixtures)?;
    let cfg = config.grpo.grpo_config();
    let objective = grpo_objective(&batch, &cfg)?;
    let terms = per_trajectory_terms(&batch, &cfg)?;
    print_json(&serde_json::json!({
        "objective": objective,
        "per_trajectory": terms,
        "epsilon": cfg.epsilon,
        "group_size": batch.len(),
    }));
    Ok(vec![])
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    config: &AppConfig,
    dataset: &Path,
    format: Option<&str>,
    assets_dir: &Path,
    report_path: &Path,
    store_path: &Path,
    csv_path: Option<&Path>,
) -> anyhow::Result<Vec<PathBuf>> {
    let items = load_eval_items(dataset, format)?;
    let policy = PolicyClient::new(build_model_client(&config.policy)?);
    let sandbox = build_sandbox(config)?;
    let assets = AssetStore::new(assets_dir);
    let judge = judge_client(config)?;
    let ctx = BenchmarkContext {
        policy: &policy,
        sandbox: &sandbox,
        assets: &assets,
        rollout: rollout_config(config),
        match_policy: config.reward.match_policy(),
        judge: judge.as_ref(),
        config_hash: config.hash(),
    };
    let (report, entries) = evalbench::run_benchmark(&items, &ctx)?;
    write_trajectories(store_path, &entries)?;
    std::fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
    let mut outputs = vec![report_path.to_path_buf(), store_path.to_path_buf()];
    if let Some(csv) = csv_path {
        let text = evalbench::per_item_csv(&items, &entries, &ctx.match_policy)?;
        std::fs::write(csv, text)?;
        outputs.push(csv.to_path_buf());
    }
    print_json(&report);
    Ok(outputs)
}

fn load_eval_items(dataset: &Path, format: Option<&str>) -> anyhow::Result<Vec<QAItem>> {
    let items = match format {
        None | Some("qa-jsonl") => read_qa_items(dataset)?,
        Some(name) => {
            let format = adapters::BenchmarkFormat::parse_name(name)
                .ok_or_else(|| anyhow::anyhow!("unknown benchmark format {name:?}"))?;
            let text = std::fs::read_to_string(dataset)?;
            adapters::convert(format, &text)?
        }
    };
    if items.is_empty() {
        bail!("dataset malformed: {} has no items", dataset.display());
    }
    Ok(items)
}

pub fn entropy(images_dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(images_dir)
        .with_context(|| format!("reading {}", images_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG images under {}", images_dir.display());
    }
    let mut images: Vec<ChartImage> = Vec::with_capacity(paths.len());
    for path in &paths {
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        images.push(ChartImage::load_png(id, path)?);
    }
    let avg = avg_pixel_entropy(&images)?;
    let per_image: Vec<serde_json::Value> = images
        .iter()
        .map(|img| {
            serde_json::json!({
                "source_id": img.source_id(),
                "entropy_bits": evalbench::entropy::pixel_entropy(img),
            })
        })
        .collect();
    print_json(&serde_json::json!({
        "n_images": images.len(),
        "avg_entropy_bits": avg,
        "log_base": 2,
        "grayscale": "bt601",
        "per_image": per_image,
    }));
    Ok(vec![])
}

pub fn stats(dataset: &Path, charts_meta: Option<&Path>, store: Option<&Path>) -> anyhow::Result<Vec<PathBuf>> {
    let items = read_qa_items(dataset)?;
    let mut output = serde_json::json!({ "qa": dataset_stats(&items) });
    if let Some(meta_path) = charts_meta {
        let rows: Vec<ChartMetaRecord> = datasynth::read_jsonl(meta_path)?;
        let mut buckets: std::collections::BTreeMap<String, usize> = Default::default();
        for row in &rows {
            let bucket = match row.spec.num_subplots {
                1 => "1",
                2..=4 => "2-4",
                5..=9 => "5-9",
                _ => "9+",
            };
            *buckets.entry(bucket.to_string()).or_default() += 1;
        }
        output["charts"] = serde_json::json!({
            "n_charts": rows.len(),
            "subplot_buckets": buckets,
        });
    }
    if let Some(store_path) = store {
        let entries = read_trajectories(store_path)?;
        let distribution = tool_distribution(entries.iter().map(|e| &e.trajectory));
        output["tool_distribution"] = serde_json::to_value(distribution)?;
    }
    print_json(&output);
    Ok(vec![])
}
