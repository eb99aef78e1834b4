//! Adapters normalizing third-party benchmark layouts into the canonical QA
//! JSONL format.
//!
//! Each adapter does a best-effort field mapping from the benchmark's
//! published JSON layout; the canonical format is ours and the adapters are
//! conveniences, not bit-exact importers. Items whose answers are plain
//! numbers are tagged `numeric`, yes/no answers `binary`, everything else
//! `text`; the aspect falls back to broad defaults since third-party sets
//! carry no aspect metadata.

use super::EvalError;
use crate::model::{AnswerType, Provenance, QAItem, QuestionType};
use serde_json::Value;

/// Supported third-party layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkFormat {
    ChartQa,
    CharXiv,
    ChartQaPro,
    ChartBench,
    ChartX,
    ReachQa,
}

impl BenchmarkFormat {
    pub fn parse_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "chartqa" => Some(Self::ChartQa),
            "charxiv" => Some(Self::CharXiv),
            "chartqapro" => Some(Self::ChartQaPro),
            "chartbench" => Some(Self::ChartBench),
            "chartx" => Some(Self::ChartX),
            "reachqa" => Some(Self::ReachQa),
            _ => None,
        }
    }
}

/// Converts a benchmark file's JSON text (an array of rows, or one JSON
/// object per line) into canonical QA items.
pub fn convert(format: BenchmarkFormat, text: &str) -> Result<Vec<QAItem>, EvalError> {
    let rows = parse_rows(text)?;
    let mut items = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        items.push(
            convert_row(format, row)
                .ok_or_else(|| EvalError::DatasetMalformed(format!("row {i}: unmapped fields")))?,
        );
    }
    Ok(items)
}

fn parse_rows(text: &str) -> Result<Vec<Value>, EvalError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        let rows: Vec<Value> = serde_json::from_str(text)
            .map_err(|e| EvalError::DatasetMalformed(e.to_string()))?;
        return Ok(rows);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| EvalError::DatasetMalformed(e.to_string())))
        .collect()
}

fn convert_row(format: BenchmarkFormat, row: &Value) -> Option<QAItem> {
    let image = str_of(row, &["imgname", "image", "image_path", "figure_path", "img"])?;
    let question = str_of(row, &["query", "question", "Question"])?;
    let answer = any_of(row, &["label", "answer", "Answer", "gt_answer"])?;

    let qtype = match format {
        BenchmarkFormat::ChartQa | BenchmarkFormat::ChartX => QuestionType::Reasoning,
        BenchmarkFormat::CharXiv => match str_of(row, &["split", "question_type", "type"]) {
            Some(t) if t.to_lowercase().contains("desc") => QuestionType::Recognition,
            _ => QuestionType::Reasoning,
        },
        BenchmarkFormat::ChartQaPro => QuestionType::Reasoning,
        BenchmarkFormat::ChartBench => match str_of(row, &["type", "task"]) {
            Some(t) if t.to_lowercase().contains("binary") => QuestionType::Recognition,
            _ => QuestionType::Reasoning,
        },
        BenchmarkFormat::ReachQa => match str_of(row, &["qa_type", "type"]) {
            Some(t) if t.to_lowercase().contains("recog") => QuestionType::Recognition,
            _ => QuestionType::Reasoning,
        },
    };

    let answer_type = infer_answer_type(&answer);
    let aspect = match qtype {
        QuestionType::Recognition => "Pattern Recognition",
        QuestionType::Reasoning => "Comparative Analysis",
    };
    Some(QAItem {
        image_ref: strip_extension(&image),
        question,
        answer,
        qtype,
        aspect: aspect.into(),
        answer_type,
        difficulty: 3,
        provenance: Provenance::ArxivMined,
    })
}

fn str_of(row: &Value, keys: &[&str]) -> Option<String> {
    keys.iter()
        .find_map(|k| row.get(k).and_then(Value::as_str))
        .map(str::to_string)
}

/// Like [`str_of`] but also renders numeric and boolean answers as text.
fn any_of(row: &Value, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| match row.get(k)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(if *b { "yes" } else { "no" }.to_string()),
        _ => None,
    })
}

fn infer_answer_type(answer: &str) -> AnswerType {
    let cleaned: String = answer
        .trim()
        .chars()
        .filter(|c| !matches!(c, '%' | ',' | '$'))
        .collect();
    if cleaned.parse::<f64>().is_ok() {
        return AnswerType::Numeric;
    }
    match answer.trim().to_lowercase().as_str() {
        "yes" | "no" | "true" | "false" => AnswerType::Binary,
        _ => AnswerType::Text,
    }
}

fn strip_extension(name: &str) -> String {
    std::path::Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}
