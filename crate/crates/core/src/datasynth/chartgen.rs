//! Plot-code generation with sandbox repair, plus the image and arXiv-record
//! quality filters.

use super::{ArxivFigureRecord, QualityVerdict, ReferenceSnippet, SynthError};
use crate::clients::{ChatMessage, LlmClient, Part, SamplingParams};
use crate::model::{ChartImage, ChartSpec};
use crate::sandbox::Sandbox;

/// A successfully rendered synthetic chart.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedChart {
    pub code: String,
    pub image: ChartImage,
    /// Repair rounds that were needed (0 = first attempt rendered).
    pub repairs: u32,
}

fn generator_sampling() -> SamplingParams {
    SamplingParams { temperature: 0.7, max_tokens: 4096, want_logprobs: false }
}

fn spec_prompt(spec: &ChartSpec, reference: &ReferenceSnippet) -> String {
    format!(
        "Write self-contained Python matplotlib code that renders one chart image.\n\
         Persona and topic: {persona}.\n\
         Subplots: {n} arranged {rows}x{cols}.\n\
         Chart type per subplot: {types}.\n\
         Target difficulty: {difficulty}/5 (more series, denser annotations at higher levels).\n\
         Invent realistic labeled data consistent with the persona. Use matplotlib's Agg \
         backend, save exactly one PNG with fig.savefig('chart.png', dpi=100), and do not \
         call plt.show().\n\n\
         Reference snippet in the house style:\n```python\n{reference}\n```\n\n\
         Reply with a single ```python code block.",
        persona = spec.persona,
        n = spec.num_subplots,
        rows = spec.layout.0,
        cols = spec.layout.1,
        types = spec.chart_types.join(", "),
        difficulty = spec.difficulty,
        reference = reference.code,
    )
}

/// Pulls the program text out of a generator reply: the first ```python
/// fenced block, or the raw reply when no fence is present.
fn extract_code(reply: &str) -> Result<String, SynthError> {
    let code = if let Some(open) = reply.find("```") {
        let after = &reply[open + 3..];
        let after = after.strip_prefix("python").unwrap_or(after);
        let after = after.strip_prefix('\n').unwrap_or(after);
        match after.find("```") {
            Some(close) => &after[..close],
            None => after,
        }
    } else {
        reply
    };
    let code = code.trim();
    if code.is_empty() {
        return Err(SynthError::GenerationUnparseable("empty code reply".into()));
    }
    Ok(code.to_string())
}

/// Prompts the generator with the spec and reference, executes the code in
/// the sandbox, and on failure re-prompts with the error text until a PNG
/// artifact renders or the repair budget is spent. `max_repairs` bounds the
/// re-prompts, so at most `max_repairs + 1` executions happen.
pub fn generate_chart(
    llm: &LlmClient,
    spec: &ChartSpec,
    reference: &ReferenceSnippet,
    max_repairs: u32,
    sandbox: &Sandbox,
    source_id: &str,
) -> Result<GeneratedChart, SynthError> {
    let mut messages = vec![
        ChatMessage::system(
            "You are a plotting agent writing clean, deterministic matplotlib code.",
        ),
        ChatMessage::user_text(spec_prompt(spec, reference)),
    ];
    let limits = crate::sandbox::ExecLimits {
        wall_timeout_s: 60.0,
        cpu_timeout_s: 60.0,
        ..Default::default()
    };

    let mut last_error = String::new();
    for attempt in 0..=max_repairs {
        let reply = llm.complete(&messages, &generator_sampling())?;
        let code = extract_code(&reply)?;
        let exec = sandbox.execute_keep(&code, &limits, &[])?;
        let png = exec
            .result
            .artifacts
            .iter()
            .find(|a| a.ends_with(".png"))
            .and_then(|name| exec.read_artifact(name).ok());
        match png {
            Some(bytes) if exec.result.succeeded() => {
                let image = ChartImage::from_png(source_id, &bytes)?;
                return Ok(GeneratedChart { code, image, repairs: attempt });
            }
            _ => {
                last_error = if exec.result.stderr.is_empty() {
                    format!("exit {:?}, no PNG artifact produced", exec.result.exit_status)
                } else {
                    exec.result.stderr.clone()
                };
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user_text(format!(
                    "That code failed to render a chart. Error:\n{last_error}\n\
                     Fix the problem and reply with the corrected full ```python block."
                )));
            }
        }
    }
    Err(SynthError::RenderFailed { attempts: max_repairs + 1, last_error })
}

/// Scores one chart along visual quality and semantic completeness (1-5
/// each) via the judge LLM; kept only when both scores reach their
/// thresholds.
pub fn filter_image(
    llm: &LlmClient,
    image: &ChartImage,
    visual_threshold: u8,
    semantic_threshold: u8,
) -> Result<QualityVerdict, SynthError> {
    let messages = vec![
        ChatMessage::system(
            "You are a strict chart-quality judge. Score the chart image on two axes, \
             each 1-5: visual_quality (penalize severe overlap, misalignment, unreadable \
             text) and semantic_completeness (axes, legends, and labels present so the \
             chart is self-contained). Reply with single-line JSON: \
             {\"visual_quality\": n, \"semantic_completeness\": n}",
        ),
        ChatMessage::user_parts(vec![Part::Image(image.clone())]),
    ];
    let sampling = SamplingParams { temperature: 0.0, max_tokens: 64, want_logprobs: false };
    let raw = llm.complete(&messages, &sampling)?;
    let value: serde_json::Value = serde_json::from_str(raw.trim())
        .map_err(|_| SynthError::UnparseableVerdict(raw.clone()))?;
    let score = |key: &str| -> Result<u8, SynthError> {
        value
            .get(key)
            .and_then(|v| v.as_u64())
            .filter(|n| (1..=5).contains(n))
            .map(|n| n as u8)
            .ok_or_else(|| SynthError::UnparseableVerdict(raw.clone()))
    };
    let visual_score = score("visual_quality")?;
    let semantic_score = score("semantic_completeness")?;
    Ok(QualityVerdict {
        visual_score,
        semantic_score,
        keep: visual_score >= visual_threshold && semantic_score >= semantic_threshold,
    })
}

/// Classifies a mined figure as a data visualization or not. Records failing
/// their own invariant (no caption and no context) are rejected before the
/// judge is consulted.
pub fn filter_arxiv_record(
    llm: &LlmClient,
    record: &ArxivFigureRecord,
) -> Result<bool, SynthError> {
    if record.validate().is_err() {
        return Ok(false);
    }
    let messages = vec![
        ChatMessage::system(
            "Classify the figure. Reply with exactly one word: 'chart' if it is a data \
             visualization (axes/series/values readable as data), otherwise the kind of \
             figure it is (e.g. 'diagram', 'photo', 'equation').",
        ),
        ChatMessage::user_parts(vec![
            Part::Image(record.image.clone()),
            Part::Text(format!(
                "Caption: {}\nContext: {}",
                record.caption, record.context
            )),
        ]),
    ];
    let sampling = SamplingParams { temperature: 0.0, max_tokens: 8, want_logprobs: false };
    let raw = llm.complete(&messages, &sampling)?;
    let word: String = raw
        .trim()
        .to_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphabetic())
        .collect();
    if word.is_empty() {
        return Err(SynthError::UnparseableVerdict(raw));
    }
    Ok(word == "chart")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{ModelClient, ScriptedReply, ScriptedTransport};
    use crate::datasynth::LayoutTag;
    use crate::model::ChartSpec;
    use crate::sandbox::LocalSandbox;
    use std::sync::Arc;

    fn llm_with(replies: Vec<ScriptedReply>) -> LlmClient {
        LlmClient::new(ModelClient::new(Arc::new(ScriptedTransport::new(replies)), "gen"))
    }

    fn spec() -> ChartSpec {
        ChartSpec {
            persona: "ML researcher comparing ablation runs".into(),
            num_subplots: 1,
            layout: (1, 1),
            chart_types: vec!["line".into()],
            difficulty: 2,
            reference_id: Some("ref-line-single".into()),
        }
    }

    fn reference() -> ReferenceSnippet {
        ReferenceSnippet {
            id: "ref-line-single".into(),
            layout_tag: LayoutTag::SinglePlot,
            code: "import matplotlib\n".into(),
            note: String::new(),
        }
    }

    const GOOD_CODE: &str = "```python\nimport matplotlib\nmatplotlib.use('Agg')\nimport matplotlib.pyplot as plt\nfig, ax = plt.subplots()\nax.plot([1, 2, 3], [2, 4, 1])\nfig.savefig('chart.png')\n```";
    const BROKEN_CODE: &str = "```python\nthis is not python at all (\n```";

    fn sandbox() -> Sandbox {
        Sandbox::local(LocalSandbox::default(), 2)
    }

    #[test]
    fn renders_first_try() {
        let llm = llm_with(vec![ScriptedReply::text(GOOD_CODE)]);
        let chart = generate_chart(&llm, &spec(), &reference(), 3, &sandbox(), "c1").unwrap();
        assert_eq!(chart.repairs, 0);
        assert_eq!(chart.image.source_id(), "c1");
        assert!(chart.image.width() > 0);
    }

    #[test]
    fn repairs_once_then_succeeds() {
        let llm = llm_with(vec![
            ScriptedReply::text(BROKEN_CODE),
            ScriptedReply::text(GOOD_CODE),
        ]);
        let chart = generate_chart(&llm, &spec(), &reference(), 3, &sandbox(), "c2").unwrap();
        assert_eq!(chart.repairs, 1);
    }

    #[test]
    fn gives_up_after_budget() {
        let transport = Arc::new(ScriptedTransport::new(vec![
            ScriptedReply::text(BROKEN_CODE),
            ScriptedReply::text(BROKEN_CODE),
            ScriptedReply::text(BROKEN_CODE),
        ]));
        let llm = LlmClient::new(ModelClient::new(transport.clone(), "gen"));
        let err = generate_chart(&llm, &spec(), &reference(), 2, &sandbox(), "c3").unwrap_err();
        match err {
            SynthError::RenderFailed { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        // Exactly three generator calls consumed: one per execution.
        assert_eq!(transport.remaining(), 0);
    }

    #[test]
    fn code_without_fences_accepted() {
        assert_eq!(extract_code("print(1)").unwrap(), "print(1)");
        assert!(extract_code("``````").is_err());
    }

    fn tiny_image() -> ChartImage {
        ChartImage::from_fn("img", 4, 4, |_, _| [255, 255, 255]).unwrap()
    }

    #[test]
    fn image_filter_conjunction() {
        for (visual, semantic, keep) in [(5, 5, true), (2, 5, false), (5, 2, false)] {
            let reply = format!(
                "{{\"visual_quality\": {visual}, \"semantic_completeness\": {semantic}}}"
            );
            let llm = llm_with(vec![ScriptedReply::text(reply)]);
            let verdict = filter_image(&llm, &tiny_image(), 3, 3).unwrap();
            assert_eq!(verdict.keep, keep, "({visual},{semantic})");
            assert_eq!(verdict.visual_score, visual);
            assert_eq!(verdict.semantic_score, semantic);
        }
    }

    #[test]
    fn image_filter_unparseable() {
        let llm = llm_with(vec![ScriptedReply::text("looks nice!")]);
        assert!(matches!(
            filter_image(&llm, &tiny_image(), 3, 3),
            Err(SynthError::UnparseableVerdict(_))
        ));
        let llm = llm_with(vec![ScriptedReply::text("{\"visual_quality\": 9, \"semantic_completeness\": 1}")]);
        assert!(filter_image(&llm, &tiny_image(), 3, 3).is_err());
    }

    #[test]
    fn arxiv_filter_verdicts() {
        let record = ArxivFigureRecord {
            image: tiny_image(),
            caption: "Figure 2: accuracy by epoch".into(),
            context: "we plot accuracy".into(),
            field_tag: "cs.LG".into(),
        };
        let llm = llm_with(vec![ScriptedReply::text("chart")]);
        assert!(filter_arxiv_record(&llm, &record).unwrap());

        let llm = llm_with(vec![ScriptedReply::text("diagram")]);
        assert!(!filter_arxiv_record(&llm, &record).unwrap());

        // Invariant-violating record never reaches the judge.
        let empty = ArxivFigureRecord {
            image: tiny_image(),
            caption: String::new(),
            context: String::new(),
            field_tag: "cs".into(),
        };
        let llm = llm_with(vec![]);
        assert!(!filter_arxiv_record(&llm, &empty).unwrap());
    }
}
