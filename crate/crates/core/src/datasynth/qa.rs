//! QA generation conditioned on analytical aspects, and the four-stage
//! quality check: image alignment, reasoning verification, majority voting,
//! and difficulty scoring.

use super::{CheckReport, SynthError};
use crate::clients::{ChatMessage, LlmClient, Part, SamplingParams};
use crate::model::{AnswerType, AspectPools, ChartImage, Provenance, QAItem, QuestionType};
use serde::Deserialize;
use std::collections::HashMap;

fn yes_no(raw: &str) -> Result<bool, SynthError> {
    let word: String = raw
        .trim()
        .to_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphabetic())
        .collect();
    match word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(SynthError::UnparseableVerdict(raw.to_string())),
    }
}

#[derive(Deserialize)]
struct QaCandidate {
    question: String,
    answer: String,
    #[serde(default)]
    answer_type: Option<AnswerType>,
    #[serde(default)]
    difficulty: Option<u8>,
}

/// Asks the QA agent for question-answer pairs about `image`, conditioned on
/// one analytical aspect of one question type. The aspect must belong to the
/// configured pool for that type.
pub fn generate_qa(
    llm: &LlmClient,
    image: &ChartImage,
    context: &str,
    aspect: &str,
    qtype: QuestionType,
    pools: &AspectPools,
    provenance: Provenance,
) -> Result<Vec<QAItem>, SynthError> {
    if !pools.for_qtype(qtype).iter().any(|a| a == aspect) {
        return Err(SynthError::AspectNotInPool {
            aspect: aspect.to_string(),
            qtype: qtype.to_string(),
        });
    }
    let kind_line = match qtype {
        QuestionType::Recognition => {
            "recognition questions: element identification and structural extraction"
        }
        QuestionType::Reasoning => {
            "reasoning questions: multi-step visual analysis and numerical reasoning"
        }
    };
    let messages = vec![
        ChatMessage::system(format!(
            "You are a QA agent writing {kind_line}. Every question must be answerable \
             from the chart alone, with a short unambiguous answer. Reply with one JSON \
             object per line: {{\"question\": ..., \"answer\": ..., \"answer_type\": \
             \"text\"|\"numeric\"|\"binary\"|\"list_range\", \"difficulty\": 1-5}}"
        )),
        ChatMessage::user_parts(vec![
            Part::Image(image.clone()),
            Part::Text(format!(
                "Chart context:\n{context}\n\nWrite 1-3 {qtype} questions focused on the \
                 aspect: {aspect}."
            )),
        ]),
    ];
    let sampling = SamplingParams { temperature: 0.8, max_tokens: 1024, want_logprobs: false };
    let raw = llm.complete(&messages, &sampling)?;

    let mut items = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let candidate: QaCandidate = serde_json::from_str(line.trim())
            .map_err(|e| SynthError::GenerationUnparseable(format!("{e}: {line:?}")))?;
        if candidate.answer.trim().is_empty() {
            return Err(SynthError::GenerationUnparseable(format!(
                "empty answer in {line:?}"
            )));
        }
        items.push(QAItem {
            image_ref: image.source_id().to_string(),
            question: candidate.question,
            answer: candidate.answer,
            qtype,
            aspect: aspect.to_string(),
            answer_type: candidate.answer_type.unwrap_or(AnswerType::Text),
            difficulty: candidate.difficulty.unwrap_or(3).clamp(1, 5),
            provenance,
        });
    }
    if items.is_empty() {
        return Err(SynthError::GenerationUnparseable("no QA lines in reply".into()));
    }
    Ok(items)
}

fn normalize_vote(text: &str) -> String {
    text.trim()
        .to_lowercase()
        .trim_end_matches(['.', '!'])
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Runs the four checks against one candidate item and applies the keep
/// rule: alignment and reasoning verified, vote agreement at or above the
/// threshold, and (for reasoning items) difficulty at or above its
/// threshold.
pub fn check_qa(
    llm: &LlmClient,
    item: &QAItem,
    image: &ChartImage,
    votes_n: usize,
    vote_threshold: f64,
    difficulty_threshold: u8,
) -> Result<CheckReport, SynthError> {
    let deterministic = SamplingParams { temperature: 0.0, max_tokens: 64, want_logprobs: false };

    // Stage 1: the question must be answerable from the image alone.
    let alignment_raw = llm.complete(
        &[
            ChatMessage::system(
                "Does answering this question require only what is visible in the chart \
                 image (no outside knowledge, no unsupported claims)? Reply exactly yes or no.",
            ),
            ChatMessage::user_parts(vec![
                Part::Image(image.clone()),
                Part::Text(format!("Question: {}", item.question)),
            ]),
        ],
        &deterministic,
    )?;
    let alignment_ok = yes_no(&alignment_raw)?;

    // Stage 2: the recorded answer must be consistent with the chart.
    let reasoning_raw = llm.complete(
        &[
            ChatMessage::system(
                "Verify the answer against the chart: is it correct and consistent with \
                 the chart evidence? Reply exactly yes or no.",
            ),
            ChatMessage::user_parts(vec![
                Part::Image(image.clone()),
                Part::Text(format!(
                    "Question: {}\nProposed answer: {}",
                    item.question, item.answer
                )),
            ]),
        ],
        &deterministic,
    )?;
    let reasoning_ok = yes_no(&reasoning_raw)?;

    // Stage 3: majority voting over independent answer samples.
    let vote_sampling = SamplingParams { temperature: 1.0, max_tokens: 64, want_logprobs: false };
    let mut votes = Vec::with_capacity(votes_n);
    for _ in 0..votes_n {
        let vote = llm.complete(
            &[
                ChatMessage::system("Answer the chart question concisely: just the answer."),
                ChatMessage::user_parts(vec![
                    Part::Image(image.clone()),
                    Part::Text(item.question.clone()),
                ]),
            ],
            &vote_sampling,
        )?;
        votes.push(vote.trim().to_string());
    }
    let mut tally: HashMap<String, usize> = HashMap::new();
    for vote in &votes {
        *tally.entry(normalize_vote(vote)).or_default() += 1;
    }
    let modal = tally.values().copied().max().unwrap_or(0);
    let agreement = if votes.is_empty() { 0.0 } else { modal as f64 / votes.len() as f64 };

    // Stage 4: difficulty scoring.
    let difficulty_raw = llm.complete(
        &[
            ChatMessage::system(
                "Rate how much visual and numerical reasoning this chart question needs, \
                 on a 1-5 scale (1 = read a single label, 5 = multi-step computation \
                 across subplots). Reply with the integer only.",
            ),
            ChatMessage::user_parts(vec![
                Part::Image(image.clone()),
                Part::Text(item.question.clone()),
            ]),
        ],
        &deterministic,
    )?;
    let difficulty: u8 = difficulty_raw
        .trim()
        .parse()
        .ok()
        .filter(|d| (1..=5).contains(d))
        .ok_or_else(|| SynthError::UnparseableVerdict(difficulty_raw.clone()))?;

    let difficulty_passes = match item.qtype {
        QuestionType::Reasoning => difficulty >= difficulty_threshold,
        QuestionType::Recognition => true,
    };
    let kept = alignment_ok && reasoning_ok && agreement >= vote_threshold && difficulty_passes;
    Ok(CheckReport { alignment_ok, reasoning_ok, votes, agreement, difficulty, kept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{ModelClient, ScriptedReply, ScriptedTransport};
    use std::sync::Arc;

    fn llm_with(replies: Vec<ScriptedReply>) -> LlmClient {
        LlmClient::new(ModelClient::new(Arc::new(ScriptedTransport::new(replies)), "check"))
    }

    fn image() -> ChartImage {
        ChartImage::from_fn("chart-9", 4, 4, |_, _| [200, 10, 10]).unwrap()
    }

    fn item(qtype: QuestionType, aspect: &str) -> QAItem {
        QAItem {
            image_ref: "chart-9".into(),
            question: "how many bars are shown?".into(),
            answer: "4".into(),
            qtype,
            aspect: aspect.into(),
            answer_type: AnswerType::Numeric,
            difficulty: 3,
            provenance: Provenance::Synth,
        }
    }

    #[test]
    fn generate_tags_items() {
        let reply = "{\"question\":\"How many bars?\",\"answer\":\"4\",\"answer_type\":\"numeric\",\"difficulty\":2}\n\
                     {\"question\":\"How many series?\",\"answer\":\"2\",\"answer_type\":\"numeric\",\"difficulty\":2}";
        let llm = llm_with(vec![ScriptedReply::text(reply)]);
        let items = generate_qa(
            &llm,
            &image(),
            "bar chart of sales",
            "Counting",
            QuestionType::Recognition,
            &AspectPools::default(),
            Provenance::Synth,
        )
        .unwrap();
        assert_eq!(items.len(), 2);
        for item in &items {
            assert_eq!(item.qtype, QuestionType::Recognition);
            assert_eq!(item.aspect, "Counting");
            assert_eq!(item.image_ref, "chart-9");
            item.validate(&AspectPools::default()).unwrap();
        }
    }

    #[test]
    fn aspect_outside_pool_rejected() {
        let llm = llm_with(vec![]);
        assert!(matches!(
            generate_qa(
                &llm,
                &image(),
                "ctx",
                "Numerology",
                QuestionType::Recognition,
                &AspectPools::default(),
                Provenance::Synth,
            ),
            Err(SynthError::AspectNotInPool { .. })
        ));
    }

    #[test]
    fn missing_answer_unparseable() {
        let llm = llm_with(vec![ScriptedReply::text("{\"question\":\"?\",\"answer\":\"  \"}")]);
        assert!(matches!(
            generate_qa(
                &llm,
                &image(),
                "ctx",
                "Counting",
                QuestionType::Recognition,
                &AspectPools::default(),
                Provenance::Synth,
            ),
            Err(SynthError::GenerationUnparseable(_))
        ));
    }

    fn check_replies(
        alignment: &str,
        reasoning: &str,
        votes: &[&str],
        difficulty: &str,
    ) -> Vec<ScriptedReply> {
        let mut replies = vec![ScriptedReply::text(alignment), ScriptedReply::text(reasoning)];
        replies.extend(votes.iter().map(|v| ScriptedReply::text(*v)));
        replies.push(ScriptedReply::text(difficulty));
        replies
    }

    #[test]
    fn all_stages_pass_keeps_item() {
        let llm = llm_with(check_replies("yes", "yes", &["4", "4", "4", "4", "4"], "4"));
        let report = check_qa(&llm, &item(QuestionType::Reasoning, "Counting"), &image(), 5, 0.8, 3).unwrap();
        assert!(report.kept);
        assert_eq!(report.agreement, 1.0);
        assert_eq!(report.difficulty, 4);
    }

    #[test]
    fn low_agreement_discards() {
        let llm = llm_with(check_replies("yes", "yes", &["4", "5", "6", "4", "7"], "4"));
        let report = check_qa(&llm, &item(QuestionType::Reasoning, "Counting"), &image(), 5, 0.8, 3).unwrap();
        assert!(!report.kept);
        assert!((report.agreement - 0.4).abs() < 1e-12);
    }

    #[test]
    fn easy_reasoning_item_discarded_but_recognition_kept() {
        let llm = llm_with(check_replies("yes", "yes", &["4"; 5], "2"));
        let report = check_qa(&llm, &item(QuestionType::Reasoning, "Counting"), &image(), 5, 0.8, 3).unwrap();
        assert!(!report.kept);

        let llm = llm_with(check_replies("yes", "yes", &["4"; 5], "2"));
        let report =
            check_qa(&llm, &item(QuestionType::Recognition, "Counting"), &image(), 5, 0.8, 3).unwrap();
        assert!(report.kept, "difficulty filter applies to reasoning items only");
    }

    #[test]
    fn failed_alignment_or_reasoning_discards() {
        let llm = llm_with(check_replies("no", "yes", &["4"; 5], "4"));
        assert!(!check_qa(&llm, &item(QuestionType::Reasoning, "Counting"), &image(), 5, 0.8, 3)
            .unwrap()
            .kept);

        let llm = llm_with(check_replies("yes", "no", &["4"; 5], "4"));
        assert!(!check_qa(&llm, &item(QuestionType::Reasoning, "Counting"), &image(), 5, 0.8, 3)
            .unwrap()
            .kept);
    }

    #[test]
    fn votes_normalized_before_tally() {
        let llm = llm_with(check_replies("yes", "yes", &["Four.", "four", " FOUR ", "4", "four"], "4"));
        let report = check_qa(&llm, &item(QuestionType::Reasoning, "Counting"), &image(), 5, 0.8, 3).unwrap();
        assert!((report.agreement - 0.8).abs() < 1e-12);
        assert!(report.kept);
    }
}
