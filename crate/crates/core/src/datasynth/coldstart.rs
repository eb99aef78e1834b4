//! Cold-start trajectory distillation: run a teacher policy over QA items,
//! keep only rollouts with clean tool executions and correct final answers,
//! and emit SFT-format records in the same turn grammar the parser owns.

use super::SynthError;
use crate::clients::{PolicyClient, Role};
use crate::model::{AssetStore, Observation, QAItem};
use crate::parser::parse_turn;
use crate::reward::{accuracy_reward, MatchPolicy};
use crate::rollout::{run_trajectory, RolloutConfig, RolloutError, SYSTEM_PROMPT};
use crate::sandbox::Sandbox;
use serde::{Deserialize, Serialize};

/// Content part of a stored SFT message; images stay referenced by source
/// id, never inlined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SftPart {
    Text { text: String },
    Image { source_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMessage {
    pub role: Role,
    pub content: Vec<SftPart>,
}

/// One cold-start demonstration: the full message flow plus the assistant
/// turns as explicit training targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<SftMessage>,
    pub target_turns: Vec<String>,
    pub source_id: String,
    pub question: String,
    pub answer: String,
}

/// Distillation tally: every item attempted, with the reason discarded ones
/// fell out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColdStartOutcome {
    pub records: Vec<SftRecord>,
    pub attempted: usize,
    pub discarded_tool_error: usize,
    pub discarded_wrong_answer: usize,
    pub discarded_non_compliant: usize,
    pub discarded_policy_failure: usize,
}

/// Runs the teacher over each item and retains only trajectories whose tool
/// executions all succeeded and whose final answer scores 1. Rollouts with
/// parse failures are discarded too: demonstrations must be format-clean
/// since they teach the format.
#[allow(clippy::too_many_arguments)]
pub fn distill_cold_start(
    teacher: &PolicyClient,
    items: &[QAItem],
    assets: &AssetStore,
    cfg: &RolloutConfig,
    sandbox: &Sandbox,
    match_policy: &MatchPolicy,
    judge: Option<&crate::clients::JudgeClient>,
) -> Result<ColdStartOutcome, SynthError> {
    let mut outcome = ColdStartOutcome { attempted: items.len(), ..Default::default() };
    for item in items {
        let image = assets.load(&item.image_ref)?;
        let rollout = match run_trajectory(teacher, &image, &item.question, cfg, sandbox) {
            Ok(r) => r,
            Err(RolloutError::PolicyFailure { .. }) => {
                outcome.discarded_policy_failure += 1;
                continue;
            }
            Err(other) => {
                return Err(SynthError::RecordInvalid(format!("rollout failed: {other}")))
            }
        };
        let t = &rollout.trajectory;

        if t.steps.iter().any(|s| s.observation.is_error()) {
            outcome.discarded_tool_error += 1;
            continue;
        }
        let compliant = t.answer.is_some()
            && rollout.raw_turns.len() == t.steps.len() + 1
            && rollout.raw_turns.iter().all(|turn| parse_turn(turn).is_compliant());
        if !compliant {
            outcome.discarded_non_compliant += 1;
            continue;
        }
        let acc = accuracy_reward(
            t.answer.as_deref(),
            &item.answer,
            item.answer_type,
            match_policy,
            judge,
        )
        .map_err(|e| SynthError::RecordInvalid(e.to_string()))?;
        if acc < 1.0 {
            outcome.discarded_wrong_answer += 1;
            continue;
        }

        let mut messages = vec![
            SftMessage {
                role: Role::System,
                content: vec![SftPart::Text { text: SYSTEM_PROMPT.to_string() }],
            },
            SftMessage {
                role: Role::User,
                content: vec![
                    SftPart::Image { source_id: item.image_ref.clone() },
                    SftPart::Text { text: item.question.clone() },
                ],
            },
        ];
        for (step, raw_turn) in t.steps.iter().zip(&rollout.raw_turns) {
            messages.push(SftMessage {
                role: Role::Assistant,
                content: vec![SftPart::Text { text: raw_turn.clone() }],
            });
            messages.push(SftMessage {
                role: Role::User,
                content: vec![observation_part(&step.observation)],
            });
        }
        messages.push(SftMessage {
            role: Role::Assistant,
            content: vec![SftPart::Text {
                text: rollout.raw_turns.last().expect("answered rollout has turns").clone(),
            }],
        });

        outcome.records.push(SftRecord {
            messages,
            target_turns: rollout.raw_turns.clone(),
            source_id: item.image_ref.clone(),
            question: item.question.clone(),
            answer: t.answer.clone().expect("compliant rollout answered"),
        });
    }
    Ok(outcome)
}

fn observation_part(observation: &Observation) -> SftPart {
    match observation {
        Observation::Text { content, truncated } => SftPart::Text {
            text: if *truncated {
                format!("{content}\n[output truncated]")
            } else {
                content.clone()
            },
        },
        Observation::Image { image } => SftPart::Image { source_id: image.source_id.clone() },
        Observation::ToolError { error_kind, message } => SftPart::Text {
            text: format!("tool error ({error_kind}): {message}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{ModelClient, ScriptedReply, TurnScriptTransport};
    use crate::model::{AnswerType, ChartImage, Provenance, QuestionType};
    use crate::sandbox::LocalSandbox;
    use std::sync::Arc;

    fn setup() -> (tempfile::TempDir, AssetStore, QAItem) {
        let dir = tempfile::tempdir().unwrap();
        let assets = AssetStore::new(dir.path());
        let image = ChartImage::from_fn("c1", 32, 32, |x, _| [x as u8, 0, 0]).unwrap();
        assets.save(&image).unwrap();
        let item = QAItem {
            image_ref: "c1".into(),
            question: "what is 5*5?".into(),
            answer: "25".into(),
            qtype: QuestionType::Reasoning,
            aspect: "Aggregation & Calculation".into(),
            answer_type: AnswerType::Numeric,
            difficulty: 3,
            provenance: Provenance::Synth,
        };
        (dir, assets, item)
    }

    fn teacher(turns: Vec<&str>) -> PolicyClient {
        let replies = turns.into_iter().map(ScriptedReply::text).collect();
        PolicyClient::new(ModelClient::new(
            Arc::new(TurnScriptTransport::new(replies)),
            "teacher",
        ))
    }

    const CODE_TURN: &str = "<think>compute</think><tool_call>{\"name\":\"code\",\"arguments\":{\"source\":\"print(5*5)\"}}</tool_call>";
    const GOOD_ANSWER: &str = "<think>done</think><answer>25</answer>";
    const WRONG_ANSWER: &str = "<think>done</think><answer>99</answer>";
    const BAD_CODE_TURN: &str = "<think>oops</think><tool_call>{\"name\":\"code\",\"arguments\":{\"source\":\"raise ValueError()\"}}</tool_call>";

    fn run(teacher: &PolicyClient) -> ColdStartOutcome {
        let (_dir, assets, item) = setup();
        let sandbox = Sandbox::local(LocalSandbox::default(), 2);
        distill_cold_start(
            teacher,
            &[item],
            &assets,
            &RolloutConfig::default(),
            &sandbox,
            &MatchPolicy::default(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn clean_and_correct_is_retained() {
        let outcome = run(&teacher(vec![CODE_TURN, GOOD_ANSWER]));
        assert_eq!(outcome.records.len(), 1);
        let record = &outcome.records[0];
        assert_eq!(record.answer, "25");
        assert_eq!(record.target_turns.len(), 2);
        // system, user, assistant, observation, assistant.
        assert_eq!(record.messages.len(), 5);
        assert_eq!(record.messages[0].role, Role::System);
        assert!(matches!(
            record.messages[1].content[0],
            SftPart::Image { ref source_id } if source_id == "c1"
        ));
        assert!(matches!(record.messages[3].content[0], SftPart::Text { ref text } if text == "25\n"));
    }

    #[test]
    fn tool_error_discards_despite_correct_answer() {
        let outcome = run(&teacher(vec![BAD_CODE_TURN, GOOD_ANSWER]));
        assert!(outcome.records.is_empty());
        assert_eq!(outcome.discarded_tool_error, 1);
    }

    #[test]
    fn wrong_answer_discards_despite_clean_tools() {
        let outcome = run(&teacher(vec![CODE_TURN, WRONG_ANSWER]));
        assert!(outcome.records.is_empty());
        assert_eq!(outcome.discarded_wrong_answer, 1);
    }

    #[test]
    fn unanswered_rollout_discarded_as_non_compliant() {
        let outcome = run(&teacher(vec!["garbage turn", "more garbage"]));
        assert!(outcome.records.is_empty());
        assert_eq!(outcome.discarded_non_compliant, 1);
    }
}
