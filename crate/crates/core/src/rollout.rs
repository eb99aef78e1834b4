//! The interaction loop: context assembly, policy calls, turn parsing, tool
//! execution, observation feedback, and G-trajectory group sampling.
//!
//! Each loop iteration appends exactly one assistant turn and at most one
//! observation message to the context. A compliant tool call executes and
//! its observation comes back as a user message (crops as image parts); a
//! final answer terminates the episode; a malformed turn costs one parse
//! failure and injects a fixed corrective notice instead of aborting, so
//! imperfect policies still produce scoreable trajectories.

use crate::clients::{ChatMessage, ClientError, Part, PolicyClient, SamplingParams};
use crate::model::{ChartImage, GroupSample, Observation, Step, TerminatedBy, Trajectory};
use crate::parser::parse_turn;
use crate::sandbox::Sandbox;
use crate::tools::{run_tool, ToolConfig};
use serde::{Deserialize, Serialize};
use std::sync::Mutex;

/// Version tag for the shipped system prompt, recorded in run manifests so
/// results stay attributable.
pub const SYSTEM_PROMPT_VERSION: &str = "chart-tir-v1";

/// The system prompt documenting both tools and the turn grammar.
pub const SYSTEM_PROMPT: &str = "\
You are a chart analysis assistant. You are given a chart image and a question \
about it. Work step by step, using tools to ground your reasoning in the chart.

Every reply must follow this format exactly: first a <think>...</think> block \
with your reasoning, then exactly ONE of:
  <tool_call>{\"name\": \"crop\", \"arguments\": {\"bbox\": [x0, y0, x1, y1]}}</tool_call>
  <tool_call>{\"name\": \"code\", \"arguments\": {\"source\": \"...\"}}</tool_call>
  <answer>final answer</answer>

Tools:
- crop: returns the image region [x0, y0) x [x1, y1) in pixels, origin at the \
top-left corner, so you can inspect fine detail. Coordinates are integers.
- code: runs Python source in a sandbox and returns its stdout. The chart is \
available read-only as chart.png in the working directory. Print what you need.

The tool_call payload must be a single line of JSON. When you know the final \
answer, reply with the <answer> block: keep it short, just the answer itself.";

/// Corrective notice fed back after a malformed turn.
pub const FORMAT_ERROR_NOTICE: &str = "format error: expected one tool_call or answer";

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    /// The policy endpoint failed after retries. The partial trajectory is
    /// attached for diagnostics (terminated_by is TurnLimit, answer absent).
    #[error("policy endpoint failure: {source}")]
    PolicyFailure {
        source: ClientError,
        partial: Box<(Trajectory, Vec<String>)>,
    },
    /// More than the tolerated fraction of a group's rollouts failed.
    #[error("{failed} of {total} group rollouts hit policy failures (threshold {threshold})")]
    GroupFailure { failed: usize, total: usize, threshold: f64 },
}

/// Rollout budgets and sampling controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_assistant_turns: u32,
    pub max_parse_failures: u32,
    /// Group size G for group sampling.
    pub group_size: u32,
    pub sampling: SamplingParams,
    pub tool_cfg: ToolConfig,
    /// A group fails wholesale when the failed fraction exceeds this.
    pub group_failure_threshold: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_assistant_turns: 4,
            max_parse_failures: 2,
            group_size: 8,
            sampling: SamplingParams::default(),
            tool_cfg: ToolConfig::default(),
            group_failure_threshold: 0.5,
        }
    }
}

/// A finished rollout: the trajectory plus the verbatim assistant turns that
/// produced it (format scoring needs them).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutcome {
    pub trajectory: Trajectory,
    pub raw_turns: Vec<String>,
}

/// A sampled group: the [`GroupSample`] (rewards/advantages unset), raw
/// turns per member, and per-member failure diagnostics for members that
/// hit policy failures under the group threshold.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub sample: GroupSample,
    pub raw_turns: Vec<Vec<String>>,
    pub failures: Vec<Option<String>>,
}

/// Drives one episode to termination.
pub fn run_trajectory(
    policy: &PolicyClient,
    image: &ChartImage,
    question: &str,
    cfg: &RolloutConfig,
    sandbox: &Sandbox,
) -> Result<RolloutOutcome, RolloutError> {
    let mut messages = vec![
        ChatMessage::system(SYSTEM_PROMPT),
        ChatMessage::user_parts(vec![
            Part::Image(image.clone()),
            Part::Text(question.to_string()),
        ]),
    ];
    let mut steps: Vec<Step> = Vec::new();
    let mut raw_turns: Vec<String> = Vec::new();
    let mut parse_failures = 0u32;
    let mut final_reasoning = String::new();
    let mut answer = None;
    let mut terminated_by = TerminatedBy::TurnLimit;

    for _ in 0..cfg.max_assistant_turns {
        let reply = match policy.complete(&messages, &cfg.sampling) {
            Ok(r) => r,
            Err(source) => {
                let partial = Trajectory {
                    image: image.make_ref(),
                    question: question.to_string(),
                    steps,
                    final_reasoning,
                    answer: None,
                    terminated_by: TerminatedBy::TurnLimit,
                };
                return Err(RolloutError::PolicyFailure {
                    source,
                    partial: Box::new((partial, raw_turns)),
                });
            }
        };
        raw_turns.push(reply.text.clone());
        messages.push(ChatMessage::assistant(reply.text.clone()));

        let parsed = parse_turn(&reply.text);
        if !parsed.is_compliant() {
            parse_failures += 1;
            if parse_failures >= cfg.max_parse_failures {
                terminated_by = TerminatedBy::ParseFailureLimit;
                break;
            }
            messages.push(ChatMessage::user_text(FORMAT_ERROR_NOTICE));
            continue;
        }

        if let Some(text) = parsed.final_answer {
            final_reasoning = parsed.reasoning;
            answer = Some(text);
            terminated_by = TerminatedBy::Answer;
            break;
        }

        let action = parsed.tool_call.expect("compliant turn has tool or answer");
        let outcome = run_tool(image, &action, &cfg.tool_cfg, sandbox);
        messages.push(observation_message(&outcome.observation, outcome.image.as_ref()));
        steps.push(Step {
            reasoning: parsed.reasoning,
            action,
            observation: outcome.observation,
        });
    }

    let trajectory = Trajectory {
        image: image.make_ref(),
        question: question.to_string(),
        steps,
        final_reasoning,
        answer,
        terminated_by,
    };
    debug_assert!(trajectory.validate().is_ok());
    Ok(RolloutOutcome { trajectory, raw_turns })
}

/// Renders an observation as the next user message. Crops go back as image
/// parts; text and errors as plain text.
fn observation_message(observation: &Observation, image: Option<&ChartImage>) -> ChatMessage {
    match observation {
        Observation::Text { content, truncated } => {
            let text = if *truncated {
                format!("{content}\n[output truncated]")
            } else {
                content.clone()
            };
            ChatMessage::user_text(text)
        }
        Observation::Image { image: image_ref } => match image {
            Some(img) => ChatMessage::user_parts(vec![Part::Image(img.clone())]),
            // Pixels unavailable (e.g. replaying a store): fall back to a
            // textual description of the crop.
            None => ChatMessage::user_text(format!(
                "[cropped region {}x{} from {}]",
                image_ref.width, image_ref.height, image_ref.source_id
            )),
        },
        Observation::ToolError { error_kind, message } => {
            ChatMessage::user_text(format!("tool error ({error_kind}): {message}"))
        }
    }
}

/// Samples G independent trajectories with identical prompts and sampling,
/// concurrently. Members that hit policy failures keep their partial
/// trajectory and a diagnostic note; the group fails wholesale only past
/// the configured failure fraction.
pub fn run_group(
    policy: &PolicyClient,
    image: &ChartImage,
    question: &str,
    cfg: &RolloutConfig,
    sandbox: &Sandbox,
) -> Result<GroupRollout, RolloutError> {
    let g = cfg.group_size as usize;
    let results: Mutex<Vec<Option<Result<RolloutOutcome, RolloutError>>>> =
        Mutex::new((0..g).map(|_| None).collect());
    std::thread::scope(|scope| {
        for i in 0..g {
            let results = &results;
            scope.spawn(move || {
                let outcome = run_trajectory(policy, image, question, cfg, sandbox);
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    let mut trajectories = Vec::with_capacity(g);
    let mut raw_turns = Vec::with_capacity(g);
    let mut failures = Vec::with_capacity(g);
    let mut failed = 0usize;
    for slot in results.into_inner().unwrap() {
        match slot.expect("every member filled") {
            Ok(outcome) => {
                trajectories.push(outcome.trajectory);
                raw_turns.push(outcome.raw_turns);
                failures.push(None);
            }
            Err(RolloutError::PolicyFailure { source, partial }) => {
                failed += 1;
                let (trajectory, turns) = *partial;
                trajectories.push(trajectory);
                raw_turns.push(turns);
                failures.push(Some(source.to_string()));
            }
            Err(other) => return Err(other),
        }
    }
    if failed as f64 > cfg.group_failure_threshold * g as f64 {
        return Err(RolloutError::GroupFailure {
            failed,
            total: g,
            threshold: cfg.group_failure_threshold,
        });
    }
    Ok(GroupRollout {
        sample: GroupSample::new(trajectories),
        raw_turns,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{
        ChatRequest, ChatResponse, ChatTransport, ModelClient, Role, ScriptedReply,
        ScriptedTransport, TurnScriptTransport,
    };
    use crate::model::ToolAction;
    use crate::sandbox::LocalSandbox;
    use std::sync::Arc;

    fn image() -> ChartImage {
        ChartImage::from_fn("chart-1", 64, 64, |x, y| [x as u8, y as u8, 0]).unwrap()
    }

    fn sandbox() -> Sandbox {
        Sandbox::local(LocalSandbox::default(), 2)
    }

    fn policy_from(transport: impl ChatTransport + 'static) -> PolicyClient {
        PolicyClient::new(ModelClient::new(Arc::new(transport), "stub"))
    }

    const CROP_TURN: &str = "<think>zoom in</think><tool_call>{\"name\":\"crop\",\"arguments\":{\"bbox\":[0,0,32,32]}}</tool_call>";
    const ANSWER_TURN: &str = "<think>that is enough</think><answer>42</answer>";

    #[test]
    fn scripted_crop_then_answer() {
        let policy = policy_from(TurnScriptTransport::new(vec![
            ScriptedReply::text(CROP_TURN),
            ScriptedReply::text(ANSWER_TURN),
        ]));
        let outcome =
            run_trajectory(&policy, &image(), "peak?", &RolloutConfig::default(), &sandbox())
                .unwrap();
        let t = &outcome.trajectory;
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.answer.as_deref(), Some("42"));
        assert_eq!(t.terminated_by, TerminatedBy::Answer);
        assert_eq!(t.final_reasoning, "that is enough");
        assert!(matches!(t.steps[0].action, ToolAction::Crop { .. }));
        assert!(matches!(t.steps[0].observation, Observation::Image { .. }));
        assert_eq!(outcome.raw_turns, vec![CROP_TURN.to_string(), ANSWER_TURN.to_string()]);
    }

    #[test]
    fn malformed_forever_hits_parse_failure_limit() {
        let policy = policy_from(
            TurnScriptTransport::new(vec![ScriptedReply::text("no tags here")]).repeating_last(),
        );
        let cfg = RolloutConfig { max_parse_failures: 2, ..RolloutConfig::default() };
        let outcome = run_trajectory(&policy, &image(), "q", &cfg, &sandbox()).unwrap();
        assert_eq!(outcome.trajectory.terminated_by, TerminatedBy::ParseFailureLimit);
        assert_eq!(outcome.trajectory.answer, None);
        assert_eq!(outcome.raw_turns.len(), 2);
    }

    #[test]
    fn tool_calls_forever_hit_turn_limit_exactly() {
        let policy = policy_from(
            TurnScriptTransport::new(vec![ScriptedReply::text(CROP_TURN)]).repeating_last(),
        );
        let cfg = RolloutConfig { max_assistant_turns: 4, ..RolloutConfig::default() };
        let outcome = run_trajectory(&policy, &image(), "q", &cfg, &sandbox()).unwrap();
        assert_eq!(outcome.raw_turns.len(), 4);
        assert_eq!(outcome.trajectory.steps.len(), 4);
        assert_eq!(outcome.trajectory.terminated_by, TerminatedBy::TurnLimit);
        assert_eq!(outcome.trajectory.answer, None);
    }

    #[test]
    fn policy_failure_returns_partial() {
        let policy = PolicyClient::new(
            ModelClient::new(Arc::new(ScriptedTransport::failing()), "stub")
                .with_retry(crate::clients::RetryConfig { max_retries: 0, backoff_ms: 0 }),
        );
        let err =
            run_trajectory(&policy, &image(), "q", &RolloutConfig::default(), &sandbox())
                .unwrap_err();
        match err {
            RolloutError::PolicyFailure { partial, .. } => {
                assert!(partial.0.steps.is_empty());
                assert!(partial.1.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Transport that records message-list lengths to check context
    /// monotonicity.
    struct LengthLogger {
        inner: TurnScriptTransport,
        lengths: Mutex<Vec<usize>>,
    }

    impl ChatTransport for LengthLogger {
        fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, crate::clients::ClientError> {
            self.lengths.lock().unwrap().push(request.messages.len());
            self.inner.complete(request)
        }
    }

    #[test]
    fn context_grows_by_turn_plus_observation() {
        let logger = Arc::new(LengthLogger {
            inner: TurnScriptTransport::new(vec![
                ScriptedReply::text(CROP_TURN),
                ScriptedReply::text(CROP_TURN),
                ScriptedReply::text(ANSWER_TURN),
            ]),
            lengths: Mutex::new(Vec::new()),
        });
        let policy = PolicyClient::new(ModelClient::new(logger.clone(), "stub"));
        run_trajectory(&policy, &image(), "q", &RolloutConfig::default(), &sandbox()).unwrap();
        // system+user = 2; each round adds assistant + observation.
        assert_eq!(*logger.lengths.lock().unwrap(), vec![2, 4, 6]);
    }

    #[test]
    fn raw_turn_fidelity_via_render() {
        let policy = policy_from(TurnScriptTransport::new(vec![
            ScriptedReply::text(CROP_TURN),
            ScriptedReply::text(ANSWER_TURN),
        ]));
        let outcome =
            run_trajectory(&policy, &image(), "q", &RolloutConfig::default(), &sandbox()).unwrap();
        for raw in &outcome.raw_turns {
            let parsed = parse_turn(raw);
            let rendered = crate::parser::render_turn(&parsed).unwrap();
            assert_eq!(parse_turn(&rendered), parsed);
        }
    }

    #[test]
    fn deterministic_stub_group_is_identical() {
        let policy = policy_from(TurnScriptTransport::new(vec![
            ScriptedReply::text(CROP_TURN),
            ScriptedReply::text(ANSWER_TURN),
        ]));
        let cfg = RolloutConfig { group_size: 8, ..RolloutConfig::default() };
        let group = run_group(&policy, &image(), "q", &cfg, &sandbox()).unwrap();
        assert_eq!(group.sample.group_size(), 8);
        assert!(group.sample.rewards.is_empty());
        for t in &group.sample.trajectories[1..] {
            assert_eq!(t, &group.sample.trajectories[0]);
        }
        assert!(group.failures.iter().all(Option::is_none));
    }

    /// Transport whose answer depends on a per-call counter, to produce
    /// distinct group members.
    struct CountingTransport {
        calls: Mutex<usize>,
    }

    impl ChatTransport for CountingTransport {
        fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, crate::clients::ClientError> {
            let assistant_turns = request
                .messages
                .iter()
                .filter(|m| m.role == Role::Assistant)
                .count();
            if assistant_turns > 0 {
                return Err(crate::clients::ClientError::MalformedReply("one turn only".into()));
            }
            let mut calls = self.calls.lock().unwrap();
            *calls += 1;
            Ok(ChatResponse {
                text: format!("<think>v</think><answer>{}</answer>", *calls),
                token_logprobs: None,
            })
        }
    }

    #[test]
    fn varying_stub_group_members_distinct_and_aligned() {
        let policy = policy_from(CountingTransport { calls: Mutex::new(0) });
        let cfg = RolloutConfig { group_size: 4, ..RolloutConfig::default() };
        let group = run_group(&policy, &image(), "q", &cfg, &sandbox()).unwrap();
        let mut answers: Vec<String> = group
            .sample
            .trajectories
            .iter()
            .map(|t| t.answer.clone().unwrap())
            .collect();
        assert_eq!(group.raw_turns.len(), 4);
        for (t, raw) in group.sample.trajectories.iter().zip(&group.raw_turns) {
            assert!(raw[0].contains(t.answer.as_deref().unwrap()));
        }
        answers.sort();
        answers.dedup();
        assert_eq!(answers.len(), 4);
    }

    /// Fails the first call, then answers.
    struct FlakyTransport {
        failed_once: Mutex<bool>,
    }

    impl ChatTransport for FlakyTransport {
        fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, crate::clients::ClientError> {
            let mut failed = self.failed_once.lock().unwrap();
            if !*failed {
                *failed = true;
                return Err(crate::clients::ClientError::MalformedReply("scripted break".into()));
            }
            Ok(ChatResponse { text: ANSWER_TURN.into(), token_logprobs: None })
        }
    }

    #[test]
    fn group_tolerates_failures_under_threshold() {
        let policy = policy_from(FlakyTransport { failed_once: Mutex::new(false) });
        let cfg = RolloutConfig { group_size: 2, ..RolloutConfig::default() };
        let group = run_group(&policy, &image(), "q", &cfg, &sandbox()).unwrap();
        assert_eq!(group.sample.group_size(), 2);
        assert_eq!(group.failures.iter().flatten().count(), 1);
    }

    #[test]
    fn group_fails_past_threshold() {
        let policy = PolicyClient::new(
            ModelClient::new(Arc::new(ScriptedTransport::failing()), "stub")
                .with_retry(crate::clients::RetryConfig { max_retries: 0, backoff_ms: 0 }),
        );
        let cfg = RolloutConfig { group_size: 2, ..RolloutConfig::default() };
        assert!(matches!(
            run_group(&policy, &image(), "q", &cfg, &sandbox()),
            Err(RolloutError::GroupFailure { failed: 2, total: 2, .. })
        ));
    }
}
