//! Assistant-turn grammar and the structural-compliance predicate.
//!
//! A compliant turn is
//!
//! ```text
//! <think>REASONING</think>
//! <tool_call>{"name": "...", "arguments": {...}}</tool_call>   (exactly one line of JSON)
//! ```
//!
//! or
//!
//! ```text
//! <think>REASONING</think>
//! <answer>FINAL ANSWER</answer>
//! ```
//!
//! with arbitrary whitespace between blocks and nothing else. Tool names and
//! argument schemas:
//!
//! - `crop`  — `{"bbox": [x0, y0, x1, y1]}`, integer pixel coordinates,
//!   origin top-left, end-exclusive, `x0 < x1` and `y0 < y1`
//! - `code`  — `{"source": "..."}`, non-empty program text
//!
//! This grammar is the wire format between the engine and any policy
//! endpoint. Parsing is total: malformed input yields a [`ParsedTurn`] whose
//! `violations` list is non-empty, never a panic.

use crate::model::{BBox, ToolAction, Trajectory};
use serde::{Deserialize, Serialize};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const TOOL_OPEN: &str = "<tool_call>";
const TOOL_CLOSE: &str = "</tool_call>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// Ways a turn can break the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    MissingThinkBlock,
    UnclosedTag,
    MultipleActions,
    UnknownTool,
    BadToolArgs,
    NoActionOrAnswer,
    TrailingGarbage,
}

/// A parsed assistant turn. `tool_call` and `final_answer` are never both
/// set; `violations` is empty exactly when the turn is format-compliant.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTurn {
    pub reasoning: String,
    pub tool_call: Option<ToolAction>,
    pub final_answer: Option<String>,
    pub violations: Vec<ViolationKind>,
}

impl ParsedTurn {
    pub fn is_compliant(&self) -> bool {
        self.violations.is_empty()
    }

    /// Compliant turn ending in a tool call.
    pub fn of_tool(reasoning: impl Into<String>, action: ToolAction) -> Self {
        Self {
            reasoning: reasoning.into(),
            tool_call: Some(action),
            final_answer: None,
            violations: Vec::new(),
        }
    }

    /// Compliant turn ending in a final answer.
    pub fn of_answer(reasoning: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            reasoning: reasoning.into(),
            tool_call: None,
            final_answer: Some(answer.into()),
            violations: Vec::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("turn is not format-compliant and cannot be rendered")]
    NonCompliantTurn,
}

#[derive(Debug, thiserror::Error)]
pub enum FormatCheckError {
    #[error("raw turn count {got} does not match steps + 1 = {expected} for an answered trajectory")]
    ArityMismatch { expected: usize, got: usize },
}

/// JSON payload inside `<tool_call>`.
#[derive(Serialize, Deserialize)]
struct ToolCallWire {
    name: String,
    arguments: serde_json::Value,
}

/// Parses one raw assistant turn. Total over arbitrary input.
pub fn parse_turn(raw: &str) -> ParsedTurn {
    let mut violations = Vec::new();
    let mut reasoning = String::new();

    // Reasoning must open the turn inside a think block.
    let mut rest = raw;
    match raw.trim_start().strip_prefix(THINK_OPEN) {
        Some(after_open) => match after_open.find(THINK_CLOSE) {
            Some(end) => {
                reasoning = after_open[..end].trim().to_string();
                rest = &after_open[end + THINK_CLOSE.len()..];
            }
            None => {
                violations.push(ViolationKind::UnclosedTag);
                return ParsedTurn {
                    reasoning: after_open.trim().to_string(),
                    tool_call: None,
                    final_answer: None,
                    violations,
                };
            }
        },
        None => {
            violations.push(ViolationKind::MissingThinkBlock);
            // Salvage reasoning when a think block appears later in the turn.
            if let Some(open) = raw.find(THINK_OPEN) {
                let after = &raw[open + THINK_OPEN.len()..];
                if let Some(end) = after.find(THINK_CLOSE) {
                    reasoning = after[..end].trim().to_string();
                    rest = &after[end + THINK_CLOSE.len()..];
                }
            }
        }
    }

    let tool_opens = rest.matches(TOOL_OPEN).count();
    let answer_opens = rest.matches(ANSWER_OPEN).count();

    let mut tool_call = None;
    let mut final_answer = None;

    if tool_opens + answer_opens == 0 {
        violations.push(ViolationKind::NoActionOrAnswer);
        if !rest.trim().is_empty() {
            violations.push(ViolationKind::TrailingGarbage);
        }
        return ParsedTurn {
            reasoning,
            tool_call,
            final_answer,
            violations,
        };
    }
    if tool_opens + answer_opens > 1 {
        violations.push(ViolationKind::MultipleActions);
        return ParsedTurn {
            reasoning,
            tool_call,
            final_answer,
            violations,
        };
    }

    // Exactly one action block from here on.
    let (open_tag, close_tag) = if tool_opens == 1 {
        (TOOL_OPEN, TOOL_CLOSE)
    } else {
        (ANSWER_OPEN, ANSWER_CLOSE)
    };
    let open_at = rest.find(open_tag).expect("count checked above");
    if !rest[..open_at].trim().is_empty() {
        violations.push(ViolationKind::TrailingGarbage);
    }
    let after_open = &rest[open_at + open_tag.len()..];
    let Some(close_at) = after_open.find(close_tag) else {
        violations.push(ViolationKind::UnclosedTag);
        return ParsedTurn {
            reasoning,
            tool_call,
            final_answer,
            violations,
        };
    };
    let body = &after_open[..close_at];
    let tail = &after_open[close_at + close_tag.len()..];
    if !tail.trim().is_empty() {
        violations.push(ViolationKind::TrailingGarbage);
    }

    if tool_opens == 1 {
        match parse_tool_payload(body) {
            Ok(action) => tool_call = Some(action),
            Err(v) => violations.push(v),
        }
    } else {
        final_answer = Some(body.trim().to_string());
    }

    // A payload violation leaves the action unset; mutual exclusion holds by
    // construction.
    if !violations.is_empty() {
        tool_call = None;
        final_answer = None;
    }

    ParsedTurn {
        reasoning,
        tool_call,
        final_answer,
        violations,
    }
}

fn parse_tool_payload(body: &str) -> Result<ToolAction, ViolationKind> {
    let line = body.trim();
    if line.contains('\n') {
        return Err(ViolationKind::BadToolArgs);
    }
    let wire: ToolCallWire = serde_json::from_str(line).map_err(|_| ViolationKind::BadToolArgs)?;
    let args = wire
        .arguments
        .as_object()
        .ok_or(ViolationKind::BadToolArgs)?;
    match wire.name.as_str() {
        "crop" => {
            if args.len() != 1 {
                return Err(ViolationKind::BadToolArgs);
            }
            let coords = args
                .get("bbox")
                .and_then(|v| v.as_array())
                .ok_or(ViolationKind::BadToolArgs)?;
            if coords.len() != 4 {
                return Err(ViolationKind::BadToolArgs);
            }
            let mut xs = [0i64; 4];
            for (i, c) in coords.iter().enumerate() {
                xs[i] = c.as_i64().ok_or(ViolationKind::BadToolArgs)?;
            }
            let bbox = BBox::try_from(xs).map_err(|_| ViolationKind::BadToolArgs)?;
            Ok(ToolAction::Crop { bbox })
        }
        "code" => {
            if args.len() != 1 {
                return Err(ViolationKind::BadToolArgs);
            }
            let source = args
                .get("source")
                .and_then(|v| v.as_str())
                .ok_or(ViolationKind::BadToolArgs)?;
            ToolAction::code(source).map_err(|_| ViolationKind::BadToolArgs)
        }
        _ => Err(ViolationKind::UnknownTool),
    }
}

/// Renders a compliant turn back to its wire form, such that
/// `parse_turn(render_turn(p)?)` reproduces `p` up to whitespace
/// normalization. Turns with violations, with both or neither action set, or
/// whose text embeds grammar tags cannot be rendered.
pub fn render_turn(p: &ParsedTurn) -> Result<String, RenderError> {
    if !p.violations.is_empty() {
        return Err(RenderError::NonCompliantTurn);
    }
    if p.tool_call.is_some() == p.final_answer.is_some() {
        return Err(RenderError::NonCompliantTurn);
    }
    if contains_reserved_tag(&p.reasoning) {
        return Err(RenderError::NonCompliantTurn);
    }

    let mut out = format!("{THINK_OPEN}{}{THINK_CLOSE}\n", p.reasoning);
    if let Some(action) = &p.tool_call {
        let wire = match action {
            ToolAction::Crop { bbox } => ToolCallWire {
                name: "crop".into(),
                arguments: serde_json::json!({ "bbox": <[i64; 4]>::from(*bbox) }),
            },
            ToolAction::CodeExec { source } => ToolCallWire {
                name: "code".into(),
                arguments: serde_json::json!({ "source": source }),
            },
        };
        let payload = serde_json::to_string(&wire).expect("tool payload serialization");
        out.push_str(&format!("{TOOL_OPEN}{payload}{TOOL_CLOSE}"));
    } else {
        let answer = p.final_answer.as_deref().expect("checked above");
        if contains_reserved_tag(answer) {
            return Err(RenderError::NonCompliantTurn);
        }
        out.push_str(&format!("{ANSWER_OPEN}{answer}{ANSWER_CLOSE}"));
    }
    Ok(out)
}

fn contains_reserved_tag(text: &str) -> bool {
    [
        THINK_OPEN,
        THINK_CLOSE,
        TOOL_OPEN,
        TOOL_CLOSE,
        ANSWER_OPEN,
        ANSWER_CLOSE,
    ]
    .iter()
    .any(|t| text.contains(t))
}

/// Structural-compliance predicate over a whole rollout: true iff every raw
/// assistant turn parses with zero violations and the last turn carries the
/// final answer.
///
/// `raw_turns` must be the verbatim assistant outputs that produced `t`. For
/// answered trajectories the count must be `steps + 1`.
pub fn trajectory_format_ok(t: &Trajectory, raw_turns: &[String]) -> Result<bool, FormatCheckError> {
    if t.answer.is_some() {
        let expected = t.steps.len() + 1;
        if raw_turns.len() != expected {
            return Err(FormatCheckError::ArityMismatch {
                expected,
                got: raw_turns.len(),
            });
        }
    }
    let Some(last) = raw_turns.last() else {
        return Ok(false);
    };
    for turn in raw_turns {
        if !parse_turn(turn).is_compliant() {
            return Ok(false);
        }
    }
    Ok(parse_turn(last).final_answer.is_some())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_crop_turn() {
        let raw = "<think>zoom to legend</think><tool_call>{\"name\":\"crop\",\"arguments\":{\"bbox\":[10,20,110,220]}}</tool_call>";
        let p = parse_turn(raw);
        assert!(p.is_compliant(), "violations: {:?}", p.violations);
        assert_eq!(p.reasoning, "zoom to legend");
        assert_eq!(
            p.tool_call,
            Some(ToolAction::Crop {
                bbox: BBox::new(10, 20, 110, 220).unwrap()
            })
        );
        assert_eq!(p.final_answer, None);
    }

    #[test]
    fn parses_answer_turn() {
        let p = parse_turn("<think>done</think><answer>42</answer>");
        assert!(p.is_compliant());
        assert_eq!(p.final_answer.as_deref(), Some("42"));
        assert_eq!(p.tool_call, None);
    }

    #[test]
    fn parses_code_turn_with_escaped_newlines() {
        let raw = "<think>sum it</think>\n<tool_call>{\"name\":\"code\",\"arguments\":{\"source\":\"x = 1\\nprint(x)\"}}</tool_call>";
        let p = parse_turn(raw);
        assert!(p.is_compliant());
        assert_eq!(
            p.tool_call,
            Some(ToolAction::CodeExec {
                source: "x = 1\nprint(x)".into()
            })
        );
    }

    #[test]
    fn think_without_action_is_violation() {
        let p = parse_turn("<think>hmm</think>");
        assert_eq!(p.violations, vec![ViolationKind::NoActionOrAnswer]);
        assert_eq!(p.reasoning, "hmm");
    }

    #[test]
    fn missing_think_block() {
        let p = parse_turn("<answer>42</answer>");
        assert!(p.violations.contains(&ViolationKind::MissingThinkBlock));
    }

    #[test]
    fn unclosed_think() {
        let p = parse_turn("<think>forever");
        assert_eq!(p.violations, vec![ViolationKind::UnclosedTag]);
    }

    #[test]
    fn unclosed_action() {
        let p = parse_turn("<think>x</think><answer>42");
        assert!(p.violations.contains(&ViolationKind::UnclosedTag));
        assert_eq!(p.final_answer, None);
    }

    #[test]
    fn multiple_actions_yield_neither() {
        let raw = "<think>x</think><tool_call>{\"name\":\"code\",\"arguments\":{\"source\":\"1\"}}</tool_call><answer>2</answer>";
        let p = parse_turn(raw);
        assert!(p.violations.contains(&ViolationKind::MultipleActions));
        assert_eq!(p.tool_call, None);
        assert_eq!(p.final_answer, None);
    }

    #[test]
    fn unknown_tool_name() {
        let p = parse_turn("<think>x</think><tool_call>{\"name\":\"ocr\",\"arguments\":{}}</tool_call>");
        assert_eq!(p.violations, vec![ViolationKind::UnknownTool]);
    }

    #[test]
    fn bad_tool_args() {
        for payload in [
            "{\"name\":\"crop\",\"arguments\":{\"bbox\":[1,2,3]}}",
            "{\"name\":\"crop\",\"arguments\":{\"bbox\":[3,2,1,4]}}",
            "{\"name\":\"crop\",\"arguments\":{\"bbox\":[-1,2,3,4]}}",
            "{\"name\":\"crop\",\"arguments\":{\"bbox\":[1,2,3,4],\"extra\":0}}",
            "{\"name\":\"code\",\"arguments\":{\"source\":\"\"}}",
            "{\"name\":\"code\",\"arguments\":{}}",
            "{not json}",
        ] {
            let p = parse_turn(&format!("<think>x</think><tool_call>{payload}</tool_call>"));
            assert_eq!(p.violations, vec![ViolationKind::BadToolArgs], "{payload}");
        }
    }

    #[test]
    fn trailing_garbage() {
        let p = parse_turn("<think>x</think><answer>42</answer> and more words");
        assert_eq!(p.violations, vec![ViolationKind::TrailingGarbage]);
        let p = parse_turn("<think>x</think>noise<answer>42</answer>");
        assert_eq!(p.violations, vec![ViolationKind::TrailingGarbage]);
    }

    #[test]
    fn render_round_trips() {
        let cases = vec![
            ParsedTurn::of_answer("x", "7"),
            ParsedTurn::of_tool("", ToolAction::Crop {
                bbox: BBox::new(0, 0, 1, 1).unwrap(),
            }),
            ParsedTurn::of_tool("compute", ToolAction::CodeExec {
                source: "print(1 + 1)\nprint(2)".into(),
            }),
        ];
        for turn in cases {
            let rendered = render_turn(&turn).unwrap();
            let back = parse_turn(&rendered);
            assert_eq!(back, turn, "rendered: {rendered}");
        }
    }

    #[test]
    fn render_answer_example() {
        let s = render_turn(&ParsedTurn::of_answer("x", "7")).unwrap();
        assert_eq!(s, "<think>x</think>\n<answer>7</answer>");
    }

    #[test]
    fn render_rejects_non_compliant() {
        let mut p = ParsedTurn::of_answer("x", "7");
        p.violations.push(ViolationKind::TrailingGarbage);
        assert!(matches!(render_turn(&p), Err(RenderError::NonCompliantTurn)));

        let neither = ParsedTurn {
            reasoning: "x".into(),
            tool_call: None,
            final_answer: None,
            violations: vec![],
        };
        assert!(render_turn(&neither).is_err());

        let tagged = ParsedTurn::of_answer("sneaky </think>", "7");
        assert!(render_turn(&tagged).is_err());
    }

    #[test]
    fn format_ok_cases() {
        use crate::model::{ImageRef, Observation, Step, TerminatedBy};
        let image = ImageRef {
            source_id: "i".into(),
            content_hash: "h".into(),
            width: 1,
            height: 1,
        };
        let step = Step {
            reasoning: "r".into(),
            action: ToolAction::CodeExec { source: "print(1)".into() },
            observation: Observation::Text { content: "1\n".into(), truncated: false },
        };
        let answered = Trajectory {
            image: image.clone(),
            question: "q".into(),
            steps: vec![step.clone()],
            final_reasoning: "done".into(),
            answer: Some("1".into()),
            terminated_by: TerminatedBy::Answer,
        };
        let good = vec![
            "<think>r</think><tool_call>{\"name\":\"code\",\"arguments\":{\"source\":\"print(1)\"}}</tool_call>".to_string(),
            "<think>done</think><answer>1</answer>".to_string(),
        ];
        assert!(trajectory_format_ok(&answered, &good).unwrap());

        let garbage_last = vec![good[0].clone(), "<think>done</think><answer>1</answer>!!".to_string()];
        assert!(!trajectory_format_ok(&answered, &garbage_last).unwrap());

        let tool_last = vec![good[0].clone(), good[0].clone()];
        assert!(!trajectory_format_ok(&answered, &tool_last).unwrap());

        assert!(matches!(
            trajectory_format_ok(&answered, &good[..1].to_vec()),
            Err(FormatCheckError::ArityMismatch { expected: 2, got: 1 })
        ));

        let truncated = Trajectory {
            answer: None,
            terminated_by: TerminatedBy::TurnLimit,
            ..answered
        };
        assert!(!trajectory_format_ok(&truncated, &good[..1].to_vec()).unwrap());
    }

    #[test]
    fn parse_never_panics_on_junk() {
        for junk in [
            "",
            "<",
            "<think>",
            "</think>",
            "<think></think><tool_call></tool_call>",
            "<tool_call><tool_call>",
            "\u{0}\u{ff}<think>\u{7f}</think>",
            "<think>a</think><answer><answer></answer></answer>",
        ] {
            let _ = parse_turn(junk);
        }
    }
}
