//! Trajectory scoring: accuracy, format, and gated tool rewards.
//!
//! Each component is a binary signal. The total is
//! `R = R_acc + lambda1 * R_format + lambda2 * I[R_acc > 0] * R_tool`, so
//! tool use earns its bonus only on correct answers. Rewards are defined at
//! the trajectory level; there is no partial credit and no per-step signal.

use crate::clients::{ClientError, JudgeClient};
use crate::model::{AnswerType, RewardBreakdown, Trajectory};
use crate::parser::{trajectory_format_ok, FormatCheckError};
use serde::{Deserialize, Serialize};

pub const DEFAULT_LAMBDA1: f64 = 0.1;
pub const DEFAULT_LAMBDA2: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    /// Matching needed the judge fallback but no judge is configured.
    #[error("judge fallback required for this comparison but no judge is configured")]
    JudgeRequired,
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Format(#[from] FormatCheckError),
}

/// Answer-matching rules for the accuracy reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPolicy {
    /// Relative tolerance for numeric answers.
    pub numeric_rel_tol: f64,
    pub case_fold: bool,
    /// Strip `%`, thousands separators, and currency signs before numeric
    /// parsing.
    pub strip_units: bool,
    /// Defer Text/ListRange mismatches to the judge endpoint.
    pub judge_fallback: bool,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        Self {
            numeric_rel_tol: 0.05,
            case_fold: true,
            strip_units: true,
            judge_fallback: false,
        }
    }
}

/// Binary accuracy reward. Absent predictions score 0; numeric answers match
/// within `numeric_rel_tol` relative error (absolute 1e-9 when the gold
/// value is zero); binary and text answers match after normalization, with
/// the optional judge fallback deciding Text/ListRange mismatches.
pub fn accuracy_reward(
    pred: Option<&str>,
    gold: &str,
    answer_type: AnswerType,
    policy: &MatchPolicy,
    judge: Option<&JudgeClient>,
) -> Result<f64, RewardError> {
    debug_assert!(!gold.is_empty(), "gold answer must be non-empty");
    let Some(pred) = pred else {
        return Ok(0.0);
    };
    match answer_type {
        AnswerType::Numeric => Ok(numeric_match(pred, gold, policy) as u8 as f64),
        AnswerType::Binary => Ok((normalize(pred, policy) == normalize(gold, policy)) as u8 as f64),
        AnswerType::Text | AnswerType::ListRange => {
            if normalize(pred, policy) == normalize(gold, policy) {
                return Ok(1.0);
            }
            if !policy.judge_fallback {
                return Ok(0.0);
            }
            let Some(judge) = judge else {
                return Err(RewardError::JudgeRequired);
            };
            let verdict = judge.judge_answer("", gold, pred)?;
            Ok(verdict.correct as u8 as f64)
        }
    }
}

fn numeric_match(pred: &str, gold: &str, policy: &MatchPolicy) -> bool {
    match (parse_number(pred, policy), parse_number(gold, policy)) {
        (Some(p), Some(g)) => {
            if g == 0.0 {
                (p - g).abs() <= 1e-9
            } else {
                (p - g).abs() <= policy.numeric_rel_tol * g.abs()
            }
        }
        // Unparseable sides fall back to normalized exact match; numeric
        // scoring stays offline-deterministic.
        _ => normalize(pred, policy) == normalize(gold, policy),
    }
}

fn parse_number(text: &str, policy: &MatchPolicy) -> Option<f64> {
    let mut cleaned: String = text
        .trim()
        .chars()
        .filter(|c| {
            if policy.strip_units {
                !matches!(c, '%' | ',' | '$' | '€' | '£' | '¥')
            } else {
                true
            }
        })
        .collect();
    cleaned = cleaned.trim().to_string();
    cleaned.parse::<f64>().ok()
}

fn normalize(text: &str, policy: &MatchPolicy) -> String {
    let folded = if policy.case_fold {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let stripped = folded.trim().trim_end_matches(['.', '!']);
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Binary tool reward: 1 iff at least one step's observation is a
/// successful tool execution (not a `ToolError`). Rewarding execution
/// success rather than mere emission keeps broken-call spam unpaid.
pub fn tool_reward(t: &Trajectory) -> f64 {
    t.steps.iter().any(|s| !s.observation.is_error()) as u8 as f64
}

/// Binary format reward: all-or-nothing structural compliance over the raw
/// turns.
pub fn format_reward(t: &Trajectory, raw_turns: &[String]) -> Result<f64, RewardError> {
    Ok(trajectory_format_ok(t, raw_turns)? as u8 as f64)
}

/// Scores one trajectory end to end.
#[allow(clippy::too_many_arguments)]
pub fn total_reward(
    t: &Trajectory,
    raw_turns: &[String],
    gold: &str,
    answer_type: AnswerType,
    lambda1: f64,
    lambda2: f64,
    policy: &MatchPolicy,
    judge: Option<&JudgeClient>,
) -> Result<RewardBreakdown, RewardError> {
    let acc = accuracy_reward(t.answer.as_deref(), gold, answer_type, policy, judge)?;
    let format = format_reward(t, raw_turns)?;
    let tool = tool_reward(t);
    Ok(RewardBreakdown::compose(acc, format, tool, lambda1, lambda2))
}
