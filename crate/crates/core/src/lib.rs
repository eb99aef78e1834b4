//! Tool-integrated chart reasoning runtime.
//!
//! This crate drives a multi-turn reasoning loop around an external policy
//! endpoint: the policy alternates free-text reasoning with two tool calls
//! (image cropping and sandboxed code execution) whose observations feed back
//! into its context until it emits a final answer. Around that loop the crate
//! provides:
//!
//! - [`model`] — shared domain types (trajectories, tool actions, rewards,
//!   QA items) and their line-delimited JSON stores
//! - [`parser`] — the assistant-turn grammar (`<think>` / `<tool_call>` /
//!   `<answer>`) and the structural-compliance predicate behind the format
//!   reward
//! - [`sandbox`] — isolated subprocess execution with wall/cpu/memory limits
//! - [`tools`] — the crop and code tools mapping actions to observations
//! - [`clients`] — chat-completions clients for the policy, generator, and
//!   judge endpoints, with record/replay cassettes
//! - [`rollout`] — the interaction loop and G-trajectory group sampling
//! - [`reward`] — accuracy/format/tool rewards with the correctness gate
//! - [`grpo`] — group-relative advantages and the masked, clipped objective
//! - [`datasynth`] — chart synthesis with sandbox repair, QA generation with
//!   four-stage checking, and cold-start trajectory distillation
//! - [`evalbench`] — benchmark runner, tool-usage distribution, and dataset
//!   pixel-entropy statistics

pub mod clients;
pub mod datasynth;
pub mod evalbench;
pub mod grpo;
pub mod model;
pub mod parser;
pub mod reward;
pub mod rollout;
pub mod sandbox;
pub mod tools;

pub use model::{
    BBox, ChartImage, ChartSpec, GroupSample, ImageRef, MaskedTokenBatch, Observation, QAItem,
    RewardBreakdown, Step, TerminatedBy, ToolAction, ToolErrorKind, Trajectory,
};
