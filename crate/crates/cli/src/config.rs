//! Layered run configuration: TOML file, then `CHART_TIR_*` environment
//! overrides, then `--set key=value` flags, in increasing precedence. The
//! effective config hashes deterministically so run manifests can pin it.

use chart_tir::clients::RetryConfig;
use chart_tir::datasynth::{SamplerPools, SynthConfig};
use chart_tir::grpo::GrpoConfig;
use chart_tir::reward::MatchPolicy;
use chart_tir::sandbox::ExecLimits;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Environment variable naming the default config file.
pub const CONFIG_PATH_ENV: &str = "CHART_TIR_CONFIG";
/// Prefix for environment overrides: `CHART_TIR_SECTION__KEY=value`.
pub const ENV_OVERRIDE_PREFIX: &str = "CHART_TIR_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("bad --set override {0:?}: expected section.key=value")]
    BadOverride(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub endpoint_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub max_inflight: usize,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    /// Cassette file; with mode "replay" no live network is touched, with
    /// "record" live replies are captured into it.
    pub cassette: Option<PathBuf>,
    pub cassette_mode: CassetteMode,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: None,
            max_inflight: 8,
            timeout_s: 120.0,
            max_retries: 3,
            backoff_ms: 200,
            cassette: None,
            cassette_mode: CassetteMode::Replay,
        }
    }
}

impl EndpointConfig {
    pub fn retry(&self) -> RetryConfig {
        RetryConfig { max_retries: self.max_retries, backoff_ms: self.backoff_ms }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    pub interpreter_cmd: Vec<String>,
    pub pool_size: usize,
    pub wall_timeout_s: f64,
    pub cpu_timeout_s: f64,
    pub memory_limit_bytes: u64,
    pub stdout_cap_bytes: usize,
    pub network_allowed: bool,
    /// When set, execution goes to this remote execute endpoint instead of
    /// a local subprocess.
    pub remote_url: Option<String>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        let limits = ExecLimits::default();
        Self {
            interpreter_cmd: vec!["python3".into()],
            pool_size: 8,
            wall_timeout_s: limits.wall_timeout_s,
            cpu_timeout_s: limits.cpu_timeout_s,
            memory_limit_bytes: limits.memory_limit_bytes,
            stdout_cap_bytes: limits.stdout_cap_bytes,
            network_allowed: limits.network_allowed,
            remote_url: None,
        }
    }
}

impl SandboxConfig {
    pub fn exec_limits(&self) -> ExecLimits {
        ExecLimits {
            wall_timeout_s: self.wall_timeout_s,
            cpu_timeout_s: self.cpu_timeout_s,
            memory_limit_bytes: self.memory_limit_bytes,
            stdout_cap_bytes: self.stdout_cap_bytes,
            network_allowed: self.network_allowed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub max_assistant_turns: u32,
    pub max_parse_failures: u32,
    pub group_size: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub group_failure_threshold: f64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            max_assistant_turns: 4,
            max_parse_failures: 2,
            group_size: 8,
            temperature: 1.0,
            max_tokens: 2048,
            group_failure_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolsSection {
    pub min_crop_side: u32,
    pub crop_resize_factor: f64,
}

impl Default for ToolsSection {
    fn default() -> Self {
        Self { min_crop_side: 8, crop_resize_factor: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub numeric_rel_tol: f64,
    pub case_fold: bool,
    pub strip_units: bool,
    pub judge_fallback: bool,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        let m = MatchPolicy::default();
        Self {
            numeric_rel_tol: m.numeric_rel_tol,
            case_fold: m.case_fold,
            strip_units: m.strip_units,
            judge_fallback: m.judge_fallback,
            lambda1: chart_tir::reward::DEFAULT_LAMBDA1,
            lambda2: chart_tir::reward::DEFAULT_LAMBDA2,
        }
    }
}

impl RewardSection {
    pub fn match_policy(&self) -> MatchPolicy {
        MatchPolicy {
            numeric_rel_tol: self.numeric_rel_tol,
            case_fold: self.case_fold,
            strip_units: self.strip_units,
            judge_fallback: self.judge_fallback,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoSection {
    pub epsilon: f64,
    pub std_floor: f64,
}

impl Default for GrpoSection {
    fn default() -> Self {
        let g = GrpoConfig::default();
        Self { epsilon: g.epsilon, std_floor: g.std_floor }
    }
}

impl GrpoSection {
    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig { epsilon: self.epsilon, std_floor: self.std_floor, ..GrpoConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub max_repairs: u32,
    pub visual_threshold: u8,
    pub semantic_threshold: u8,
    pub votes_n: usize,
    pub vote_threshold: f64,
    pub difficulty_threshold: u8,
    /// Optional external reference library; the bundled seed set is used
    /// when unset.
    pub reference_library: Option<PathBuf>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            max_repairs: s.max_repairs,
            visual_threshold: s.visual_threshold,
            semantic_threshold: s.semantic_threshold,
            votes_n: s.votes_n,
            vote_threshold: s.vote_threshold,
            difficulty_threshold: s.difficulty_threshold,
            reference_library: None,
        }
    }
}

impl SynthSection {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            max_repairs: self.max_repairs,
            visual_threshold: self.visual_threshold,
            semantic_threshold: self.semantic_threshold,
            votes_n: self.votes_n,
            vote_threshold: self.vote_threshold,
            difficulty_threshold: self.difficulty_threshold,
            aspects: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// PNG asset store addressed by source_id.
    pub assets_dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { assets_dir: PathBuf::from("assets/images") }
    }
}

/// The whole effective configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub policy: EndpointConfig,
    pub judge: EndpointConfig,
    pub llm: EndpointConfig,
    pub sandbox: SandboxConfig,
    pub rollout: RolloutSection,
    pub tools: ToolsSection,
    pub reward: RewardSection,
    pub grpo: GrpoSection,
    pub synth: SynthSection,
    pub data: DataSection,
}

impl AppConfig {
    /// Loads the layered configuration. `path` falls back to
    /// `$CHART_TIR_CONFIG`; with neither set, defaults apply.
    pub fn load(
        path: Option<&Path>,
        set_overrides: &[String],
    ) -> Result<Self, ConfigError> {
        let env_path = std::env::var(CONFIG_PATH_ENV).ok().map(PathBuf::from);
        let path = path.map(Path::to_path_buf).or(env_path);

        let mut table = match &path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| ConfigError::Io(p.clone(), e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };

        let mut env_overrides: Vec<(String, String)> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_OVERRIDE_PREFIX) && k != CONFIG_PATH_ENV)
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_OVERRIDE_PREFIX)?;
                let (section, key) = rest.split_once("__")?;
                Some((format!("{}.{}", section.to_lowercase(), key.to_lowercase()), v))
            })
            .collect();
        env_overrides.sort();
        for (key, value) in env_overrides {
            apply_override(&mut table, &key, &value)?;
        }

        for raw in set_overrides {
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(raw.clone()))?;
            apply_override(&mut table, key.trim(), value.trim())?;
        }

        table
            .try_into()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form of the effective config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(format!("{key}={value}")));
    }
    let section = table
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(section) = section else {
        return Err(ConfigError::Invalid(format!("{} is not a section", parts[0])));
    };
    section.insert(parts[1].to_string(), parse_toml_scalar(value));
    Ok(())
}

/// Interprets an override value: bool, integer, float, TOML array, then
/// string.
fn parse_toml_scalar(value: &str) -> toml::Value {
    if let Ok(b) = value.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = value.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = value.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if value.starts_with('[') {
        if let Ok(toml::Value::Array(a)) = format!("v = {value}").parse::<toml::Table>().map(|mut t| t.remove("v").unwrap()) {
            return toml::Value::Array(a);
        }
    }
    toml::Value::String(value.to_string())
}

/// Pools used by synth-charts; separated from [`AppConfig`] because they are
/// data, not knobs, but still overridable from a TOML file.
pub fn sampler_pools() -> SamplerPools {
    SamplerPools::default()
}
