//! Run manifests: every artifact-producing run writes exactly one manifest
//! next to its primary output, pinning the config hash, template versions,
//! endpoint identities, and timestamps.

use crate::config::AppConfig;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointIdentity {
    pub url: String,
    pub model: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_hash: String,
    pub prompt_version: String,
    pub judge_template_version: String,
    pub checker_template_version: String,
    pub endpoints: std::collections::BTreeMap<String, EndpointIdentity>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub outputs: Vec<PathBuf>,
}

pub struct ManifestBuilder {
    subcommand: String,
    config_hash: String,
    endpoints: std::collections::BTreeMap<String, EndpointIdentity>,
    started_at: DateTime<Utc>,
}

impl ManifestBuilder {
    pub fn start(subcommand: &str, config: &AppConfig) -> Self {
        let mut endpoints = std::collections::BTreeMap::new();
        for (name, ep) in [
            ("policy", &config.policy),
            ("judge", &config.judge),
            ("llm", &config.llm),
        ] {
            endpoints.insert(
                name.to_string(),
                EndpointIdentity { url: ep.endpoint_url.clone(), model: ep.model.clone() },
            );
        }
        Self {
            subcommand: subcommand.to_string(),
            config_hash: config.hash(),
            endpoints,
            started_at: Utc::now(),
        }
    }

    /// Writes `<primary_output>.manifest.json` listing all outputs.
    pub fn finish(self, outputs: &[&Path]) -> anyhow::Result<PathBuf> {
        let primary = outputs.first().ok_or_else(|| anyhow::anyhow!("no outputs"))?;
        let manifest = RunManifest {
            subcommand: self.subcommand,
            config_hash: self.config_hash,
            prompt_version: chart_tir::rollout::SYSTEM_PROMPT_VERSION.into(),
            judge_template_version: chart_tir::clients::JUDGE_TEMPLATE_VERSION.into(),
            checker_template_version: chart_tir::datasynth::CHECKER_TEMPLATE_VERSION.into(),
            endpoints: self.endpoints,
            started_at: self.started_at,
            finished_at: Utc::now(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
        };
        let path = manifest_path(primary);
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json)?;
        Ok(path)
    }
}

pub fn manifest_path(primary_output: &Path) -> PathBuf {
    let mut name = primary_output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    primary_output.with_file_name(name)
}
