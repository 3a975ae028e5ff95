//! Run configuration (TOML). Relative paths resolve against the directory
//! holding the configuration file.
//!
//! ```toml
//! manifest = "models.json"
//! bbq = "prompts/bbq.jsonl"
//! unqover = "prompts/unqover.jsonl"
//! completions = "completions.jsonl"     # optional, open-ended records
//! lexicon = "refusal_lexicon.txt"       # optional, defaults to the shipped list
//! dimensions = ["gender", "religion"]   # optional, defaults to all present
//!
//! [responses]
//! model-a = "responses/model-a.jsonl"
//!
//! [activations]
//! model-a = "activations/model-a"
//!
//! [audit]
//! policy = "policy.toml"
//! tolerances = "tolerances.toml"
//! lineage_threshold = 0.05
//! old = "model-a"
//! new = "model-b"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use bsm_core::model::Dimension;
use serde::{Deserialize, Serialize};

use crate::error::{Stage, StageError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbq: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unqover: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimensions: Option<Vec<Dimension>>,
    #[serde(default)]
    pub responses: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub activations: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "AuditConfig::is_unset")]
    pub audit: AuditConfig,
}

impl AuditConfig {
    fn is_unset(&self) -> bool {
        self == &Self::default()
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        if cfg.bbq.is_none() && cfg.unqover.is_none() && cfg.completions.is_none() {
            anyhow::bail!("no prompt source: set `bbq`, `unqover` or `completions`");
        }
        Ok(cfg)
    }

    /// Reads a configuration file and makes every path absolute.
    pub fn load(path: &Path) -> Result<Self, StageError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| StageError::config(Stage::Config, e))?;
        let mut cfg = Self::from_toml_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(|e| StageError::config(Stage::Config, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.manifest);
        for p in [
            &mut self.bbq,
            &mut self.unqover,
            &mut self.completions,
            &mut self.lexicon,
            &mut self.audit.policy,
            &mut self.audit.tolerances,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        for p in self
            .responses
            .values_mut()
            .chain(self.activations.values_mut())
        {
            resolve(base, p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = RunConfig::from_toml_str(
            "manifest = \"m.json\"\nbbq = \"/abs/b.jsonl\"\n[responses]\na = \"r/a.jsonl\"\n",
        )
        .unwrap();
        cfg.resolve_paths(Path::new("/runs/x"));
        assert_eq!(cfg.manifest, PathBuf::from("/runs/x/m.json"));
        assert_eq!(cfg.bbq, Some(PathBuf::from("/abs/b.jsonl")));
        assert_eq!(cfg.responses["a"], PathBuf::from("/runs/x/r/a.jsonl"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("manifest = \"m\"\nbbq = \"b\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn a_prompt_source_is_required() {
        assert!(RunConfig::from_toml_str("manifest = \"m\"\n").is_err());
    }

    #[test]
    fn dimensions_parse_from_tags() {
        let cfg = RunConfig::from_toml_str(
            "manifest = \"m\"\nbbq = \"b\"\ndimensions = [\"gender\", \"caste\"]\n",
        )
        .unwrap();
        assert_eq!(
            cfg.dimensions.unwrap(),
            vec![Dimension::Gender, Dimension::Other("caste".into())]
        );
    }
}
