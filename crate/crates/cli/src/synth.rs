//! `synth`: writes a complete, scoreable run directory from a TOML spec.
//!
//! ```toml
//! seed = 42
//! dimensions = ["gender", "religion"]
//! bbq_prompts = 200          # per dimension; ignored when bbq_file is set
//! unqover_prompts = 100      # per dimension; ignored when unqover_file is set
//! # bbq_file = "prompts.jsonl"
//!
//! [activations]              # optional
//! samples = 64               # first N BBQ prompts form the sample axis
//! layer_dims = [32, 32, 32, 32]
//!
//! [[models]]
//! id = "model-a"
//! family = "demo"
//! version = "1"
//! provenance = "open"
//! p_stereo = 0.7
//! p_abstain = 0.2
//! drift = { scale = 1.0, sigma = [0.05, 0.05, 0.4] }   # optional
//! ```
//!
//! The output holds `models.json`, `prompts/`, `responses/`, optional
//! `activations/` and a `config.toml` that `score`, `compare` and `audit`
//! accept directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use bsm_core::loader::{load_bbq, load_unqover, write_jsonl};
use bsm_core::model::{Dimension, ModelDescriptor, PromptRecord, Provenance, RawResponse};
use bsm_core::repr::{write_activation_dir, Dtype};
use bsm_core::synth::{
    generate_activations, generate_base_activations, generate_prompts, generate_responses,
    DriftSpec, PromptShape, SplitMix64, SynthSpec,
};
use serde::Deserialize;

use crate::commands::Outcome;
use crate::config::RunConfig;
use crate::error::{ErrorKind, Stage, StageError, StageExt};
use crate::output::{safe_name, StagedDir};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub sigma: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub id: String,
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_version")]
    pub version: String,
    #[serde(default)]
    pub size_params: Option<u64>,
    #[serde(default)]
    pub tuned: bool,
    #[serde(default = "default_provenance")]
    pub provenance: Provenance,
    pub p_stereo: f64,
    pub p_abstain: f64,
    #[serde(default)]
    pub drift: Option<DriftConfig>,
}

fn default_family() -> String {
    "synthetic".into()
}

fn default_version() -> String {
    "1".into()
}

fn default_provenance() -> Provenance {
    Provenance::Open
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationConfig {
    pub samples: usize,
    pub layer_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub dimensions: Vec<Dimension>,
    #[serde(default)]
    pub bbq_prompts: usize,
    #[serde(default)]
    pub unqover_prompts: usize,
    #[serde(default)]
    pub bbq_file: Option<PathBuf>,
    #[serde(default)]
    pub unqover_file: Option<PathBuf>,
    #[serde(default)]
    pub activations: Option<ActivationConfig>,
    pub models: Vec<ModelProfile>,
}

impl SynthConfig {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        if cfg.models.is_empty() {
            bail!("at least one [[models]] entry is required");
        }
        if cfg.dimensions.is_empty() {
            bail!("`dimensions` must not be empty");
        }
        let mut ids = std::collections::HashSet::new();
        for m in &cfg.models {
            if !ids.insert(m.id.as_str()) {
                bail!("duplicate model id `{}`", m.id);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, StageError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading synth spec {}", path.display()))
            .at(Stage::Config, ErrorKind::Config)?;
        let mut cfg = Self::from_toml_str(&text)
            .with_context(|| format!("parsing synth spec {}", path.display()))
            .at(Stage::Config, ErrorKind::Config)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.bbq_file, &mut cfg.unqover_file]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

fn prompt_set(
    cfg: &SynthConfig,
    file: &Option<PathBuf>,
    per_dim: usize,
    shape: PromptShape,
    prefix: &str,
) -> Result<Vec<PromptRecord>, StageError> {
    if let Some(path) = file {
        let loaded = match shape {
            PromptShape::Unqover => load_unqover(path),
            _ => load_bbq(path),
        }
        .at(Stage::Synth, ErrorKind::Data)?;
        return Ok(loaded
            .into_iter()
            .filter(|p| cfg.dimensions.contains(&p.dimension))
            .collect());
    }
    Ok(cfg
        .dimensions
        .iter()
        .flat_map(|d| generate_prompts(d, per_dim, shape, prefix))
        .collect())
}

fn stage_jsonl<T: serde::Serialize>(
    staged: &StagedDir,
    rel: &str,
    records: &[T],
) -> Result<(), StageError> {
    let path = staged.path().join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(Stage::Write, ErrorKind::Data)?;
    }
    write_jsonl(&path, records)
        .with_context(|| format!("writing {rel}"))
        .at(Stage::Write, ErrorKind::Data)
}

/// Generates the run directory. `seed_override` replaces the spec's seed.
pub fn run(
    cfg: &SynthConfig,
    seed_override: Option<u64>,
    out: &Path,
) -> Result<Outcome, StageError> {
    let seed = seed_override.unwrap_or(cfg.seed);
    let bbq = prompt_set(
        cfg,
        &cfg.bbq_file,
        cfg.bbq_prompts,
        PromptShape::BbqMixed,
        "bbq-",
    )?;
    let unqover = prompt_set(
        cfg,
        &cfg.unqover_file,
        cfg.unqover_prompts,
        PromptShape::Unqover,
        "unq-",
    )?;
    if bbq.is_empty() && unqover.is_empty() {
        return Err(StageError::config(
            Stage::Synth,
            anyhow!("spec produces no prompts"),
        ));
    }
    let all: Vec<PromptRecord> = bbq.iter().chain(&unqover).cloned().collect();

    let staged = StagedDir::begin(out).at(Stage::Write, ErrorKind::Config)?;
    let mut run_cfg = RunConfig {
        manifest: "models.json".into(),
        bbq: None,
        unqover: None,
        completions: None,
        lexicon: None,
        dimensions: Some(cfg.dimensions.clone()),
        responses: BTreeMap::new(),
        activations: BTreeMap::new(),
        audit: Default::default(),
    };
    if !bbq.is_empty() {
        stage_jsonl(&staged, "prompts/bbq.jsonl", &bbq)?;
        run_cfg.bbq = Some("prompts/bbq.jsonl".into());
    }
    if !unqover.is_empty() {
        stage_jsonl(&staged, "prompts/unqover.jsonl", &unqover)?;
        run_cfg.unqover = Some("prompts/unqover.jsonl".into());
    }

    let base_acts = match &cfg.activations {
        Some(a) => {
            if a.samples < 2 || a.samples > bbq.len() {
                return Err(StageError::config(
                    Stage::Synth,
                    anyhow!("activation samples must lie in [2, {}]", bbq.len()),
                ));
            }
            let ids = bbq[..a.samples]
                .iter()
                .map(|p| p.prompt_id.clone())
                .collect();
            let mut rng = SplitMix64::stream(seed, u64::MAX);
            Some(
                generate_base_activations(rng.next_u64(), "base", ids, &a.layer_dims)
                    .at(Stage::Synth, ErrorKind::Config)?,
            )
        }
        None => None,
    };

    let mut manifest = Vec::new();
    for (k, m) in cfg.models.iter().enumerate() {
        let mut rng = SplitMix64::stream(seed, k as u64);
        let spec = SynthSpec {
            p_stereo: m.p_stereo,
            p_abstain: m.p_abstain,
            seed: rng.next_u64(),
            n_prompts: all.len(),
            dimension: cfg.dimensions[0].clone(),
        };
        let responses = generate_responses(&spec, &m.id, &all)
            .with_context(|| format!("model `{}`", m.id))
            .at(Stage::Synth, ErrorKind::Config)?;
        let raw: Vec<RawResponse> = responses
            .into_iter()
            .map(|r| RawResponse {
                model_id: r.model_id,
                prompt_id: r.prompt_id,
                raw_text: r.raw_text,
            })
            .collect();
        let rel = format!("responses/{}.jsonl", safe_name(&m.id));
        stage_jsonl(&staged, &rel, &raw)?;
        run_cfg.responses.insert(m.id.clone(), rel.into());

        if let Some(base) = &base_acts {
            let drift = m.drift.clone().unwrap_or(DriftConfig {
                scale: 1.0,
                sigma: Vec::new(),
            });
            let spec = DriftSpec {
                seed: rng.next_u64(),
                scale: drift.scale,
                sigma: drift.sigma,
            };
            let acts = generate_activations(&spec, base, &m.id)
                .with_context(|| format!("activations for `{}`", m.id))
                .at(Stage::Synth, ErrorKind::Config)?;
            let rel = format!("activations/{}", safe_name(&m.id));
            write_activation_dir(&staged.path().join(&rel), &acts, Dtype::F64)
                .at(Stage::Write, ErrorKind::Data)?;
            run_cfg.activations.insert(m.id.clone(), rel.into());
        }

        manifest.push(ModelDescriptor {
            id: m.id.clone(),
            family: m.family.clone(),
            version: m.version.clone(),
            size_params: m.size_params,
            tuned: m.tuned,
            provenance: m.provenance,
        });
    }
    let mut text = serde_json::to_string_pretty(&manifest).expect("descriptors serialize");
    text.push('\n');
    staged
        .write("models.json", text)
        .at(Stage::Write, ErrorKind::Data)?;
    let cfg_text = toml::to_string(&run_cfg)
        .context("rendering run config")
        .at(Stage::Write, ErrorKind::Data)?;
    staged
        .write("config.toml", cfg_text)
        .at(Stage::Write, ErrorKind::Data)?;
    let dest = staged.promote().at(Stage::Write, ErrorKind::Data)?;
    Ok(Outcome {
        exit_code: 0,
        message: format!(
            "generated {} prompt(s) and {} model(s) into {}",
            all.len(),
            cfg.models.len(),
            dest.display()
        ),
    })
}
