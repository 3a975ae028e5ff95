//! The load stage: manifest, prompts, labelled responses, activations and
//! open-ended completions, filtered to the requested dimensions.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use bsm_core::loader::{load_bbq, load_manifest, load_responses, load_unqover};
use bsm_core::model::{Dimension, ModelDescriptor, PromptRecord, ResponseRecord};
use bsm_core::normalize::RefusalLexicon;
use bsm_core::openended::CompletionRecord;
use bsm_core::repr::{read_activation_dir, ActivationSet};
use bsm_core::signature::MetricBundle;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{ErrorKind, Stage, StageError, StageExt};

pub struct Workspace {
    pub config: RunConfig,
    pub lexicon: RefusalLexicon,
    /// Models with a response file, in manifest order.
    pub models: Vec<ModelDescriptor>,
    /// Prompts on the selected dimensions.
    pub prompts: Vec<PromptRecord>,
    pub dims: Vec<Dimension>,
    /// Responses per model, parallel to `models`, restricted to `prompts`.
    pub responses: Vec<Vec<ResponseRecord>>,
    pub activations: Vec<Option<Arc<ActivationSet>>>,
    pub completions: Vec<CompletionRecord>,
}

pub fn read_completions(path: &Path) -> anyhow::Result<Vec<CompletionRecord>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| {
                format!("{}:{}: malformed completion record", path.display(), i + 1)
            })
        })
        .collect()
}

impl Workspace {
    pub fn load(
        config: RunConfig,
        dims_override: Option<Vec<Dimension>>,
    ) -> Result<Self, StageError> {
        let lexicon = match &config.lexicon {
            Some(p) => RefusalLexicon::from_file(p)
                .with_context(|| format!("reading lexicon {}", p.display()))
                .at(Stage::Load, ErrorKind::Config)?,
            None => RefusalLexicon::default(),
        };
        let manifest = load_manifest(&config.manifest).at(Stage::Load, ErrorKind::Config)?;
        let known: HashSet<&str> = manifest.iter().map(|m| m.id.as_str()).collect();
        for id in config.responses.keys().chain(config.activations.keys()) {
            if !known.contains(id.as_str()) {
                return Err(StageError::config(
                    Stage::Load,
                    anyhow!(
                        "model `{id}` is configured but missing from {}",
                        config.manifest.display()
                    ),
                ));
            }
        }
        let models: Vec<ModelDescriptor> = manifest
            .into_iter()
            .filter(|m| config.responses.contains_key(&m.id))
            .collect();

        let mut all_prompts = Vec::new();
        if let Some(p) = &config.bbq {
            all_prompts.extend(load_bbq(p).at(Stage::Load, ErrorKind::Data)?);
        }
        if let Some(p) = &config.unqover {
            all_prompts.extend(load_unqover(p).at(Stage::Load, ErrorKind::Data)?);
        }
        let mut seen = HashSet::new();
        for p in &all_prompts {
            if !seen.insert(p.prompt_id.as_str()) {
                return Err(StageError::data(
                    Stage::Load,
                    anyhow!(
                        "prompt id `{}` appears in more than one prompt file",
                        p.prompt_id
                    ),
                ));
            }
        }

        let dims: Vec<Dimension> = match dims_override.or_else(|| config.dimensions.clone()) {
            Some(d) => {
                let unique: BTreeSet<Dimension> = d.into_iter().collect();
                unique.into_iter().collect()
            }
            None => {
                let present: BTreeSet<Dimension> =
                    all_prompts.iter().map(|p| p.dimension.clone()).collect();
                present.into_iter().collect()
            }
        };
        let keep: HashSet<&Dimension> = dims.iter().collect();

        let responses: Vec<Vec<ResponseRecord>> = models
            .par_iter()
            .map(|m| {
                let path = &config.responses[&m.id];
                let records = load_responses(path, &all_prompts, &lexicon)
                    .at(Stage::Load, ErrorKind::Data)?;
                if let Some(bad) = records.iter().find(|r| r.model_id != m.id) {
                    return Err(StageError::data(
                        Stage::Load,
                        anyhow!(
                            "{}: record for prompt `{}` names model `{}`, expected `{}`",
                            path.display(),
                            bad.prompt_id,
                            bad.model_id,
                            m.id
                        ),
                    ));
                }
                Ok(records)
            })
            .collect::<Result<_, _>>()?;

        let prompts: Vec<PromptRecord> = all_prompts
            .into_iter()
            .filter(|p| keep.contains(&p.dimension))
            .collect();
        let retained: HashSet<&str> = prompts.iter().map(|p| p.prompt_id.as_str()).collect();
        let responses = responses
            .into_iter()
            .map(|rs| {
                rs.into_iter()
                    .filter(|r| retained.contains(r.prompt_id.as_str()))
                    .collect()
            })
            .collect();

        let activations = models
            .par_iter()
            .map(|m| match config.activations.get(&m.id) {
                Some(dir) => read_activation_dir(dir)
                    .with_context(|| format!("activations for `{}`", m.id))
                    .map(|a| Some(Arc::new(a)))
                    .at(Stage::Load, ErrorKind::Data),
                None => Ok(None),
            })
            .collect::<Result<_, _>>()?;

        let completions = match &config.completions {
            Some(p) => read_completions(p).at(Stage::Load, ErrorKind::Data)?,
            None => Vec::new(),
        };

        Ok(Self {
            config,
            lexicon,
            models,
            prompts,
            dims,
            responses,
            activations,
            completions,
        })
    }

    pub fn prompt_index(&self) -> HashMap<&str, &PromptRecord> {
        self.prompts
            .iter()
            .map(|p| (p.prompt_id.as_str(), p))
            .collect()
    }

    pub fn position(&self, id: &str) -> Result<usize, StageError> {
        self.models.iter().position(|m| m.id == id).ok_or_else(|| {
            StageError::config(
                Stage::Config,
                anyhow!("unknown model `{id}` (no response file configured)"),
            )
        })
    }

    /// Per-model metric bundles, computed in parallel, in model order.
    pub fn bundles(&self, stage: Stage) -> Result<Vec<MetricBundle>, StageError> {
        let index = self.prompt_index();
        self.models
            .par_iter()
            .zip(&self.responses)
            .zip(&self.activations)
            .map(|((m, rs), acts)| {
                MetricBundle::compute(m.clone(), &index, rs, &self.dims, acts.clone())
                    .with_context(|| format!("metrics for `{}`", m.id))
                    .at(stage, ErrorKind::Data)
            })
            .collect()
    }
}
