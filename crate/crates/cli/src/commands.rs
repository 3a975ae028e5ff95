//! `score`, `compare`, `audit` and `validate`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use bsm_core::audit::{
    lineage_screen, procurement_rank, regression_check, render_drift, render_lineage,
    render_procurement, CandidateMetrics, ProcurementPolicy, Tolerances, Verdict,
    DEFAULT_LINEAGE_THRESHOLD,
};
use bsm_core::dist::{histogram, write_histogram_csv, Grouping, LabelledHistogram};
use bsm_core::loader::{read_prompts_lenient, read_responses_lenient};
use bsm_core::model::{ContextKind, Dataset, ResponseRecord};
use bsm_core::openended::{sentiment_summary, write_failure_csv, write_sentiment_csv};
use bsm_core::repr::{layer_matrix, write_layer_matrix_csv};
use bsm_core::scalar::{flip_table, score_slices, write_flip_csv, write_score_csv};
use bsm_core::signature::{matrix_from_grid, pair_signature, signature_grid, MetricSelector};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{ErrorKind, Stage, StageError, StageExt, EXIT_AUDIT_FAIL};
use crate::output::{safe_name, StagedDir};
use crate::workspace::Workspace;

/// Result of a command that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub exit_code: i32,
    pub message: String,
}

impl Outcome {
    fn ok(message: impl Into<String>) -> Self {
        Self {
            exit_code: 0,
            message: message.into(),
        }
    }
}

fn csv_string<F>(f: F) -> anyhow::Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn pretty_json(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s.into_bytes()
}

fn begin(out: &Path) -> Result<StagedDir, StageError> {
    StagedDir::begin(out).at(Stage::Write, ErrorKind::Config)
}

fn finish(staged: StagedDir) -> Result<PathBuf, StageError> {
    staged.promote().at(Stage::Write, ErrorKind::Data)
}

/// Scalar scores, histograms, base-to-tuned flip tables and, when
/// completions are configured, the open-ended summaries.
pub fn score(ws: &Workspace, out: &Path) -> Result<Outcome, StageError> {
    let staged = begin(out)?;
    let index = ws.prompt_index();
    let all: Vec<ResponseRecord> = ws.responses.iter().flatten().cloned().collect();
    let rows = score_slices(&ws.prompts, &all).at(Stage::Score, ErrorKind::Data)?;
    staged
        .write(
            "scores.csv",
            csv_string(|w| write_score_csv(w, &rows)).at(Stage::Write, ErrorKind::Data)?,
        )
        .at(Stage::Write, ErrorKind::Data)?;

    let grouping = Grouping::default();
    let mut hists = Vec::new();
    for (m, rs) in ws.models.iter().zip(&ws.responses) {
        for dim in &ws.dims {
            for kind in [ContextKind::Ambiguous, ContextKind::ForcedChoice] {
                let pairs: Vec<_> = rs
                    .iter()
                    .map(|r| (r, index[r.prompt_id.as_str()]))
                    .filter(|(_, p)| &p.dimension == dim && p.context_kind == kind)
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                hists.push(LabelledHistogram {
                    model_id: m.id.clone(),
                    dimension: dim.as_str().to_string(),
                    context_kind: kind.to_string(),
                    histogram: histogram(pairs, &grouping),
                });
            }
        }
    }
    staged
        .write(
            "histograms.csv",
            csv_string(|w| write_histogram_csv(w, &hists)).at(Stage::Write, ErrorKind::Data)?,
        )
        .at(Stage::Write, ErrorKind::Data)?;

    let mut flips = Vec::new();
    for (i, base) in ws.models.iter().enumerate() {
        if base.tuned {
            continue;
        }
        for (j, tuned) in ws.models.iter().enumerate() {
            if !base.is_base_tuned_pair(tuned) {
                continue;
            }
            for dim in &ws.dims {
                let slice = |rs: &[ResponseRecord]| -> Vec<ResponseRecord> {
                    rs.iter()
                        .filter(|r| {
                            let p = index[r.prompt_id.as_str()];
                            &p.dimension == dim
                                && p.dataset == Dataset::Bbq
                                && p.context_kind == ContextKind::Ambiguous
                        })
                        .cloned()
                        .collect()
                };
                let (b, t) = (slice(&ws.responses[i]), slice(&ws.responses[j]));
                if b.is_empty() && t.is_empty() {
                    continue;
                }
                let table = flip_table(&b, &t, dim.clone())
                    .with_context(|| format!("flip table {} -> {} on {dim}", base.id, tuned.id))
                    .at(Stage::Score, ErrorKind::Data)?;
                flips.push(table);
            }
        }
    }
    staged
        .write(
            "flips.csv",
            csv_string(|w| write_flip_csv(w, &flips)).at(Stage::Write, ErrorKind::Data)?,
        )
        .at(Stage::Write, ErrorKind::Data)?;

    if !ws.completions.is_empty() {
        let summary =
            sentiment_summary(&ws.completions, &ws.lexicon).at(Stage::Score, ErrorKind::Data)?;
        staged
            .write(
                "sentiment.csv",
                csv_string(|w| write_sentiment_csv(w, &summary))
                    .at(Stage::Write, ErrorKind::Data)?,
            )
            .at(Stage::Write, ErrorKind::Data)?;
        staged
            .write(
                "failures.csv",
                csv_string(|w| write_failure_csv(w, &summary)).at(Stage::Write, ErrorKind::Data)?,
            )
            .at(Stage::Write, ErrorKind::Data)?;
    }

    let summary = json!({
        "models": ws.models.iter().map(|m| &m.id).collect::<Vec<_>>(),
        "dimensions": ws.dims.iter().map(|d| d.as_str()).collect::<Vec<_>>(),
        "prompts": ws.prompts.len(),
        "responses": ws.models.iter().zip(&ws.responses)
            .map(|(m, rs)| (m.id.clone(), json!(rs.len())))
            .collect::<serde_json::Map<_, _>>(),
        "lexicon_version": ws.lexicon.version(),
        "slices": rows.len(),
        "flip_tables": flips.len(),
    });
    staged
        .write("summary.json", pretty_json(&summary))
        .at(Stage::Write, ErrorKind::Data)?;
    let dest = finish(staged)?;
    Ok(Outcome::ok(format!(
        "scored {} model(s) over {} slice(s) into {}",
        ws.models.len(),
        rows.len(),
        dest.display()
    )))
}

/// Which pairs `compare` handles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairSelection {
    All,
    Pair(String, String),
}

impl std::str::FromStr for PairSelection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "@all" {
            return Ok(PairSelection::All);
        }
        match s.split_once(',') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => {
                Ok(PairSelection::Pair(a.trim().into(), b.trim().into()))
            }
            _ => Err(format!("expected `@all` or `MODEL_A,MODEL_B`, got `{s}`")),
        }
    }
}

fn pair_name(a: &str, b: &str) -> String {
    format!("{}__{}", safe_name(a), safe_name(b))
}

/// Pairwise signatures plus, for `@all`, one matrix per metric.
pub fn compare(
    ws: &Workspace,
    selection: &PairSelection,
    out: &Path,
) -> Result<Outcome, StageError> {
    let staged = begin(out)?;
    let bundles = ws.bundles(Stage::Compare)?;
    let mut written = 0;
    let mut cka_pairs = Vec::new();
    match selection {
        PairSelection::Pair(a, b) => {
            let (i, j) = (ws.position(a)?, ws.position(b)?);
            let sig = pair_signature(&bundles[i], &bundles[j], &ws.dims)
                .at(Stage::Compare, ErrorKind::Data)?;
            staged
                .write(
                    format!("signatures/{}.json", pair_name(a, b)),
                    pretty_json(&sig.to_json()),
                )
                .at(Stage::Write, ErrorKind::Data)?;
            written += 1;
            cka_pairs.push((i, j));
        }
        PairSelection::All => {
            let grid = signature_grid(&bundles, &ws.dims).at(Stage::Compare, ErrorKind::Data)?;
            for (i, row) in grid.iter().enumerate() {
                for (j, sig) in row.iter().enumerate().skip(i + 1) {
                    staged
                        .write(
                            format!("signatures/{}.json", pair_name(&sig.model_i, &sig.model_j)),
                            pretty_json(&sig.to_json()),
                        )
                        .at(Stage::Write, ErrorKind::Data)?;
                    written += 1;
                    cka_pairs.push((i, j));
                }
            }
            for selector in MetricSelector::all() {
                let m = matrix_from_grid(&grid, selector);
                let bytes = csv_string(|w| m.write_csv(w)).at(Stage::Write, ErrorKind::Data)?;
                staged
                    .write(format!("matrices/{}.csv", m.metric), bytes)
                    .at(Stage::Write, ErrorKind::Data)?;
                staged
                    .write(
                        format!("matrices/{}.absent.json", m.metric),
                        pretty_json(&m.absence_json()),
                    )
                    .at(Stage::Write, ErrorKind::Data)?;
            }
        }
    }
    for (i, j) in cka_pairs {
        let (Some(x), Some(y)) = (&ws.activations[i], &ws.activations[j]) else {
            continue;
        };
        let matrix = layer_matrix(x, y)
            .with_context(|| format!("layer CKA {} vs {}", ws.models[i].id, ws.models[j].id))
            .at(Stage::Compare, ErrorKind::Data)?;
        let bytes =
            csv_string(|w| write_layer_matrix_csv(w, &matrix)).at(Stage::Write, ErrorKind::Data)?;
        staged
            .write(
                format!("cka/{}.csv", pair_name(&ws.models[i].id, &ws.models[j].id)),
                bytes,
            )
            .at(Stage::Write, ErrorKind::Data)?;
    }
    let dest = finish(staged)?;
    Ok(Outcome::ok(format!(
        "wrote {written} signature(s) into {}",
        dest.display()
    )))
}

/// Audit workflows.
#[derive(Debug, Clone, PartialEq)]
pub enum AuditWorkflow {
    Procure {
        policy: Option<PathBuf>,
    },
    Regress {
        old: Option<String>,
        new: Option<String>,
        tolerances: Option<PathBuf>,
    },
    Lineage {
        threshold: Option<f64>,
    },
}

fn required<T>(value: Option<T>, what: &str) -> Result<T, StageError> {
    value.ok_or_else(|| {
        StageError::config(
            Stage::Config,
            anyhow!("{what} is required (flag or [audit] config)"),
        )
    })
}

/// Runs one audit workflow. Reports are always written; a failing verdict
/// is signalled through the exit code.
pub fn audit(ws: &Workspace, workflow: &AuditWorkflow, out: &Path) -> Result<Outcome, StageError> {
    let cfg = &ws.config.audit;
    let staged = begin(out)?;
    let bundles = ws.bundles(Stage::Audit)?;
    let (stem, report, failed, message) = match workflow {
        AuditWorkflow::Procure { policy } => {
            let path = required(
                policy.clone().or_else(|| cfg.policy.clone()),
                "procurement policy",
            )?;
            let policy =
                ProcurementPolicy::from_file(&path).at(Stage::Config, ErrorKind::Config)?;
            let candidates: Vec<CandidateMetrics> =
                bundles.iter().map(CandidateMetrics::from_bundle).collect();
            let outcome =
                procurement_rank(&candidates, &policy).at(Stage::Audit, ErrorKind::Data)?;
            let report = render_procurement(&outcome).at(Stage::Audit, ErrorKind::Data)?;
            let ranked: Vec<&str> = outcome.ranked.iter().map(|c| c.model_id.as_str()).collect();
            let failed = ranked.is_empty();
            let message = if failed {
                "procurement: every candidate was excluded".to_string()
            } else {
                format!("procurement ranking: {}", ranked.join(" > "))
            };
            ("procurement", report, failed, message)
        }
        AuditWorkflow::Regress {
            old,
            new,
            tolerances,
        } => {
            let old = required(old.clone().or_else(|| cfg.old.clone()), "old model")?;
            let new = required(new.clone().or_else(|| cfg.new.clone()), "new model")?;
            let path = required(
                tolerances.clone().or_else(|| cfg.tolerances.clone()),
                "tolerances",
            )?;
            let tol = Tolerances::from_file(&path).at(Stage::Config, ErrorKind::Config)?;
            let (i, j) = (ws.position(&old)?, ws.position(&new)?);
            let drift = regression_check(&bundles[i], &bundles[j], &tol)
                .at(Stage::Audit, ErrorKind::Data)?;
            let failed = drift.overall == Verdict::Fail;
            let message = format!("regression {old} -> {new}: {}", drift.overall);
            ("regression", render_drift(&drift), failed, message)
        }
        AuditWorkflow::Lineage { threshold } => {
            let threshold = threshold
                .or(cfg.lineage_threshold)
                .unwrap_or(DEFAULT_LINEAGE_THRESHOLD);
            let grid = signature_grid(&bundles, &ws.dims).at(Stage::Audit, ErrorKind::Data)?;
            let flags =
                lineage_screen(&grid, &ws.models, threshold).at(Stage::Audit, ErrorKind::Config)?;
            let failed = !flags.is_empty();
            let message = format!(
                "lineage: {} flagged pair(s) at threshold {threshold}",
                flags.len()
            );
            (
                "lineage",
                render_lineage(&flags, threshold),
                failed,
                message,
            )
        }
    };
    staged
        .write(format!("{stem}.csv"), report.csv)
        .at(Stage::Write, ErrorKind::Data)?;
    staged
        .write(format!("{stem}.json"), report.json)
        .at(Stage::Write, ErrorKind::Data)?;
    finish(staged)?;
    Ok(Outcome {
        exit_code: if failed { EXIT_AUDIT_FAIL } else { 0 },
        message,
    })
}

/// Parses every configured input leniently and reports all rejected lines.
pub fn validate(config: &RunConfig) -> Result<Outcome, StageError> {
    let mut lines = Vec::new();
    let mut rejects = 0usize;
    let mut prompt_ids: HashMap<String, ()> = HashMap::new();
    for (path, ds) in [
        (&config.bbq, Dataset::Bbq),
        (&config.unqover, Dataset::Unqover),
    ] {
        let Some(path) = path else { continue };
        let report = read_prompts_lenient(path, Some(ds)).at(Stage::Load, ErrorKind::Data)?;
        lines.push(format!(
            "{}: {} prompt(s), {} reject(s)",
            path.display(),
            report.records.len(),
            report.rejects.len()
        ));
        lines.extend(report.rejects.iter().map(|e| format!("  {e}")));
        rejects += report.rejects.len();
        prompt_ids.extend(report.records.into_iter().map(|p| (p.prompt_id, ())));
    }
    for (model, path) in &config.responses {
        let report = read_responses_lenient(path).at(Stage::Load, ErrorKind::Data)?;
        let mut problems: Vec<String> = report.rejects.iter().map(|e| format!("  {e}")).collect();
        for (line, r) in &report.records {
            if &r.model_id != model {
                problems.push(format!(
                    "  {}:{line}: model `{}` != `{model}`",
                    path.display(),
                    r.model_id
                ));
            }
            if !prompt_ids.contains_key(&r.prompt_id) {
                problems.push(format!(
                    "  {}:{line}: unknown prompt `{}`",
                    path.display(),
                    r.prompt_id
                ));
            }
        }
        lines.push(format!(
            "{}: {} response(s), {} problem(s)",
            path.display(),
            report.records.len(),
            problems.len()
        ));
        rejects += problems.len();
        lines.extend(problems);
    }
    bsm_core::loader::load_manifest(&config.manifest).at(Stage::Load, ErrorKind::Config)?;
    let message = lines.join("\n");
    if rejects > 0 {
        return Err(StageError::data(
            Stage::Load,
            anyhow!("{rejects} problem(s) found\n{message}"),
        ));
    }
    Ok(Outcome::ok(message))
}
