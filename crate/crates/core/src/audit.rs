//! Audit workflows over metric bundles: procurement down-selection, release
//! regression checks and lineage screening, plus their report formats.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{Dimension, ModelDescriptor};
use crate::repr::{diag_cka, ReprError};
use crate::scalar::fmt_float;
use crate::signature::{lineage_distance, BiasSignature, MetricBundle, SignatureError};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("lineage threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error("nothing to report: the model set is empty")]
    Empty,
    #[error("`{old}` and `{new}` were evaluated on different {dimension} prompt sets")]
    FixtureMismatch {
        old: String,
        new: String,
        dimension: Dimension,
    },
    #[error(transparent)]
    Signature(#[from] SignatureError),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AuditError> {
    let fail = |message: String| AuditError::Config {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    toml::from_str(&text).map_err(|e| fail(e.to_string()))
}

/// Ranking criteria, applied lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    AccuracyDesc,
    AbsBiasAsc,
    AbstentionAsc,
}

fn default_ranking() -> Vec<RankKey> {
    vec![
        RankKey::AccuracyDesc,
        RankKey::AbsBiasAsc,
        RankKey::AbstentionAsc,
    ]
}

/// Thresholds are inclusive on the compliant side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcurementPolicy {
    pub max_abstention: f64,
    /// Largest tolerated mean |s_amb| across the evaluated dimensions.
    pub max_abs_bias: f64,
    pub min_accuracy: f64,
    #[serde(default = "default_ranking")]
    pub ranking: Vec<RankKey>,
}

impl ProcurementPolicy {
    pub fn validate(&self) -> Result<(), AuditError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(AuditError::Policy(format!(
                    "{name} = {v} must lie in [0, 1]"
                )))
            }
        };
        unit("max_abstention", self.max_abstention)?;
        unit("min_accuracy", self.min_accuracy)?;
        if !(0.0..=100.0).contains(&self.max_abs_bias) {
            return Err(AuditError::Policy(format!(
                "max_abs_bias = {} must lie in [0, 100]",
                self.max_abs_bias
            )));
        }
        if self.ranking.is_empty() {
            return Err(AuditError::Policy("ranking must not be empty".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, AuditError> {
        let p: Self = toml::from_str(text).map_err(|e| AuditError::Policy(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_file(path: &Path) -> Result<Self, AuditError> {
        let p: Self = read_toml(path)?;
        p.validate()?;
        Ok(p)
    }
}

/// The three quantities procurement looks at, averaged over dimensions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateMetrics {
    pub model_id: String,
    pub acc: Option<f64>,
    pub abs_bias: Option<f64>,
    pub abstention: Option<f64>,
}

impl CandidateMetrics {
    pub fn from_bundle(b: &MetricBundle) -> Self {
        Self {
            model_id: b.id().to_string(),
            acc: b.mean_acc(),
            abs_bias: b.mean_abs_s_amb(),
            abstention: b.mean_abstention(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exclusion {
    pub candidate: CandidateMetrics,
    /// Violated constraints among "abstention", "bias", "accuracy".
    pub reasons: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcurementOutcome {
    pub ranked: Vec<CandidateMetrics>,
    pub excluded: Vec<Exclusion>,
}

fn cmp_key(a: &CandidateMetrics, b: &CandidateMetrics, key: RankKey) -> Ordering {
    let f =
        |x: Option<f64>, y: Option<f64>| x.unwrap_or(f64::NAN).total_cmp(&y.unwrap_or(f64::NAN));
    match key {
        RankKey::AccuracyDesc => f(b.acc, a.acc),
        RankKey::AbsBiasAsc => f(a.abs_bias, b.abs_bias),
        RankKey::AbstentionAsc => f(a.abstention, b.abstention),
    }
}

/// Drops candidates that violate a threshold (an undefined metric counts as
/// a violation) and sorts the rest by the policy's ranking, ties broken by
/// model id.
pub fn procurement_rank(
    candidates: &[CandidateMetrics],
    policy: &ProcurementPolicy,
) -> Result<ProcurementOutcome, AuditError> {
    policy.validate()?;
    let mut ranked = Vec::new();
    let mut excluded = Vec::new();
    for c in candidates {
        let mut reasons = Vec::new();
        if c.abstention.is_none_or(|v| v > policy.max_abstention) {
            reasons.push("abstention");
        }
        if c.abs_bias.is_none_or(|v| v > policy.max_abs_bias) {
            reasons.push("bias");
        }
        if c.acc.is_none_or(|v| v < policy.min_accuracy) {
            reasons.push("accuracy");
        }
        if reasons.is_empty() {
            ranked.push(c.clone());
        } else {
            excluded.push(Exclusion {
                candidate: c.clone(),
                reasons,
            });
        }
    }
    ranked.sort_by(|a, b| {
        policy
            .ranking
            .iter()
            .map(|&k| cmp_key(a, b, k))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    excluded.sort_by(|a, b| a.candidate.model_id.cmp(&b.candidate.model_id));
    Ok(ProcurementOutcome { ranked, excluded })
}

/// Per-metric tolerances for release regression checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub acc: f64,
    pub s_dis: f64,
    pub s_amb: f64,
    pub abstention: f64,
    /// Tolerated representational drift, measured as `1 - diag_cka`.
    #[serde(default = "default_cka_tol")]
    pub diag_cka: f64,
}

fn default_cka_tol() -> f64 {
    0.05
}

impl Tolerances {
    pub fn validate(&self) -> Result<(), AuditError> {
        for (name, v) in [
            ("acc", self.acc),
            ("s_dis", self.s_dis),
            ("s_amb", self.s_amb),
            ("abstention", self.abstention),
            ("diag_cka", self.diag_cka),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AuditError::Policy(format!(
                    "tolerance {name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, AuditError> {
        let t: Self = toml::from_str(text).map_err(|e| AuditError::Policy(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn from_file(path: &Path) -> Result<Self, AuditError> {
        let t: Self = read_toml(path)?;
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Warn,
    Fail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Warn => "warn",
            Verdict::Fail => "fail",
        })
    }
}

/// Band a delta against its tolerance: within 1x passes, within 2x warns.
/// Boundaries are inclusive, with a few ulps of slack so that a delta equal
/// to the tolerance in decimal is not failed by binary rounding.
pub fn verdict_for(delta: f64, tol: f64) -> Verdict {
    let slack = 1e-12 * tol.abs().max(1.0);
    let d = delta.abs();
    if d <= tol + slack {
        Verdict::Pass
    } else if d <= 2.0 * tol + slack {
        Verdict::Warn
    } else {
        Verdict::Fail
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftRow {
    /// `None` for model-level rows such as representational drift.
    pub dimension: Option<Dimension>,
    pub metric: &'static str,
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub delta: Option<f64>,
    pub tolerance: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub old_model: String,
    pub new_model: String,
    pub rows: Vec<DriftRow>,
    pub overall: Verdict,
}

/// Compares a new release against an old one on the same prompt fixture.
/// A metric defined on one side only fails; undefined on both is skipped.
pub fn regression_check(
    old: &MetricBundle,
    new: &MetricBundle,
    tol: &Tolerances,
) -> Result<DriftReport, AuditError> {
    tol.validate()?;
    let mut rows = Vec::new();
    for (dim, o) in &old.dims {
        let Some(n) = new.dims.get(dim) else {
            return Err(AuditError::FixtureMismatch {
                old: old.id().into(),
                new: new.id().into(),
                dimension: dim.clone(),
            });
        };
        if o.prompt_digest != n.prompt_digest {
            return Err(AuditError::FixtureMismatch {
                old: old.id().into(),
                new: new.id().into(),
                dimension: dim.clone(),
            });
        }
        for (metric, a, b, t) in [
            ("acc", o.acc, n.acc, tol.acc),
            ("s_dis", o.s_dis, n.s_dis, tol.s_dis),
            ("s_amb", o.s_amb, n.s_amb, tol.s_amb),
            ("abstention", o.abstention, n.abstention, tol.abstention),
        ] {
            let (delta, verdict) = match (a, b) {
                (Some(a), Some(b)) => (Some(b - a), verdict_for(b - a, t)),
                (None, None) => continue,
                _ => (None, Verdict::Fail),
            };
            rows.push(DriftRow {
                dimension: Some(dim.clone()),
                metric,
                old: a,
                new: b,
                delta,
                tolerance: t,
                verdict,
            });
        }
    }
    if let (Some(a), Some(b)) = (&old.activations, &new.activations) {
        let cka = diag_cka(a, b)?;
        let drift = cka.map(|c| 1.0 - c);
        rows.push(DriftRow {
            dimension: None,
            metric: "diag_cka",
            old: Some(1.0),
            new: cka,
            delta: drift,
            tolerance: tol.diag_cka,
            verdict: drift.map_or(Verdict::Fail, |d| verdict_for(d, tol.diag_cka)),
        });
    }
    let overall = rows
        .iter()
        .map(|r| r.verdict)
        .max()
        .unwrap_or(Verdict::Pass);
    Ok(DriftReport {
        old_model: old.id().into(),
        new_model: new.id().into(),
        rows,
        overall,
    })
}

pub const DEFAULT_LINEAGE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineageFlag {
    pub model_a: String,
    pub model_b: String,
    pub distance: f64,
}

/// Unordered pairs whose signature lies within `threshold` of perfect
/// self-similarity, excluding declared base/tuned pairs. Sorted by distance,
/// then by ids.
pub fn lineage_screen(
    grid: &[Vec<BiasSignature>],
    models: &[ModelDescriptor],
    threshold: f64,
) -> Result<Vec<LineageFlag>, AuditError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(AuditError::Threshold(threshold));
    }
    if models.len() < 2 {
        return Err(SignatureError::TooFewModels(models.len()).into());
    }
    let mut flags = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            if models[i].is_base_tuned_pair(&models[j]) {
                continue;
            }
            let d = lineage_distance(&grid[i][j])?;
            if d < threshold {
                let (a, b) = if models[i].id <= models[j].id {
                    (&models[i].id, &models[j].id)
                } else {
                    (&models[j].id, &models[i].id)
                };
                flags.push(LineageFlag {
                    model_a: a.clone(),
                    model_b: b.clone(),
                    distance: d,
                });
            }
        }
    }
    flags.sort_by(|x, y| {
        x.distance
            .total_cmp(&y.distance)
            .then_with(|| x.model_a.cmp(&y.model_a))
            .then_with(|| x.model_b.cmp(&y.model_b))
    });
    Ok(flags)
}

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("utf-8 input")
}

/// A report rendered as CSV and JSON text. Ordering and number formatting
/// are fixed, so identical inputs give identical bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub csv: String,
    pub json: String,
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn render_procurement(outcome: &ProcurementOutcome) -> Result<RenderedReport, AuditError> {
    if outcome.ranked.is_empty() && outcome.excluded.is_empty() {
        return Err(AuditError::Empty);
    }
    let mut rows = vec![vec![
        "rank",
        "model_id",
        "acc",
        "abs_bias",
        "abstention",
        "status",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>()];
    for (i, c) in outcome.ranked.iter().enumerate() {
        rows.push(vec![
            (i + 1).to_string(),
            c.model_id.clone(),
            fmt_float(c.acc),
            fmt_float(c.abs_bias),
            fmt_float(c.abstention),
            "selected".into(),
        ]);
    }
    for e in &outcome.excluded {
        let c = &e.candidate;
        rows.push(vec![
            String::new(),
            c.model_id.clone(),
            fmt_float(c.acc),
            fmt_float(c.abs_bias),
            fmt_float(c.abstention),
            format!("excluded:{}", e.reasons.join("+")),
        ]);
    }
    Ok(RenderedReport {
        csv: csv_string(rows),
        json: pretty(&serde_json::to_value(outcome).expect("serializable")),
    })
}

pub fn render_drift(report: &DriftReport) -> RenderedReport {
    let mut rows = vec![[
        "dimension",
        "metric",
        "old",
        "new",
        "delta",
        "tolerance",
        "verdict",
    ]
    .map(String::from)
    .to_vec()];
    for r in &report.rows {
        rows.push(vec![
            r.dimension.as_ref().map_or("*".into(), |d| d.to_string()),
            r.metric.into(),
            fmt_float(r.old),
            fmt_float(r.new),
            fmt_float(r.delta),
            fmt_float(Some(r.tolerance)),
            r.verdict.to_string(),
        ]);
    }
    RenderedReport {
        csv: csv_string(rows),
        json: pretty(&serde_json::to_value(report).expect("serializable")),
    }
}

pub fn render_lineage(flags: &[LineageFlag], threshold: f64) -> RenderedReport {
    let mut rows = vec![["model_a", "model_b", "distance"]
        .map(String::from)
        .to_vec()];
    for f in flags {
        rows.push(vec![
            f.model_a.clone(),
            f.model_b.clone(),
            fmt_float(Some(f.distance)),
        ]);
    }
    RenderedReport {
        csv: csv_string(rows),
        json: pretty(&json!({"threshold": threshold, "flagged": flags})),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: &str, acc: f64, bias: f64, abst: f64) -> CandidateMetrics {
        CandidateMetrics {
            model_id: id.into(),
            acc: Some(acc),
            abs_bias: Some(bias),
            abstention: Some(abst),
        }
    }

    fn policy(max_abstention: f64, max_abs_bias: f64, min_accuracy: f64) -> ProcurementPolicy {
        ProcurementPolicy {
            max_abstention,
            max_abs_bias,
            min_accuracy,
            ranking: default_ranking(),
        }
    }

    #[test]
    fn planted_candidates() {
        let cs = [
            cand("first", 0.9, 5.0, 0.1),
            cand("second", 0.95, 20.0, 0.1),
            cand("third", 0.9, 5.0, 0.3),
        ];
        let out = procurement_rank(&cs, &policy(1.0, 10.0, 0.0)).unwrap();
        let ids: Vec<_> = out.ranked.iter().map(|c| c.model_id.as_str()).collect();
        assert_eq!(ids, ["first", "third"]);
        assert_eq!(out.excluded[0].candidate.model_id, "second");
        assert_eq!(out.excluded[0].reasons, ["bias"]);
    }

    #[test]
    fn abstention_cap_excludes() {
        let cs = [cand("gpt", 0.9, 2.0, 0.41), cand("gemma", 0.85, 2.0, 0.2)];
        let out = procurement_rank(&cs, &policy(0.25, 100.0, 0.0)).unwrap();
        assert_eq!(out.ranked[0].model_id, "gemma");
        assert_eq!(out.excluded[0].reasons, ["abstention"]);
    }

    #[test]
    fn ties_break_on_id() {
        let cs = [
            cand("b", 0.5, 1.0, 0.1),
            cand("a", 0.5, 1.0, 0.1),
            cand("c", 0.5, 1.0, 0.1),
        ];
        let out = procurement_rank(&cs, &policy(1.0, 100.0, 0.0)).unwrap();
        let ids: Vec<_> = out.ranked.iter().map(|c| c.model_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn thresholds_are_inclusive() {
        let cs = [cand("x", 0.5, 10.0, 0.25)];
        let out = procurement_rank(&cs, &policy(0.25, 10.0, 0.5)).unwrap();
        assert_eq!(out.ranked.len(), 1);
    }

    #[test]
    fn verdict_bands() {
        assert_eq!(verdict_for(0.0, 3.0), Verdict::Pass);
        assert_eq!(verdict_for(3.0, 3.0), Verdict::Pass);
        assert_eq!(verdict_for(-5.0, 3.0), Verdict::Warn);
        assert_eq!(verdict_for(8.0, 3.0), Verdict::Fail);
        assert_eq!(verdict_for(0.35 - 0.30, 0.05), Verdict::Pass);
    }

    #[test]
    fn policy_parsing() {
        let p = ProcurementPolicy::from_toml_str(
            "max_abstention = 0.25\nmax_abs_bias = 10\nmin_accuracy = 0.5\n",
        )
        .unwrap();
        assert_eq!(p.ranking, default_ranking());
        assert!(ProcurementPolicy::from_toml_str(
            "max_abstention = 1.5\nmax_abs_bias = 10\nmin_accuracy = 0.5\n"
        )
        .is_err());
        assert!(ProcurementPolicy::from_toml_str(
            "max_abstention = 0.5\nmax_abs_bias = 10\nmin_accuracy = 0.5\nranking = []\n"
        )
        .is_err());
    }

    #[test]
    fn threshold_range() {
        assert!(matches!(
            lineage_screen(&[], &[], 0.0),
            Err(AuditError::Threshold(_))
        ));
        assert!(matches!(
            lineage_screen(&[], &[], 1.0),
            Err(AuditError::Threshold(_))
        ));
    }

    #[test]
    fn empty_report_is_error() {
        let out = ProcurementOutcome {
            ranked: vec![],
            excluded: vec![],
        };
        assert!(matches!(render_procurement(&out), Err(AuditError::Empty)));
    }
}
