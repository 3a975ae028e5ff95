//! Answer-category histograms and the distances between them: cosine on raw
//! counts, Jensen-Shannon divergence (base 2) and total variation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::model::{PromptRecord, ResponseRecord, Role};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DistError {
    #[error("vector has no positive mass and cannot be compared")]
    ZeroVector,
    #[error("category keys differ: {left:?} vs {right:?}")]
    KeyMismatch {
        left: Vec<String>,
        right: Vec<String>,
    },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Per-category counts with keys in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountVector {
    pub keys: Vec<String>,
    pub counts: Vec<u64>,
    pub n_invalid: u64,
}

impl CountVector {
    pub fn from_map(map: BTreeMap<String, u64>, n_invalid: u64) -> Self {
        let (keys, counts) = map.into_iter().unzip();
        Self {
            keys,
            counts,
            n_invalid,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Distances are only defined for vectors with some positive count.
    pub fn is_comparable(&self) -> bool {
        self.total() > 0
    }

    pub fn get(&self, key: &str) -> u64 {
        self.keys
            .binary_search_by(|k| k.as_str().cmp(key))
            .map(|i| self.counts[i])
            .unwrap_or(0)
    }

    /// Re-expresses the vector over `keys` (sorted), filling absent keys
    /// with zero.
    pub fn reindex(&self, keys: &[String]) -> Self {
        Self {
            keys: keys.to_vec(),
            counts: keys.iter().map(|k| self.get(k)).collect(),
            n_invalid: self.n_invalid,
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn distribution(&self) -> Result<Vec<f64>, DistError> {
        normalize(&self.as_f64())
    }
}

/// Both vectors re-expressed over the sorted union of their keys.
pub fn align(u: &CountVector, v: &CountVector) -> (CountVector, CountVector) {
    let mut keys: Vec<String> = u.keys.iter().chain(&v.keys).cloned().collect();
    keys.sort();
    keys.dedup();
    (u.reindex(&keys), v.reindex(&keys))
}

/// How answers are bucketed into histogram categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Grouping {
    /// Named category per role, e.g. S to "male", A to "female".
    ByRole(BTreeMap<Role, String>),
    /// The literal text of the chosen candidate.
    ByCandidateText,
}

impl Default for Grouping {
    fn default() -> Self {
        Grouping::ByRole(
            [
                (Role::Stereotype, "stereotype".to_string()),
                (Role::AntiStereotype, "anti_stereotype".to_string()),
                (Role::Unknown, "unknown".to_string()),
            ]
            .into_iter()
            .collect(),
        )
    }
}

/// Tallies responses into categories. Every category the grouping can
/// produce for the given prompts appears as a key, even with zero count.
pub fn histogram<'a, I>(pairs: I, grouping: &Grouping) -> CountVector
where
    I: IntoIterator<Item = (&'a ResponseRecord, &'a PromptRecord)>,
{
    let mut map: BTreeMap<String, u64> = BTreeMap::new();
    if let Grouping::ByRole(names) = grouping {
        for name in names.values() {
            map.entry(name.clone()).or_insert(0);
        }
    }
    let mut n_invalid = 0;
    for (resp, prompt) in pairs {
        if let Grouping::ByCandidateText = grouping {
            for c in &prompt.candidates {
                map.entry(c.text.clone()).or_insert(0);
            }
        }
        let Some(role) = resp.label.role() else {
            n_invalid += 1;
            continue;
        };
        let key = match grouping {
            Grouping::ByRole(names) => names.get(&role).cloned(),
            Grouping::ByCandidateText => prompt.candidate(role).map(|c| c.text.clone()),
        };
        match key {
            Some(k) => *map.entry(k).or_insert(0) += 1,
            None => n_invalid += 1,
        }
    }
    CountVector::from_map(map, n_invalid)
}

fn check_keys(u: &CountVector, v: &CountVector) -> Result<(), DistError> {
    if u.keys != v.keys {
        return Err(DistError::KeyMismatch {
            left: u.keys.clone(),
            right: v.keys.clone(),
        });
    }
    Ok(())
}

/// Scales non-negative weights to sum to one.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>, DistError> {
    let total: f64 = v.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(DistError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / total).collect())
}

/// `1 - u.v / (|u| |v|)` on raw weights, clamped to `[0, 1]`.
pub fn cosine_distance_raw(u: &[f64], v: &[f64]) -> Result<f64, DistError> {
    if u.len() != v.len() {
        return Err(DistError::LengthMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(DistError::ZeroVector);
    }
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 1.0))
}

/// Jensen-Shannon divergence with base-2 logarithms; inputs are normalized
/// here, so raw counts are accepted.
pub fn jsd_raw(p: &[f64], q: &[f64]) -> Result<f64, DistError> {
    if p.len() != q.len() {
        return Err(DistError::LengthMismatch(p.len(), q.len()));
    }
    let p = normalize(p)?;
    let q = normalize(q)?;
    let term = |x: f64, m: f64| {
        if x > 0.0 {
            0.5 * x * (x / m).log2()
        } else {
            0.0
        }
    };
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        acc += term(a, m) + term(b, m);
    }
    Ok(acc.clamp(0.0, 1.0))
}

/// Half the L1 distance between the normalized inputs.
pub fn tv_distance_raw(p: &[f64], q: &[f64]) -> Result<f64, DistError> {
    if p.len() != q.len() {
        return Err(DistError::LengthMismatch(p.len(), q.len()));
    }
    let p = normalize(p)?;
    let q = normalize(q)?;
    let l1: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * l1).clamp(0.0, 1.0))
}

pub fn cosine_distance(u: &CountVector, v: &CountVector) -> Result<f64, DistError> {
    check_keys(u, v)?;
    cosine_distance_raw(&u.as_f64(), &v.as_f64())
}

pub fn jsd(u: &CountVector, v: &CountVector) -> Result<f64, DistError> {
    check_keys(u, v)?;
    jsd_raw(&u.as_f64(), &v.as_f64())
}

pub fn tv_distance(u: &CountVector, v: &CountVector) -> Result<f64, DistError> {
    check_keys(u, v)?;
    tv_distance_raw(&u.as_f64(), &v.as_f64())
}

/// A histogram labelled with the slice it was computed on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelledHistogram {
    pub model_id: String,
    pub dimension: String,
    pub context_kind: String,
    pub histogram: CountVector,
}

/// Long-format CSV: one `category,count` line per slice and category.
pub fn write_histogram_csv<W: Write>(w: W, hists: &[LabelledHistogram]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model_id", "dimension", "context_kind", "category", "count"])?;
    for h in hists {
        for (k, c) in h.histogram.keys.iter().zip(&h.histogram.counts) {
            out.write_record([
                h.model_id.as_str(),
                h.dimension.as_str(),
                h.context_kind.as_str(),
                k.as_str(),
                &c.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Candidate, ContextKind, Dataset, Dimension, Label, NormMethod};

    fn cv(pairs: &[(&str, u64)]) -> CountVector {
        CountVector::from_map(pairs.iter().map(|(k, c)| (k.to_string(), *c)).collect(), 0)
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_distance_raw(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let d = cosine_distance_raw(&[3.0, 1.0], &[1.0, 3.0]).unwrap();
        assert!((d - 0.4).abs() < 1e-12);
        let u = cv(&[("a", 3), ("b", 4)]);
        assert!(cosine_distance(&u, &u).unwrap() < 1e-15);
        assert_eq!(
            cosine_distance_raw(&[0.0, 0.0], &[1.0, 0.0]),
            Err(DistError::ZeroVector)
        );
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd_raw(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let d = jsd_raw(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((d - 0.3113).abs() < 1e-4, "{d}");
        assert_eq!(jsd_raw(&[2.0, 2.0], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance_raw(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(tv_distance_raw(&[0.75, 0.25], &[0.25, 0.75]).unwrap(), 0.5);
    }

    #[test]
    fn key_mismatch_is_error() {
        let u = cv(&[("a", 1)]);
        let v = cv(&[("b", 1)]);
        assert!(matches!(jsd(&u, &v), Err(DistError::KeyMismatch { .. })));
        let (u2, v2) = align(&u, &v);
        assert_eq!(u2.keys, ["a", "b"]);
        assert_eq!(tv_distance(&u2, &v2).unwrap(), 1.0);
    }

    #[test]
    fn histogram_with_named_roles() {
        let prompt = PromptRecord {
            prompt_id: "p".into(),
            dataset: Dataset::Bbq,
            dimension: Dimension::Gender,
            context_kind: ContextKind::Ambiguous,
            candidates: vec![
                Candidate {
                    text: "he".into(),
                    role: Role::Stereotype,
                },
                Candidate {
                    text: "she".into(),
                    role: Role::AntiStereotype,
                },
                Candidate {
                    text: "unknown".into(),
                    role: Role::Unknown,
                },
            ],
            gold_role: None,
        };
        let rs: Vec<ResponseRecord> = [Label::S, Label::A, Label::U, Label::U, Label::Invalid]
            .iter()
            .map(|&label| ResponseRecord {
                model_id: "m".into(),
                prompt_id: "p".into(),
                raw_text: String::new(),
                label,
                norm_method: NormMethod::Exact,
            })
            .collect();
        let grouping = Grouping::ByRole(
            [
                (Role::Stereotype, "male".to_string()),
                (Role::AntiStereotype, "female".to_string()),
                (Role::Unknown, "unknown".to_string()),
            ]
            .into_iter()
            .collect(),
        );
        let h = histogram(rs.iter().map(|r| (r, &prompt)), &grouping);
        assert_eq!(h.keys, ["female", "male", "unknown"]);
        assert_eq!(h.counts, [1, 1, 2]);
        assert_eq!(h.n_invalid, 1);

        let by_text = histogram(rs.iter().map(|r| (r, &prompt)), &Grouping::ByCandidateText);
        assert_eq!(by_text.keys, ["he", "she", "unknown"]);
        assert_eq!(by_text.counts, [1, 1, 2]);

        let empty = histogram(std::iter::empty(), &Grouping::default());
        assert!(!empty.is_comparable());
        assert_eq!(empty.counts, [0, 0, 0]);
    }
}
