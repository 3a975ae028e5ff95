//! Per-model metric bundles, the six-component pairwise similarity signature
//! and model-by-model similarity matrices.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dist::{align, cosine_distance, histogram, tv_distance, CountVector, Grouping};
use crate::model::{
    ContextKind, Dataset, Dimension, LabelCounts, ModelDescriptor, PromptRecord, ResponseRecord,
    Role, SliceKey,
};
use crate::repr::{diag_cka, full_cka, ActivationSet, ReprError};
use crate::scalar::{
    abstention_rate, accuracy, bias_score_amb, bias_score_dis, fmt_float, mean_present, MetricError,
};

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("no dimensions requested")]
    NoDimensions,
    #[error("need at least 2 models, got {0}")]
    TooFewModels(usize),
    #[error("`{a}` and `{b}` were evaluated on different {dimension} prompt sets")]
    PromptSetMismatch {
        a: String,
        b: String,
        dimension: Dimension,
    },
    #[error("no component is present in both signatures")]
    NothingComparable,
    #[error("response for unknown prompt `{0}`")]
    UnknownPrompt(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

/// Everything the signature needs from one model on one dimension.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimensionMetrics {
    /// Accuracy on disambiguated prompts.
    pub acc: Option<f64>,
    /// Directional score on disambiguated prompts.
    pub s_dis: Option<f64>,
    /// Accuracy-attenuated directional score on ambiguous prompts.
    pub s_amb: Option<f64>,
    /// Share of U among valid ambiguous answers.
    pub abstention: Option<f64>,
    pub amb_hist: CountVector,
    pub forced_choice: CountVector,
    pub n_invalid: u64,
    /// SHA-256 over the sorted prompt ids answered on this dimension.
    pub prompt_digest: String,
}

/// A model's metrics across dimensions plus optional activations.
#[derive(Debug, Clone, Serialize)]
pub struct MetricBundle {
    pub model: ModelDescriptor,
    pub dims: BTreeMap<Dimension, DimensionMetrics>,
    #[serde(skip)]
    pub activations: Option<Arc<ActivationSet>>,
}

fn hex_digest(ids: &mut [&str]) -> String {
    ids.sort_unstable();
    let mut h = Sha256::new();
    for id in ids.iter() {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn forced_choice_grouping() -> Grouping {
    Grouping::ByRole(
        [
            (Role::Stereotype, "stereotype".to_string()),
            (Role::AntiStereotype, "anti_stereotype".to_string()),
        ]
        .into_iter()
        .collect(),
    )
}

impl MetricBundle {
    /// Computes per-dimension metrics from one model's labelled responses.
    pub fn compute(
        model: ModelDescriptor,
        prompts: &HashMap<&str, &PromptRecord>,
        responses: &[ResponseRecord],
        dims: &[Dimension],
        activations: Option<Arc<ActivationSet>>,
    ) -> Result<Self, SignatureError> {
        let mut by_dim: BTreeMap<&Dimension, Vec<(&ResponseRecord, &PromptRecord)>> =
            BTreeMap::new();
        for r in responses {
            let p = prompts
                .get(r.prompt_id.as_str())
                .ok_or_else(|| SignatureError::UnknownPrompt(r.prompt_id.clone()))?;
            by_dim.entry(&p.dimension).or_default().push((r, p));
        }
        let mut out = BTreeMap::new();
        for dim in dims {
            let members = by_dim.get(dim).map(Vec::as_slice).unwrap_or(&[]);
            out.insert(dim.clone(), dimension_metrics(&model.id, dim, members)?);
        }
        Ok(Self {
            model,
            dims: out,
            activations,
        })
    }

    pub fn id(&self) -> &str {
        &self.model.id
    }

    fn mean_of(&self, f: impl Fn(&DimensionMetrics) -> Option<f64>) -> Option<f64> {
        mean_present(self.dims.values().map(f))
    }

    pub fn mean_acc(&self) -> Option<f64> {
        self.mean_of(|d| d.acc)
    }

    pub fn mean_s_dis(&self) -> Option<f64> {
        self.mean_of(|d| d.s_dis)
    }

    pub fn mean_s_amb(&self) -> Option<f64> {
        self.mean_of(|d| d.s_amb)
    }

    pub fn mean_abs_s_amb(&self) -> Option<f64> {
        self.mean_of(|d| d.s_amb.map(f64::abs))
    }

    pub fn mean_abstention(&self) -> Option<f64> {
        self.mean_of(|d| d.abstention)
    }
}

fn dimension_metrics(
    model_id: &str,
    dim: &Dimension,
    members: &[(&ResponseRecord, &PromptRecord)],
) -> Result<DimensionMetrics, SignatureError> {
    let pick = |ds: Dataset, kind: ContextKind| -> Vec<(&ResponseRecord, &PromptRecord)> {
        members
            .iter()
            .filter(|(_, p)| p.dataset == ds && p.context_kind == kind)
            .copied()
            .collect()
    };
    let counts_of = |rows: &[(&ResponseRecord, &PromptRecord)], ds, kind| {
        let mut c = LabelCounts::empty(SliceKey {
            model_id: model_id.to_string(),
            dataset: ds,
            dimension: dim.clone(),
            context_kind: kind,
        });
        for (r, _) in rows {
            c.add(r.label);
        }
        c
    };

    let dis = pick(Dataset::Bbq, ContextKind::Disambiguated);
    let amb = pick(Dataset::Bbq, ContextKind::Ambiguous);
    let fc = pick(Dataset::Unqover, ContextKind::ForcedChoice);

    let dis_counts = counts_of(&dis, Dataset::Bbq, ContextKind::Disambiguated);
    let amb_counts = counts_of(&amb, Dataset::Bbq, ContextKind::Ambiguous);
    let acc = accuracy(dis.iter().copied())?;
    let s_dis = bias_score_dis(&dis_counts);
    let abstention = abstention_rate(&amb_counts);
    let s_amb = match abstention {
        Some(acc_amb) => bias_score_amb(acc_amb, bias_score_dis(&amb_counts))?,
        None => None,
    };
    let amb_hist = histogram(amb.iter().copied(), &Grouping::default());
    let forced_choice = histogram(fc.iter().copied(), &forced_choice_grouping());
    let n_invalid = members
        .iter()
        .filter(|(r, _)| r.label.role().is_none())
        .count() as u64;
    let mut ids: Vec<&str> = members.iter().map(|(r, _)| r.prompt_id.as_str()).collect();
    Ok(DimensionMetrics {
        acc,
        s_dis,
        s_amb,
        abstention,
        amb_hist,
        forced_choice,
        n_invalid,
        prompt_digest: hex_digest(&mut ids),
    })
}

/// Names of the six signature components, in output order.
pub const COMPONENTS: [&str; 6] = [
    "acc_sim",
    "bias_sim",
    "hist_sim",
    "cosine_sim",
    "behavior_sim",
    "repr_sim",
];

/// Pairwise similarity vector; each component is in `[0, 1]` or absent
/// with a recorded reason.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSignature {
    pub model_i: String,
    pub model_j: String,
    pub dimensions: Vec<Dimension>,
    pub values: [Option<f64>; 6],
    pub reasons: [Option<String>; 6],
}

impl BiasSignature {
    /// The signature of a model with itself: every component equal to one.
    pub fn identity() -> Self {
        Self {
            model_i: String::new(),
            model_j: String::new(),
            dimensions: Vec::new(),
            values: [Some(1.0); 6],
            reasons: Default::default(),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        COMPONENTS
            .iter()
            .position(|c| *c == name)
            .and_then(|i| self.values[i])
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(Option::is_none)
    }

    pub fn to_json(&self) -> Value {
        let mut components = serde_json::Map::new();
        let mut absent = serde_json::Map::new();
        for (k, name) in COMPONENTS.iter().enumerate() {
            components.insert(
                name.to_string(),
                self.values[k].map_or(Value::Null, |v| json!(v)),
            );
            if let Some(r) = &self.reasons[k] {
                absent.insert(name.to_string(), json!(r));
            }
        }
        json!({
            "pair": [self.model_i, self.model_j],
            "dimensions": self.dimensions.iter().map(Dimension::as_str).collect::<Vec<_>>(),
            "components": components,
            "absent": absent,
        })
    }
}

fn averaged<F>(
    a: &MetricBundle,
    b: &MetricBundle,
    dims: &[Dimension],
    f: F,
) -> Result<Option<f64>, SignatureError>
where
    F: Fn(&DimensionMetrics, &DimensionMetrics) -> Result<Option<f64>, SignatureError>,
{
    let mut vals = Vec::with_capacity(dims.len());
    for d in dims {
        if let (Some(x), Some(y)) = (a.dims.get(d), b.dims.get(d)) {
            vals.push(f(x, y)?);
        }
    }
    Ok(mean_present(vals))
}

fn abs_sim(x: Option<f64>, y: Option<f64>, range: f64) -> Option<f64> {
    Some((1.0 - (x? - y?).abs() / range).clamp(0.0, 1.0))
}

fn count_sim(
    u: &CountVector,
    v: &CountVector,
    distance: fn(&CountVector, &CountVector) -> Result<f64, crate::dist::DistError>,
) -> Option<f64> {
    if !u.is_comparable() || !v.is_comparable() {
        return None;
    }
    let (u, v) = align(u, v);
    distance(&u, &v).ok().map(|d| 1.0 - d)
}

fn representational(
    a: &MetricBundle,
    b: &MetricBundle,
) -> Result<(Option<f64>, Option<String>), SignatureError> {
    let (Some(x), Some(y)) = (&a.activations, &b.activations) else {
        return Ok((None, Some("no activations".into())));
    };
    if x.prompt_ids != y.prompt_ids {
        return Ok((None, Some("activation prompt order differs".into())));
    }
    let value = if a.model.same_architecture(&b.model) && x.layers.len() == y.layers.len() {
        diag_cka(x, y)?
    } else {
        full_cka(x, y)?
    };
    Ok(match value {
        Some(v) => (Some(v), None),
        None => (None, Some("degenerate activations".into())),
    })
}

/// Six-component similarity of two models over `dims`.
pub fn pair_signature(
    a: &MetricBundle,
    b: &MetricBundle,
    dims: &[Dimension],
) -> Result<BiasSignature, SignatureError> {
    if dims.is_empty() {
        return Err(SignatureError::NoDimensions);
    }
    for d in dims {
        let da = a.dims.get(d).map(|m| m.prompt_digest.as_str());
        let db = b.dims.get(d).map(|m| m.prompt_digest.as_str());
        if da != db {
            return Err(SignatureError::PromptSetMismatch {
                a: a.id().into(),
                b: b.id().into(),
                dimension: d.clone(),
            });
        }
    }
    let acc = averaged(a, b, dims, |x, y| Ok(abs_sim(x.acc, y.acc, 1.0)))?;
    let bias = averaged(a, b, dims, |x, y| Ok(abs_sim(x.s_amb, y.s_amb, 200.0)))?;
    let hist = averaged(a, b, dims, |x, y| {
        Ok(count_sim(&x.amb_hist, &y.amb_hist, tv_distance))
    })?;
    let cosine = averaged(a, b, dims, |x, y| {
        Ok(count_sim(
            &x.forced_choice,
            &y.forced_choice,
            cosine_distance,
        ))
    })?;
    let behavior = averaged(a, b, dims, |x, y| {
        Ok(abs_sim(x.abstention, y.abstention, 1.0))
    })?;
    let (repr, repr_reason) = representational(a, b)?;

    let values = [acc, bias, hist, cosine, behavior, repr];
    let mut reasons: [Option<String>; 6] = [
        acc.is_none()
            .then(|| "accuracy undefined (no valid disambiguated answers)".to_string()),
        bias.is_none()
            .then(|| "ambiguous bias score undefined (total abstention or no data)".to_string()),
        hist.is_none()
            .then(|| "empty ambiguous histogram".to_string()),
        cosine
            .is_none()
            .then(|| "no forced-choice answers".to_string()),
        behavior
            .is_none()
            .then(|| "abstention undefined (no valid ambiguous answers)".to_string()),
        None,
    ];
    reasons[5] = repr_reason;
    Ok(BiasSignature {
        model_i: a.id().into(),
        model_j: b.id().into(),
        dimensions: dims.to_vec(),
        values,
        reasons,
    })
}

/// Mean absolute componentwise difference over jointly present components.
pub fn signature_distance(a: &BiasSignature, b: &BiasSignature) -> Result<f64, SignatureError> {
    let diffs: Vec<f64> = a
        .values
        .iter()
        .zip(&b.values)
        .filter_map(|(x, y)| Some((x.as_ref()? - y.as_ref()?).abs()))
        .collect();
    if diffs.is_empty() {
        return Err(SignatureError::NothingComparable);
    }
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

/// Distance of a pair's signature from the self-similarity signature.
pub fn lineage_distance(sig: &BiasSignature) -> Result<f64, SignatureError> {
    signature_distance(sig, &BiasSignature::identity())
}

/// Signatures for every ordered pair, in input order. Only the upper
/// triangle is computed; the lower triangle mirrors it so the grid is
/// exactly symmetric. Diagonal components that are present are exactly 1.
pub fn signature_grid(
    bundles: &[MetricBundle],
    dims: &[Dimension],
) -> Result<Vec<Vec<BiasSignature>>, SignatureError> {
    let n = bundles.len();
    if n < 2 {
        return Err(SignatureError::TooFewModels(n));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let sigs: Vec<BiasSignature> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut s = pair_signature(&bundles[i], &bundles[j], dims)?;
            if i == j {
                for v in s.values.iter_mut().flatten() {
                    debug_assert!((*v - 1.0).abs() < 1e-9);
                    *v = 1.0;
                }
            }
            Ok(s)
        })
        .collect::<Result<_, SignatureError>>()?;
    let mut grid: Vec<Vec<Option<BiasSignature>>> = vec![vec![None; n]; n];
    for (&(i, j), s) in pairs.iter().zip(sigs) {
        if i != j {
            let mut mirrored = s.clone();
            std::mem::swap(&mut mirrored.model_i, &mut mirrored.model_j);
            grid[j][i] = Some(mirrored);
        }
        grid[i][j] = Some(s);
    }
    Ok(grid
        .into_iter()
        .map(|row| row.into_iter().map(Option::unwrap).collect())
        .collect())
}

/// One metric across all model pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub ids: Vec<String>,
    pub metric: String,
    pub values: Vec<Vec<Option<f64>>>,
    /// Reason per absent cell, keyed by (row, column).
    pub absent: BTreeMap<(usize, usize), String>,
}

/// What a matrix cell holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSelector {
    Component(usize),
    /// [`lineage_distance`] of each pair.
    LineageDistance,
}

impl MetricSelector {
    pub fn name(self) -> &'static str {
        match self {
            MetricSelector::Component(k) => COMPONENTS[k],
            MetricSelector::LineageDistance => "signature_distance",
        }
    }

    pub fn all() -> Vec<MetricSelector> {
        (0..6)
            .map(MetricSelector::Component)
            .chain([MetricSelector::LineageDistance])
            .collect()
    }
}

pub fn matrix_from_grid(grid: &[Vec<BiasSignature>], selector: MetricSelector) -> SimilarityMatrix {
    let ids: Vec<String> = grid.iter().map(|row| row[0].model_i.clone()).collect();
    let mut absent = BTreeMap::new();
    let values = grid
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, sig)| match selector {
                    MetricSelector::Component(k) => {
                        if sig.values[k].is_none() {
                            absent.insert(
                                (i, j),
                                sig.reasons[k].clone().unwrap_or_else(|| "absent".into()),
                            );
                        }
                        sig.values[k]
                    }
                    MetricSelector::LineageDistance => match lineage_distance(sig) {
                        Ok(d) => Some(d),
                        Err(e) => {
                            absent.insert((i, j), e.to_string());
                            None
                        }
                    },
                })
                .collect()
        })
        .collect();
    SimilarityMatrix {
        ids,
        metric: selector.name().to_string(),
        values,
        absent,
    }
}

/// Builds one similarity matrix directly from bundles.
pub fn similarity_matrix(
    bundles: &[MetricBundle],
    dims: &[Dimension],
    selector: MetricSelector,
) -> Result<SimilarityMatrix, SignatureError> {
    Ok(matrix_from_grid(&signature_grid(bundles, dims)?, selector))
}

impl SimilarityMatrix {
    /// Header `model,<ids>`; absent cells are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["model".to_string()];
        header.extend(self.ids.iter().cloned());
        out.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| fmt_float(*v)));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Companion JSON naming the reason for each absent cell.
    pub fn absence_json(&self) -> Value {
        let cells: Vec<Value> = self
            .absent
            .iter()
            .map(|((i, j), r)| json!({"row": self.ids[*i], "column": self.ids[*j], "reason": r}))
            .collect();
        json!({"metric": self.metric, "models": self.ids, "absent": cells})
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Provenance;

    fn descriptor(id: &str) -> ModelDescriptor {
        ModelDescriptor {
            id: id.into(),
            family: "f".into(),
            version: "1".into(),
            size_params: None,
            tuned: false,
            provenance: Provenance::Open,
        }
    }

    fn dim_metrics(acc: f64, s_amb: f64, abst: f64, fc: [u64; 2]) -> DimensionMetrics {
        DimensionMetrics {
            acc: Some(acc),
            s_dis: Some(s_amb),
            s_amb: Some(s_amb),
            abstention: Some(abst),
            amb_hist: CountVector::from_map(
                [("a".to_string(), 1), ("b".to_string(), 1)]
                    .into_iter()
                    .collect(),
                0,
            ),
            forced_choice: CountVector::from_map(
                [
                    ("anti_stereotype".to_string(), fc[0]),
                    ("stereotype".to_string(), fc[1]),
                ]
                .into_iter()
                .collect(),
                0,
            ),
            n_invalid: 0,
            prompt_digest: "d".into(),
        }
    }

    fn bundle(id: &str, m: DimensionMetrics) -> MetricBundle {
        MetricBundle {
            model: descriptor(id),
            dims: [(Dimension::Gender, m)].into_iter().collect(),
            activations: None,
        }
    }

    #[test]
    fn self_signature_is_unit() {
        let b = bundle("m", dim_metrics(0.8, 10.0, 0.3, [3, 5]));
        let s = pair_signature(&b, &b, &[Dimension::Gender]).unwrap();
        for v in s.values.iter().take(5) {
            assert!((v.unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.values[5], None);
        assert_eq!(s.reasons[5].as_deref(), Some("no activations"));
    }

    #[test]
    fn opposite_bias_gives_zero() {
        let a = bundle("a", dim_metrics(0.8, 100.0, 0.3, [1, 1]));
        let b = bundle("b", dim_metrics(0.8, -100.0, 0.3, [1, 1]));
        let s = pair_signature(&a, &b, &[Dimension::Gender]).unwrap();
        assert_eq!(s.get("bias_sim"), Some(0.0));
    }

    #[test]
    fn behavior_from_abstention() {
        let a = bundle("a", dim_metrics(0.8, 0.0, 0.30, [1, 1]));
        let b = bundle("b", dim_metrics(0.8, 0.0, 0.55, [1, 1]));
        let s = pair_signature(&a, &b, &[Dimension::Gender]).unwrap();
        assert!((s.get("behavior_sim").unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn distance_examples() {
        let mut a = BiasSignature::identity();
        assert_eq!(signature_distance(&a, &a).unwrap(), 0.0);
        let mut b = BiasSignature::identity();
        b.values = [Some(0.0); 6];
        assert_eq!(signature_distance(&a, &b).unwrap(), 1.0);
        b.values = [
            Some(0.8),
            Some(0.8),
            Some(0.8),
            Some(1.0),
            Some(1.0),
            Some(1.0),
        ];
        assert!((signature_distance(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        a.values = [None; 6];
        assert!(signature_distance(&a, &b).is_err());
    }

    #[test]
    fn empty_dims_and_mismatch_rejected() {
        let a = bundle("a", dim_metrics(0.8, 0.0, 0.3, [1, 1]));
        let mut m = dim_metrics(0.8, 0.0, 0.3, [1, 1]);
        m.prompt_digest = "other".into();
        let b = bundle("b", m);
        assert!(matches!(
            pair_signature(&a, &a, &[]),
            Err(SignatureError::NoDimensions)
        ));
        assert!(matches!(
            pair_signature(&a, &b, &[Dimension::Gender]),
            Err(SignatureError::PromptSetMismatch { .. })
        ));
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let bundles = vec![
            bundle("x", dim_metrics(0.8, 10.0, 0.3, [1, 0])),
            bundle("y", dim_metrics(0.7, 5.0, 0.2, [1, 1])),
            bundle("z", dim_metrics(0.6, -5.0, 0.1, [0, 1])),
        ];
        let m = similarity_matrix(&bundles, &[Dimension::Gender], MetricSelector::Component(3))
            .unwrap();
        for i in 0..3 {
            assert_eq!(m.values[i][i], Some(1.0));
            for j in 0..3 {
                assert_eq!(
                    m.values[i][j].map(f64::to_bits),
                    m.values[j][i].map(f64::to_bits)
                );
            }
        }
        assert!((m.values[0][2].unwrap()).abs() < 1e-12);
        assert!((m.values[0][1].unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        let repr = matrix_from_grid(
            &signature_grid(&bundles, &[Dimension::Gender]).unwrap(),
            MetricSelector::Component(5),
        );
        assert_eq!(repr.absent.len(), 9);
        let mut csv = Vec::new();
        repr.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("model,x,y,z\nx,,,\n"));
    }

    #[test]
    fn too_few_models() {
        let b = bundle("a", dim_metrics(0.8, 0.0, 0.3, [1, 1]));
        assert!(matches!(
            similarity_matrix(&[b], &[Dimension::Gender], MetricSelector::LineageDistance),
            Err(SignatureError::TooFewModels(1))
        ));
    }
}
