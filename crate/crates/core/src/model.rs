//! Domain types shared by every stage: model descriptors, prompt and
//! response records, and per-slice label tallies.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Whether a model's weights are publicly available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Open,
    Proprietary,
}

/// One entry of the `models.json` manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub id: String,
    pub family: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_params: Option<u64>,
    #[serde(default)]
    pub tuned: bool,
    pub provenance: Provenance,
}

impl ModelDescriptor {
    /// Same family, version and parameter count. Used to decide whether a
    /// matched-depth (diagonal) representational comparison is meaningful.
    pub fn same_architecture(&self, other: &ModelDescriptor) -> bool {
        self.family == other.family
            && self.version == other.version
            && self.size_params == other.size_params
    }

    /// True when one side is the instruction-tuned variant of the other.
    pub fn is_base_tuned_pair(&self, other: &ModelDescriptor) -> bool {
        self.same_architecture(other) && self.tuned != other.tuned
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Bbq,
    Unqover,
    Openended,
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Bbq => "bbq",
            Dataset::Unqover => "unqover",
            Dataset::Openended => "openended",
        })
    }
}

/// Demographic axis a prompt probes.
///
/// Serialized as a bare lowercase tag; anything outside the fixed
/// vocabulary round-trips through [`Dimension::Other`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dimension {
    Gender,
    Nationality,
    Ethnicity,
    Religion,
    Age,
    Disability,
    Physical,
    SexualOrientation,
    Ses,
    Other(String),
}

impl Dimension {
    /// The four axes shared by the multiple-choice and forced-choice datasets.
    pub const SHARED: [Dimension; 4] = [
        Dimension::Gender,
        Dimension::Nationality,
        Dimension::Ethnicity,
        Dimension::Religion,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            Dimension::Gender => "gender",
            Dimension::Nationality => "nationality",
            Dimension::Ethnicity => "ethnicity",
            Dimension::Religion => "religion",
            Dimension::Age => "age",
            Dimension::Disability => "disability",
            Dimension::Physical => "physical",
            Dimension::SexualOrientation => "sexual_orientation",
            Dimension::Ses => "ses",
            Dimension::Other(s) => s,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tag = s.trim().to_ascii_lowercase();
        Ok(match tag.as_str() {
            "gender" | "gender_identity" => Dimension::Gender,
            "nationality" => Dimension::Nationality,
            "ethnicity" | "race" | "race_ethnicity" => Dimension::Ethnicity,
            "religion" => Dimension::Religion,
            "age" => Dimension::Age,
            "disability" | "disability_status" => Dimension::Disability,
            "physical" | "physical_appearance" => Dimension::Physical,
            "sexual_orientation" => Dimension::SexualOrientation,
            "ses" => Dimension::Ses,
            _ => Dimension::Other(tag),
        })
    }
}

impl Serialize for Dimension {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Dimension {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(s.parse().unwrap_or_else(|e| match e {}))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    Ambiguous,
    Disambiguated,
    ForcedChoice,
    Generation,
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextKind::Ambiguous => "ambiguous",
            ContextKind::Disambiguated => "disambiguated",
            ContextKind::ForcedChoice => "forced_choice",
            ContextKind::Generation => "generation",
        })
    }
}

/// Role a candidate answer plays relative to the probed stereotype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[serde(alias = "S")]
    Stereotype,
    #[serde(alias = "A")]
    AntiStereotype,
    #[serde(alias = "U")]
    Unknown,
}

impl Role {
    pub fn label(self) -> Label {
        match self {
            Role::Stereotype => Label::S,
            Role::AntiStereotype => Label::A,
            Role::Unknown => Label::U,
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stereotype" | "S" => Ok(Role::Stereotype),
            "anti_stereotype" | "A" => Ok(Role::AntiStereotype),
            "unknown" | "U" => Ok(Role::Unknown),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub role: Role,
}

/// Structural violation of a [`PromptRecord`] invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct InvariantViolation {
    pub field: &'static str,
    pub message: String,
}

impl InvariantViolation {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub dataset: Dataset,
    pub dimension: Dimension,
    pub context_kind: ContextKind,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_role: Option<Role>,
}

impl PromptRecord {
    pub fn candidate(&self, role: Role) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.role == role)
    }

    /// Checks the per-dataset shape rules.
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if self.prompt_id.trim().is_empty() {
            return Err(InvariantViolation::new("prompt_id", "must be non-empty"));
        }
        let roles: BTreeSet<Role> = self.candidates.iter().map(|c| c.role).collect();
        if roles.len() != self.candidates.len() {
            return Err(InvariantViolation::new(
                "candidates",
                "candidate roles must be distinct",
            ));
        }
        match self.dataset {
            Dataset::Bbq => {
                let expected: BTreeSet<Role> =
                    [Role::Stereotype, Role::AntiStereotype, Role::Unknown].into();
                if self.candidates.len() != 3 || roles != expected {
                    return Err(InvariantViolation::new(
                        "candidates",
                        "bbq records need exactly three candidates with roles stereotype, anti_stereotype, unknown",
                    ));
                }
                match (self.context_kind, self.gold_role) {
                    (ContextKind::Disambiguated, Some(_)) | (ContextKind::Ambiguous, None) => {}
                    (ContextKind::Disambiguated, None) => {
                        return Err(InvariantViolation::new(
                            "gold_role",
                            "disambiguated records must carry gold_role",
                        ))
                    }
                    (ContextKind::Ambiguous, Some(_)) => {
                        return Err(InvariantViolation::new(
                            "gold_role",
                            "ambiguous records must not carry gold_role",
                        ))
                    }
                    (kind, _) => {
                        return Err(InvariantViolation::new(
                            "context_kind",
                            format!("bbq records are ambiguous or disambiguated, got {kind}"),
                        ))
                    }
                }
            }
            Dataset::Unqover => {
                if roles.contains(&Role::Unknown) {
                    return Err(InvariantViolation::new(
                        "candidates",
                        "forced-choice records cannot offer an unknown candidate",
                    ));
                }
                let expected: BTreeSet<Role> = [Role::Stereotype, Role::AntiStereotype].into();
                if self.candidates.len() != 2 || roles != expected {
                    return Err(InvariantViolation::new(
                        "candidates",
                        "unqover records need exactly two candidates with roles stereotype, anti_stereotype",
                    ));
                }
                if self.gold_role.is_some() {
                    return Err(InvariantViolation::new(
                        "gold_role",
                        "forced-choice records have no ground truth",
                    ));
                }
                if self.context_kind != ContextKind::ForcedChoice {
                    return Err(InvariantViolation::new(
                        "context_kind",
                        format!(
                            "unqover records are forced_choice, got {}",
                            self.context_kind
                        ),
                    ));
                }
            }
            Dataset::Openended => {
                if self.context_kind != ContextKind::Generation {
                    return Err(InvariantViolation::new(
                        "context_kind",
                        "open-ended records use the generation context",
                    ));
                }
                if self.gold_role.is_some() {
                    return Err(InvariantViolation::new(
                        "gold_role",
                        "open-ended records have no ground truth",
                    ));
                }
            }
        }
        if self.candidates.iter().any(|c| c.text.trim().is_empty()) {
            return Err(InvariantViolation::new(
                "candidates",
                "candidate text must be non-empty",
            ));
        }
        Ok(())
    }
}

/// Normalized answer category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    S,
    A,
    U,
    #[serde(rename = "INVALID")]
    Invalid,
}

impl Label {
    /// Candidate role this label selects; INVALID selects none.
    pub fn role(self) -> Option<Role> {
        match self {
            Label::S => Some(Role::Stereotype),
            Label::A => Some(Role::AntiStereotype),
            Label::U => Some(Role::Unknown),
            Label::Invalid => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::S => "S",
            Label::A => "A",
            Label::U => "U",
            Label::Invalid => "INVALID",
        })
    }
}

/// Which normalization rule produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    Exact,
    CaseFold,
    Containment,
    RefusalLexicon,
    Invalid,
}

/// A response line as it arrives on disk. Labels are never read from input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub model_id: String,
    pub prompt_id: String,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub model_id: String,
    pub prompt_id: String,
    pub raw_text: String,
    pub label: Label,
    pub norm_method: NormMethod,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceKey {
    pub model_id: String,
    pub dataset: Dataset,
    pub dimension: Dimension,
    pub context_kind: ContextKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub n_s: u64,
    pub n_a: u64,
    pub n_u: u64,
    pub n_invalid: u64,
    pub slice: SliceKey,
}

impl LabelCounts {
    pub fn empty(slice: SliceKey) -> Self {
        Self {
            n_s: 0,
            n_a: 0,
            n_u: 0,
            n_invalid: 0,
            slice,
        }
    }

    pub fn add(&mut self, label: Label) {
        match label {
            Label::S => self.n_s += 1,
            Label::A => self.n_a += 1,
            Label::U => self.n_u += 1,
            Label::Invalid => self.n_invalid += 1,
        }
    }

    /// Committed (stereotypical or anti-stereotypical) answers.
    pub fn n_non_unknown(&self) -> u64 {
        self.n_s + self.n_a
    }

    /// Parseable answers; the denominator of every rate.
    pub fn n_valid(&self) -> u64 {
        self.n_s + self.n_a + self.n_u
    }

    pub fn total(&self) -> u64 {
        self.n_valid() + self.n_invalid
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("response for model `{found}` does not belong to slice of model `{expected}`")]
pub struct SliceMismatch {
    pub expected: String,
    pub found: String,
}

/// Counts labels over responses that all belong to `slice`.
pub fn tally<'a, I>(responses: I, slice: SliceKey) -> Result<LabelCounts, SliceMismatch>
where
    I: IntoIterator<Item = &'a ResponseRecord>,
{
    let mut counts = LabelCounts::empty(slice);
    for r in responses {
        if r.model_id != counts.slice.model_id {
            return Err(SliceMismatch {
                expected: counts.slice.model_id.clone(),
                found: r.model_id.clone(),
            });
        }
        counts.add(r.label);
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice() -> SliceKey {
        SliceKey {
            model_id: "m".into(),
            dataset: Dataset::Bbq,
            dimension: Dimension::Gender,
            context_kind: ContextKind::Ambiguous,
        }
    }

    fn resp(label: Label) -> ResponseRecord {
        ResponseRecord {
            model_id: "m".into(),
            prompt_id: "p".into(),
            raw_text: String::new(),
            label,
            norm_method: NormMethod::Exact,
        }
    }

    #[test]
    fn tally_counts_each_label() {
        let rs: Vec<_> = [Label::S, Label::S, Label::A, Label::U]
            .into_iter()
            .map(resp)
            .collect();
        let c = tally(&rs, slice()).unwrap();
        assert_eq!((c.n_s, c.n_a, c.n_u, c.n_invalid), (2, 1, 1, 0));
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn tally_empty_is_zero() {
        let c = tally(&[], slice()).unwrap();
        assert_eq!(c.total(), 0);
        assert_eq!(c.n_non_unknown(), 0);
    }

    #[test]
    fn invalid_is_not_committed() {
        let rs = vec![resp(Label::S), resp(Label::Invalid)];
        let c = tally(&rs, slice()).unwrap();
        assert_eq!(c.n_invalid, 1);
        assert_eq!(c.n_non_unknown(), 1);
        assert_eq!(c.n_valid(), 1);
    }

    #[test]
    fn tally_rejects_foreign_model() {
        let mut r = resp(Label::S);
        r.model_id = "other".into();
        assert!(tally([&r], slice()).is_err());
    }

    #[test]
    fn dimension_tags_round_trip() {
        for tag in ["gender", "ses", "sexual_orientation", "caste"] {
            let d: Dimension = tag.parse().unwrap();
            assert_eq!(d.as_str(), tag);
            let json = serde_json::to_string(&d).unwrap();
            let back: Dimension = serde_json::from_str(&json).unwrap();
            assert_eq!(back, d);
        }
        assert_eq!("race".parse::<Dimension>().unwrap(), Dimension::Ethnicity);
    }

    #[test]
    fn architecture_pairs() {
        let base = ModelDescriptor {
            id: "llama-2-7b".into(),
            family: "llama".into(),
            version: "2".into(),
            size_params: Some(7_000_000_000),
            tuned: false,
            provenance: Provenance::Open,
        };
        let chat = ModelDescriptor {
            id: "llama-2-7b-chat".into(),
            tuned: true,
            ..base.clone()
        };
        assert!(base.is_base_tuned_pair(&chat));
        assert!(!base.is_base_tuned_pair(&base));
        let other = ModelDescriptor {
            version: "3".into(),
            ..chat.clone()
        };
        assert!(!base.is_base_tuned_pair(&other));
    }
}
