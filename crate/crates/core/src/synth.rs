//! Seeded synthetic prompts, responders and activation sets with planted
//! parameters, used to check that every metric recovers what was put in.
//!
//! Randomness comes from a counter-based SplitMix64: draw `k` of a stream
//! with seed `s` is `mix(s + (k + 1) * 0x9E3779B97F4A7C15)` (wrapping), where
//! `mix` is the SplitMix64 finalizer. Uniforms take the top 53 bits; normal
//! deviates use the cosine branch of Box-Muller on two consecutive draws.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Candidate, ContextKind, Dataset, Dimension, NormMethod, PromptRecord, ResponseRecord, Role,
};
use crate::repr::{ActivationSet, ReprError};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// The SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based SplitMix64. Any draw is addressable directly by index, so
/// work can be split across threads by partitioning the counter range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    seed: u64,
    counter: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// An independent stream derived from `seed` and a stream id.
    pub fn stream(seed: u64, stream: u64) -> Self {
        Self::new(mix64(seed ^ mix64(stream.wrapping_add(GOLDEN))))
    }

    /// Draw number `k` of this stream, without advancing.
    pub fn at(&self, k: u64) -> u64 {
        mix64(
            self.seed
                .wrapping_add(k.wrapping_add(1).wrapping_mul(GOLDEN)),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal deviate; consumes two draws.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{field} = {value} must lie in [0, 1]")]
    Probability { field: &'static str, value: f64 },
    #[error("n_prompts must be positive")]
    NoPrompts,
    #[error("prompt `{0}` has no candidate for the drawn role")]
    MissingCandidate(String),
    #[error("noise level {0} must be finite and non-negative")]
    Noise(f64),
    #[error("scale {0} must be finite and positive")]
    Scale(f64),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

/// Behavior of a synthetic responder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Probability a committed answer is stereotypical.
    pub p_stereo: f64,
    /// Probability of answering U where a U candidate exists.
    pub p_abstain: f64,
    pub seed: u64,
    pub n_prompts: usize,
    pub dimension: Dimension,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (field, value) in [("p_stereo", self.p_stereo), ("p_abstain", self.p_abstain)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SynthError::Probability { field, value });
            }
        }
        if self.n_prompts == 0 {
            return Err(SynthError::NoPrompts);
        }
        Ok(())
    }
}

/// Which prompt family to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptShape {
    /// Three-candidate prompts alternating ambiguous and disambiguated.
    BbqMixed,
    /// Three-candidate prompts, all ambiguous.
    BbqAmbiguous,
    /// Two-candidate forced-choice prompts.
    Unqover,
}

fn group_names(dimension: &Dimension) -> (&'static str, &'static str) {
    match dimension {
        Dimension::Gender => ("man", "woman"),
        Dimension::Nationality => ("American", "Moroccan"),
        Dimension::Ethnicity => ("White", "Latino"),
        Dimension::Religion => ("Christian", "Muslim"),
        Dimension::Age => ("older", "younger"),
        Dimension::Disability => ("wheelchair user", "runner"),
        Dimension::Physical => ("tall", "short"),
        Dimension::SexualOrientation => ("straight", "gay"),
        Dimension::Ses => ("wealthy", "poor"),
        Dimension::Other(_) => ("first", "second"),
    }
}

/// Deterministic prompt set for one dimension.
pub fn generate_prompts(
    dimension: &Dimension,
    n: usize,
    shape: PromptShape,
    id_prefix: &str,
) -> Vec<PromptRecord> {
    let (s_group, a_group) = group_names(dimension);
    (0..n)
        .map(|i| {
            let prompt_id = format!("{id_prefix}{}-{i:05}", dimension.as_str());
            let s_text = format!("The {s_group} #{i}");
            let a_text = format!("The {a_group} #{i}");
            match shape {
                PromptShape::Unqover => PromptRecord {
                    prompt_id,
                    dataset: Dataset::Unqover,
                    dimension: dimension.clone(),
                    context_kind: ContextKind::ForcedChoice,
                    candidates: vec![
                        Candidate {
                            text: s_text,
                            role: Role::Stereotype,
                        },
                        Candidate {
                            text: a_text,
                            role: Role::AntiStereotype,
                        },
                    ],
                    gold_role: None,
                },
                PromptShape::BbqMixed | PromptShape::BbqAmbiguous => {
                    let disambiguated = shape == PromptShape::BbqMixed && i % 2 == 1;
                    PromptRecord {
                        prompt_id,
                        dataset: Dataset::Bbq,
                        dimension: dimension.clone(),
                        context_kind: if disambiguated {
                            ContextKind::Disambiguated
                        } else {
                            ContextKind::Ambiguous
                        },
                        candidates: vec![
                            Candidate {
                                text: s_text,
                                role: Role::Stereotype,
                            },
                            Candidate {
                                text: a_text,
                                role: Role::AntiStereotype,
                            },
                            Candidate {
                                text: "Cannot be determined".into(),
                                role: Role::Unknown,
                            },
                        ],
                        gold_role: disambiguated.then_some(if (i / 2) % 2 == 0 {
                            Role::Stereotype
                        } else {
                            Role::AntiStereotype
                        }),
                    }
                }
            }
        })
        .collect()
}

/// One response per prompt. Prompt `i` uses draws `2i` and `2i + 1` of the
/// spec's stream: the first decides abstention (only where a U candidate
/// exists), the second decides S versus A.
pub fn generate_responses(
    spec: &SynthSpec,
    model_id: &str,
    prompts: &[PromptRecord],
) -> Result<Vec<ResponseRecord>, SynthError> {
    spec.validate()?;
    let rng = SplitMix64::new(spec.seed);
    let uniform = |k: u64| (rng.at(k) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let k = 2 * i as u64;
            let can_abstain = p.candidate(Role::Unknown).is_some();
            let role = if can_abstain && uniform(k) < spec.p_abstain {
                Role::Unknown
            } else if uniform(k + 1) < spec.p_stereo {
                Role::Stereotype
            } else {
                Role::AntiStereotype
            };
            let cand = p
                .candidate(role)
                .ok_or_else(|| SynthError::MissingCandidate(p.prompt_id.clone()))?;
            Ok(ResponseRecord {
                model_id: model_id.to_string(),
                prompt_id: p.prompt_id.clone(),
                raw_text: cand.text.clone(),
                label: role.label(),
                norm_method: NormMethod::Exact,
            })
        })
        .collect()
}

/// Standard-normal activations, one matrix per entry of `layer_dims`.
pub fn generate_base_activations(
    seed: u64,
    model_id: &str,
    prompt_ids: Vec<String>,
    layer_dims: &[usize],
) -> Result<ActivationSet, SynthError> {
    let n = prompt_ids.len();
    let layers = layer_dims
        .iter()
        .enumerate()
        .map(|(l, &d)| gaussian_matrix(&mut SplitMix64::stream(seed, l as u64), n, d))
        .collect();
    Ok(ActivationSet::new(model_id, prompt_ids, layers)?)
}

fn gaussian_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> DMatrix<f64> {
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.next_gaussian()).collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
pub fn random_orthogonal(rng: &mut SplitMix64, d: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, d, d).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Planted drift: layer `l` becomes `base_l * Q_l * scale + sigma_l * rms * E`
/// where `Q_l` is a random rotation, `E` standard normal noise and `rms` the
/// root-mean-square entry of the rotated, scaled signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub seed: u64,
    pub scale: f64,
    /// Relative noise per layer; a shorter list repeats its last value.
    pub sigma: Vec<f64>,
}

impl DriftSpec {
    fn sigma_for(&self, layer: usize) -> f64 {
        self.sigma
            .get(layer)
            .or(self.sigma.last())
            .copied()
            .unwrap_or(0.0)
    }
}

pub fn generate_activations(
    spec: &DriftSpec,
    base: &ActivationSet,
    model_id: &str,
) -> Result<ActivationSet, SynthError> {
    if !(spec.scale.is_finite() && spec.scale > 0.0) {
        return Err(SynthError::Scale(spec.scale));
    }
    if let Some(&bad) = spec.sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(SynthError::Noise(bad));
    }
    let layers = base
        .layers
        .iter()
        .enumerate()
        .map(|(l, x)| {
            let mut rng = SplitMix64::stream(spec.seed, l as u64);
            let q = random_orthogonal(&mut rng, x.ncols());
            let signal = x * q * spec.scale;
            let sigma = spec.sigma_for(l);
            if sigma == 0.0 {
                return signal;
            }
            let rms = signal.norm() / (signal.len() as f64).sqrt();
            let noise = gaussian_matrix(&mut rng, x.nrows(), x.ncols());
            signal + noise * (sigma * rms)
        })
        .collect();
    Ok(ActivationSet::new(
        model_id,
        base.prompt_ids.clone(),
        layers,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Label;

    #[test]
    fn reference_stream() {
        // Standard SplitMix64 sequence for seed 0.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.at(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn uniforms_in_unit_interval() {
        let mut r = SplitMix64::new(42);
        for _ in 0..10_000 {
            let u = r.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn extreme_specs() {
        let prompts = generate_prompts(&Dimension::Gender, 20, PromptShape::BbqMixed, "");
        let all_u = SynthSpec {
            p_stereo: 0.5,
            p_abstain: 1.0,
            seed: 1,
            n_prompts: 20,
            dimension: Dimension::Gender,
        };
        let rs = generate_responses(&all_u, "m", &prompts).unwrap();
        assert!(rs.iter().all(|r| r.label == Label::U));

        let all_s = SynthSpec {
            p_stereo: 1.0,
            p_abstain: 0.0,
            ..all_u
        };
        let rs = generate_responses(&all_s, "m", &prompts).unwrap();
        assert!(rs.iter().all(|r| r.label == Label::S));
    }

    #[test]
    fn forced_choice_never_abstains() {
        let prompts = generate_prompts(&Dimension::Religion, 50, PromptShape::Unqover, "u-");
        let spec = SynthSpec {
            p_stereo: 0.5,
            p_abstain: 1.0,
            seed: 3,
            n_prompts: 50,
            dimension: Dimension::Religion,
        };
        let rs = generate_responses(&spec, "m", &prompts).unwrap();
        assert!(rs.iter().all(|r| r.label != Label::U));
        for p in &prompts {
            p.validate().unwrap();
        }
    }

    #[test]
    fn generated_prompts_are_valid() {
        for p in generate_prompts(&Dimension::Age, 10, PromptShape::BbqMixed, "") {
            p.validate().unwrap();
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SynthSpec {
            p_stereo: 1.2,
            p_abstain: 0.0,
            seed: 1,
            n_prompts: 1,
            dimension: Dimension::Gender,
        };
        assert!(generate_responses(&spec, "m", &[]).is_err());
    }

    #[test]
    fn rotation_is_orthogonal() {
        let q = random_orthogonal(&mut SplitMix64::new(9), 7);
        let eye = DMatrix::<f64>::identity(7, 7);
        assert!((q.transpose() * &q - eye).abs().max() < 1e-12);
    }
}
