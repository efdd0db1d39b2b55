//! Two-round ensembling: per-member min-max normalization, per-modality
//! averaging, multimodal fusion and percentile-based stratification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("member `{member}` is degenerate: every validation prediction equals {value}")]
    DegenerateMember { member: String, value: f64 },
    #[error("ensemble has no members")]
    NoMembers,
    #[error("member `{member}` could not score the subject: {reason}")]
    UnscorableMember { member: String, reason: String },
    #[error("{0} score is missing")]
    MissingModality(Modality),
    #[error("percentile must lie strictly between 0 and 100, got {0}")]
    InvalidPercentile(f64),
    #[error("no scores to take a percentile of")]
    Empty,
    #[error("expected {expected} member outputs, got {got}")]
    Arity { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Clinical,
    Pathology,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Clinical => "clinical",
            Modality::Pathology => "pathology",
        })
    }
}

/// Linear map sending the validation minimum to 0 and maximum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxNormalizer {
    pub min: f64,
    pub max: f64,
}

impl MinMaxNormalizer {
    pub fn fit(member: &str, validation: &[f64]) -> Result<Self, EnsembleError> {
        let finite = validation.iter().copied().filter(|v| v.is_finite());
        let (min, max) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !min.is_finite() {
            return Err(EnsembleError::UnscorableMember {
                member: member.to_string(),
                reason: "no finite validation predictions".into(),
            });
        }
        if max == min {
            return Err(EnsembleError::DegenerateMember { member: member.to_string(), value: min });
        }
        Ok(MinMaxNormalizer { min, max })
    }

    /// May fall outside [0, 1] for values beyond the validation range.
    pub fn apply(&self, y: f64) -> f64 {
        (y - self.min) / (self.max - self.min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub name: String,
    /// Path to the serialized scorer.
    pub model_ref: String,
    /// Content hash of the scorer file.
    pub content_hash: String,
    pub normalizer: MinMaxNormalizer,
    /// Validation metric used for top-K selection.
    pub validation_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub modality: Modality,
    pub members: Vec<EnsembleMember>,
}

impl EnsembleSpec {
    pub fn new(modality: Modality, members: Vec<EnsembleMember>) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        Ok(EnsembleSpec { modality, members })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// Normalizes each member's raw output and averages.
    pub fn score(&self, raw: &[f64]) -> Result<f64, EnsembleError> {
        if raw.len() != self.members.len() {
            return Err(EnsembleError::Arity { expected: self.members.len(), got: raw.len() });
        }
        let mut normalized = Vec::with_capacity(raw.len());
        for (m, &y) in self.members.iter().zip(raw) {
            if !y.is_finite() {
                return Err(EnsembleError::UnscorableMember {
                    member: m.name.clone(),
                    reason: format!("raw output {y}"),
                });
            }
            normalized.push(m.normalizer.apply(y));
        }
        modality_score(&normalized)
    }
}

/// Arithmetic mean of normalized member outputs. Summation runs over the
/// sorted values so the result does not depend on member order.
pub fn modality_score(normalized: &[f64]) -> Result<f64, EnsembleError> {
    if normalized.is_empty() {
        return Err(EnsembleError::NoMembers);
    }
    let mut v = normalized.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Indices of the `k` best candidates by validation score, best first; ties
/// go to the earlier candidate.
pub fn select_top_k(validation_scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..validation_scores.len()).collect();
    idx.sort_by(|&a, &b| validation_scores[b].total_cmp(&validation_scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedScore {
    /// `(y_c + y_p) / 2` clamped to [0, 1].
    pub value: f64,
    pub unclamped: f64,
}

pub fn fuse(y_clinical: f64, y_pathology: f64) -> FusedScore {
    let unclamped = 0.5 * (y_clinical + y_pathology);
    FusedScore { value: unclamped.clamp(0.0, 1.0), unclamped }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingModalityPolicy {
    #[default]
    Reject,
    /// Use whichever modality is present.
    UseAvailable,
}

pub fn fuse_partial(
    y_clinical: Option<f64>,
    y_pathology: Option<f64>,
    policy: MissingModalityPolicy,
) -> Result<FusedScore, EnsembleError> {
    match (y_clinical, y_pathology, policy) {
        (Some(c), Some(p), _) => Ok(fuse(c, p)),
        (Some(c), None, MissingModalityPolicy::UseAvailable) => Ok(fuse(c, c)),
        (None, Some(p), MissingModalityPolicy::UseAvailable) => Ok(fuse(p, p)),
        (None, _, _) => Err(EnsembleError::MissingModality(Modality::Clinical)),
        (_, None, _) => Err(EnsembleError::MissingModality(Modality::Pathology)),
    }
}

/// Percentile by linear interpolation between order statistics:
/// position `h = (n - 1) p / 100` in the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, EnsembleError> {
    if values.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if !(p > 0.0 && p < 100.0) {
        return Err(EnsembleError::InvalidPercentile(p));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCutoff {
    pub percentile: f64,
    pub value: f64,
    pub source_population: String,
}

impl RiskCutoff {
    pub const DEFAULT_PERCENTILE: f64 = 80.0;

    pub fn from_population(scores: &[f64], percentile_rank: f64, label: &str) -> Result<Self, EnsembleError> {
        Ok(RiskCutoff {
            percentile: percentile_rank,
            value: percentile(scores, percentile_rank)?,
            source_population: label.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskGroup {
    Low,
    High,
}

impl RiskGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::Low => "low",
            RiskGroup::High => "high",
        }
    }
}

/// High iff the score strictly exceeds the cutoff.
pub fn stratify(y: f64, cutoff: &RiskCutoff) -> RiskGroup {
    if y > cutoff.value {
        RiskGroup::High
    } else {
        RiskGroup::Low
    }
}
