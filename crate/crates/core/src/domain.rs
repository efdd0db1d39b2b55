//! Subject records, clinical covariates, endpoint derivation and covariate
//! encoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid value {value:?} for field `{field}`")]
    InvalidLevel { field: &'static str, value: String },
    #[error("field `{field}` out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("record has no follow-up time and no events")]
    MissingFollowup,
    #[error("event time for `{field}` must be positive, got {value}")]
    NonPositiveTime { field: &'static str, value: f64 },
    #[error("recurrence at {recurrence} recorded after death at {death}")]
    RecurrenceAfterDeath { recurrence: f64, death: f64 },
    #[error("recurrence at {recurrence} recorded after end of follow-up at {end}")]
    RecurrenceAfterFollowup { recurrence: f64, end: f64 },
    #[error("missing required covariate `{0}` for this encoding")]
    MissingCovariate(&'static str),
    #[error("embedding bag `{0}` has no patches")]
    EmptyBag(String),
    #[error("embedding bag `{slide}` has non-finite value at patch {patch}")]
    NonFiniteEmbedding { slide: String, patch: usize },
    #[error("embedding bag `{slide}` has {len} values, not a multiple of dim {dim}")]
    BagShape { slide: String, len: usize, dim: usize },
}

/// Time-to-event endpoint definitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    /// Overall survival: death from any cause.
    #[serde(rename = "OS")]
    Os,
    /// Disease-free interval: local-regional or distant recurrence.
    #[serde(rename = "DFI")]
    Dfi,
    /// Distant recurrence-free interval.
    #[serde(rename = "DRFI")]
    Drfi,
    /// Recurrence-free survival: any recurrence or death.
    #[serde(rename = "RFS")]
    Rfs,
    /// Distant recurrence-free survival: distant recurrence or death.
    #[serde(rename = "DRFS")]
    Drfs,
}

impl Endpoint {
    pub const ALL: [Endpoint; 5] = [
        Endpoint::Os,
        Endpoint::Dfi,
        Endpoint::Drfi,
        Endpoint::Rfs,
        Endpoint::Drfs,
    ];

    /// Which event kinds count, as (local-regional, distant, death).
    pub fn event_kinds(self) -> (bool, bool, bool) {
        match self {
            Endpoint::Os => (false, false, true),
            Endpoint::Dfi => (true, true, false),
            Endpoint::Drfi => (false, true, false),
            Endpoint::Rfs => (true, true, true),
            Endpoint::Drfs => (false, true, true),
        }
    }

    /// Interval endpoints do not count death and censor at it instead.
    pub fn is_interval(self) -> bool {
        matches!(self, Endpoint::Dfi | Endpoint::Drfi)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::Os => "OS",
            Endpoint::Dfi => "DFI",
            Endpoint::Drfi => "DRFI",
            Endpoint::Rfs => "RFS",
            Endpoint::Drfs => "DRFS",
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Endpoint {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "OS" => Ok(Endpoint::Os),
            "DFI" => Ok(Endpoint::Dfi),
            "DRFI" => Ok(Endpoint::Drfi),
            "RFS" => Ok(Endpoint::Rfs),
            "DRFS" => Ok(Endpoint::Drfs),
            _ => Err(DomainError::InvalidLevel {
                field: "endpoint",
                value: s.to_string(),
            }),
        }
    }
}

/// Raw outcome events for one subject, all in years from baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub local_regional_recurrence_time: Option<f64>,
    pub distant_recurrence_time: Option<f64>,
    pub death_time: Option<f64>,
    pub last_followup_time: f64,
}

fn check_positive(field: &'static str, value: Option<f64>) -> Result<(), DomainError> {
    match value {
        Some(v) if !(v.is_finite() && v > 0.0) => Err(DomainError::NonPositiveTime { field, value: v }),
        _ => Ok(()),
    }
}

impl OutcomeRecord {
    /// Builds a validated record. A missing follow-up time is recovered from
    /// the latest event when at least one event is present.
    pub fn new(
        lrr: Option<f64>,
        distant: Option<f64>,
        death: Option<f64>,
        followup: Option<f64>,
    ) -> Result<Self, DomainError> {
        check_positive("lrr_time", lrr)?;
        check_positive("distant_time", distant)?;
        check_positive("death_time", death)?;
        check_positive("followup_time", followup)?;
        let last_followup_time = match followup {
            Some(f) => f,
            None => [lrr, distant, death]
                .into_iter()
                .flatten()
                .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
                .ok_or(DomainError::MissingFollowup)?,
        };
        let record = OutcomeRecord {
            local_regional_recurrence_time: lrr,
            distant_recurrence_time: distant,
            death_time: death,
            last_followup_time,
        };
        record.validate()?;
        Ok(record)
    }

    /// End of observation: follow-up end, or death when it comes later.
    pub fn observation_end(&self) -> f64 {
        match self.death_time {
            Some(d) => d.max(self.last_followup_time),
            None => self.last_followup_time,
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.last_followup_time.is_finite() && self.last_followup_time > 0.0) {
            return Err(DomainError::NonPositiveTime {
                field: "followup_time",
                value: self.last_followup_time,
            });
        }
        check_positive("lrr_time", self.local_regional_recurrence_time)?;
        check_positive("distant_time", self.distant_recurrence_time)?;
        check_positive("death_time", self.death_time)?;
        let end = self.observation_end();
        for r in [self.local_regional_recurrence_time, self.distant_recurrence_time]
            .into_iter()
            .flatten()
        {
            if let Some(d) = self.death_time {
                if r > d {
                    return Err(DomainError::RecurrenceAfterDeath { recurrence: r, death: d });
                }
            }
            if r > end {
                return Err(DomainError::RecurrenceAfterFollowup { recurrence: r, end });
            }
        }
        Ok(())
    }
}

/// A right-censored time-to-event observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub event: bool,
}

impl Observation {
    pub fn new(time: f64, event: bool) -> Self {
        Observation { time, event }
    }
}

impl From<EndpointObservation> for Observation {
    fn from(e: EndpointObservation) -> Self {
        Observation { time: e.time, event: e.event }
    }
}

/// A derived (time, event) pair for one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointObservation {
    pub endpoint: Endpoint,
    pub time: f64,
    pub event: bool,
}

/// Derives the time-to-event pair for `endpoint`.
///
/// The event time is the earliest of the event kinds that count for the
/// endpoint. Without an event the subject is censored at follow-up end; for
/// interval endpoints (DFI, DRFI) death is not an event and censors at the
/// death time.
pub fn derive_endpoint(outcome: &OutcomeRecord, endpoint: Endpoint) -> EndpointObservation {
    let (lrr, distant, death) = endpoint.event_kinds();
    let candidates = [
        (lrr, outcome.local_regional_recurrence_time),
        (distant, outcome.distant_recurrence_time),
        (death, outcome.death_time),
    ];
    let first_event = candidates
        .iter()
        .filter(|(counts, _)| *counts)
        .filter_map(|(_, t)| *t)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
    match first_event {
        Some(time) => EndpointObservation { endpoint, time, event: true },
        None => {
            let time = match outcome.death_time {
                Some(d) if endpoint.is_interval() => d,
                _ => outcome.last_followup_time,
            };
            EndpointObservation { endpoint, time, event: false }
        }
    }
}

macro_rules! level_enum {
    (
        $(#[$meta:meta])*
        $name:ident, $field:literal { $($variant:ident => $text:literal),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const LEVELS: &'static [$name] = &[$($name::$variant),+];
            pub const FIELD: &'static str = $field;

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = DomainError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let t = s.trim();
                $(
                    if t.eq_ignore_ascii_case($text) {
                        return Ok($name::$variant);
                    }
                )+
                Err(DomainError::InvalidLevel { field: $field, value: s.to_string() })
            }
        }
    };
}

level_enum!(
    /// Hormone receptor status (ER, PR).
    ReceptorStatus, "receptor" { Positive => "positive", Negative => "negative", Unknown => "unknown" }
);
level_enum!(
    Her2Status, "her2" {
        Positive => "positive",
        Negative => "negative",
        Equivocal => "equivocal",
        Unknown => "unknown",
    }
);
level_enum!(
    TStage, "t_stage" {
        T1mi => "T1mi",
        T1a => "T1a",
        T1b => "T1b",
        T1c => "T1c",
        T2 => "T2",
        T3 => "T3",
        T4 => "T4",
        Tx => "TX",
        Unknown => "unknown",
    }
);
level_enum!(
    NStage, "n_stage" {
        N0 => "N0",
        N1 => "N1",
        N2 => "N2",
        N3 => "N3",
        Nx => "NX",
        Unknown => "unknown",
    }
);
level_enum!(
    /// Presence of a histological component (IDC, ILC).
    Component, "component" { Yes => "yes", No => "no", Unknown => "unknown" }
);
level_enum!(
    Race, "race" {
        White => "white",
        Black => "black",
        Asian => "asian",
        OtherUnknown => "other_unknown",
    }
);

/// Routinely collected clinical variables for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalCovariates {
    pub age: f64,
    pub er: ReceptorStatus,
    pub pr: ReceptorStatus,
    pub her2: Her2Status,
    pub t_stage: TStage,
    pub n_stage: NStage,
    pub idc: Component,
    pub ilc: Component,
    pub grade: Option<u8>,
    pub race: Option<Race>,
    pub oncotype_score: Option<f64>,
}

impl ClinicalCovariates {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(0.0..=100.0).contains(&self.age) {
            return Err(DomainError::OutOfRange { field: "age", value: self.age });
        }
        if let Some(g) = self.grade {
            if !(1..=3).contains(&g) {
                return Err(DomainError::OutOfRange { field: "grade", value: g as f64 });
            }
        }
        if let Some(o) = self.oncotype_score {
            if !(0.0..=100.0).contains(&o) {
                return Err(DomainError::OutOfRange { field: "oncotype_score", value: o });
            }
        }
        Ok(())
    }
}

/// Reference levels and optional slots for [`encode_covariates`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingScheme {
    pub er_reference: ReceptorStatus,
    pub pr_reference: ReceptorStatus,
    pub her2_reference: Her2Status,
    pub t_stage_reference: TStage,
    pub n_stage_reference: NStage,
    pub idc_reference: Component,
    pub ilc_reference: Component,
    /// Adds a race block with this reference level.
    pub race_reference: Option<Race>,
    /// Adds a numeric Oncotype slot, divided by 20 to span [0, 5].
    pub include_oncotype: bool,
    /// Adds a numeric grade slot.
    pub include_grade: bool,
}

impl Default for EncodingScheme {
    fn default() -> Self {
        EncodingScheme {
            er_reference: ReceptorStatus::Negative,
            pr_reference: ReceptorStatus::Negative,
            her2_reference: Her2Status::Negative,
            t_stage_reference: TStage::T1mi,
            n_stage_reference: NStage::N0,
            idc_reference: Component::No,
            ilc_reference: Component::No,
            race_reference: None,
            include_oncotype: false,
            include_grade: false,
        }
    }
}

fn push_indicators<T: Copy + PartialEq + fmt::Display>(
    out: &mut Vec<f64>,
    levels: &[T],
    reference: T,
    value: T,
) {
    for &level in levels.iter().filter(|&&l| l != reference) {
        out.push(if level == value { 1.0 } else { 0.0 });
    }
}

fn push_names<T: Copy + PartialEq + fmt::Display>(
    out: &mut Vec<String>,
    field: &str,
    levels: &[T],
    reference: T,
) {
    for level in levels.iter().filter(|&&l| l != reference) {
        out.push(format!("{field}={level}"));
    }
}

impl EncodingScheme {
    /// Column names in encoding order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = vec!["age".to_string()];
        if self.include_oncotype {
            names.push("oncotype/20".to_string());
        }
        if self.include_grade {
            names.push("grade".to_string());
        }
        push_names(&mut names, "er", ReceptorStatus::LEVELS, self.er_reference);
        push_names(&mut names, "pr", ReceptorStatus::LEVELS, self.pr_reference);
        push_names(&mut names, "her2", Her2Status::LEVELS, self.her2_reference);
        push_names(&mut names, "t_stage", TStage::LEVELS, self.t_stage_reference);
        push_names(&mut names, "n_stage", NStage::LEVELS, self.n_stage_reference);
        push_names(&mut names, "idc", Component::LEVELS, self.idc_reference);
        push_names(&mut names, "ilc", Component::LEVELS, self.ilc_reference);
        if let Some(r) = self.race_reference {
            push_names(&mut names, "race", Race::LEVELS, r);
        }
        names
    }

    pub fn width(&self) -> usize {
        self.feature_names().len()
    }
}

/// One numeric slot per continuous variable and one 0/1 indicator per
/// non-reference level of each categorical variable.
pub fn encode_covariates(
    c: &ClinicalCovariates,
    scheme: &EncodingScheme,
) -> Result<Vec<f64>, DomainError> {
    c.validate()?;
    let mut out = Vec::with_capacity(32);
    out.push(c.age);
    if scheme.include_oncotype {
        let o = c.oncotype_score.ok_or(DomainError::MissingCovariate("oncotype_score"))?;
        out.push(o / 20.0);
    }
    if scheme.include_grade {
        let g = c.grade.ok_or(DomainError::MissingCovariate("grade"))?;
        out.push(g as f64);
    }
    push_indicators(&mut out, ReceptorStatus::LEVELS, scheme.er_reference, c.er);
    push_indicators(&mut out, ReceptorStatus::LEVELS, scheme.pr_reference, c.pr);
    push_indicators(&mut out, Her2Status::LEVELS, scheme.her2_reference, c.her2);
    push_indicators(&mut out, TStage::LEVELS, scheme.t_stage_reference, c.t_stage);
    push_indicators(&mut out, NStage::LEVELS, scheme.n_stage_reference, c.n_stage);
    push_indicators(&mut out, Component::LEVELS, scheme.idc_reference, c.idc);
    push_indicators(&mut out, Component::LEVELS, scheme.ilc_reference, c.ilc);
    if let Some(reference) = scheme.race_reference {
        let race = c.race.ok_or(DomainError::MissingCovariate("race"))?;
        push_indicators(&mut out, Race::LEVELS, reference, race);
    }
    Ok(out)
}

/// Variable-size set of fixed-dimension patch feature vectors for one slide,
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBag {
    slide_id: String,
    dim: usize,
    vectors: Vec<f32>,
}

impl EmbeddingBag {
    pub fn new(slide_id: impl Into<String>, dim: usize, vectors: Vec<f32>) -> Result<Self, DomainError> {
        let slide_id = slide_id.into();
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(DomainError::BagShape { slide: slide_id, len: vectors.len(), dim });
        }
        if vectors.is_empty() {
            return Err(DomainError::EmptyBag(slide_id));
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(DomainError::NonFiniteEmbedding { slide: slide_id, patch: pos / dim });
        }
        Ok(EmbeddingBag { slide_id, dim, vectors })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_patches(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn patch(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }
}

/// One patient: covariates, raw outcomes and slide references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub dataset_id: String,
    pub clinical: ClinicalCovariates,
    pub outcome: OutcomeRecord,
    pub embedding_refs: Vec<String>,
}

impl SubjectRecord {
    pub fn endpoint(&self, endpoint: Endpoint) -> EndpointObservation {
        derive_endpoint(&self.outcome, endpoint)
    }
}
