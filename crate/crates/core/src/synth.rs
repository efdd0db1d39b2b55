//! Synthetic cohorts with a planted, logged risk model.
//!
//! Each subject has a latent vector z. True log-risk is linear in the first
//! k coordinates of z plus clinical effects and a per-cohort shift. Tumor
//! patches scatter around z; background patches are pure noise. Outcomes
//! come from exponential recurrence and death processes with exponential
//! censoring calibrated to a target censoring rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    derive_endpoint, ClinicalCovariates, Component, EmbeddingBag, Endpoint, Her2Status, NStage, OutcomeRecord, Race,
    ReceptorStatus, SubjectRecord, TStage,
};
use crate::search::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("censoring rate {target} is infeasible: achievable range is [{min:.3}, 1)")]
    InfeasibleCensoring { target: f64, min: f64 },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub name: String,
    pub n: usize,
    /// Added to every subject's log-risk.
    #[serde(default)]
    pub baseline_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub cohorts: Vec<CohortSpec>,
    pub embedding_dim: usize,
    /// Number of latent coordinates carrying signal.
    pub signal_dims: usize,
    /// Log-hazard change per unit of the normalized signal coordinate sum.
    pub embedding_effect: f64,
    /// Multiplier on the built-in clinical effects.
    pub clinical_effect: f64,
    pub patches_min: usize,
    pub patches_max: usize,
    pub tumor_fraction: f64,
    pub patch_noise: f64,
    pub max_slides: usize,
    /// Recurrence hazard per year at zero log-risk.
    pub baseline_hazard: f64,
    /// Fraction of subjects censored on the disease-free interval endpoint.
    pub censoring_rate: f64,
    pub max_followup: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            cohorts: vec![CohortSpec { name: "synthetic".into(), n: 300, baseline_shift: 0.0 }],
            embedding_dim: 16,
            signal_dims: 4,
            embedding_effect: 2.5,
            clinical_effect: 1.0,
            patches_min: 8,
            patches_max: 24,
            tumor_fraction: 0.5,
            patch_noise: 0.5,
            max_slides: 2,
            baseline_hazard: 0.06,
            censoring_rate: 0.6,
            max_followup: 15.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.cohorts.is_empty() || self.cohorts.iter().any(|c| c.n == 0) {
            return bad("need at least one non-empty cohort");
        }
        if self.embedding_dim == 0 || self.signal_dims > self.embedding_dim {
            return bad("signal_dims must not exceed a positive embedding_dim");
        }
        if self.patches_min == 0 || self.patches_max < self.patches_min {
            return bad("need 1 <= patches_min <= patches_max");
        }
        if !(self.tumor_fraction > 0.0 && self.tumor_fraction <= 1.0) {
            return bad("tumor_fraction must lie in (0, 1]");
        }
        if self.max_slides == 0 {
            return bad("max_slides must be positive");
        }
        if !(self.baseline_hazard > 0.0 && self.max_followup > 0.0 && self.patch_noise >= 0.0) {
            return bad("hazard, follow-up and noise must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub subject_id: String,
    pub dataset_id: String,
    /// Planted log-risk.
    pub true_risk: f64,
    /// Embedding part of the planted log-risk.
    pub embedding_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub subjects: Vec<SubjectRecord>,
    pub bags: Vec<EmbeddingBag>,
    pub truth: Vec<TruthRow>,
    /// Calibrated censoring hazard per year.
    pub censoring_hazard: f64,
    pub achieved_censoring: f64,
}

struct Draft {
    subject_id: String,
    dataset_id: String,
    clinical: ClinicalCovariates,
    recurrence: f64,
    distant: bool,
    death: f64,
    censor_u: f64,
    risk: f64,
    embedding_risk: f64,
    latent: Vec<f64>,
}

fn pick<T: Copy>(rng: &mut impl Rng, items: &[(T, f64)]) -> T {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(v, p) in items {
        acc += p;
        if u < acc {
            return v;
        }
    }
    items[items.len() - 1].0
}

fn round_time(t: f64) -> f64 {
    ((t * 1e4).round() / 1e4).max(1e-4)
}

fn clinical_risk(c: &ClinicalCovariates) -> f64 {
    let mut r = 0.1 * (c.age - 58.0) / 10.0;
    if c.er == ReceptorStatus::Negative {
        r += 0.5;
    }
    r += match c.n_stage {
        NStage::N1 => 0.4,
        NStage::N2 => 0.8,
        NStage::N3 => 1.1,
        _ => 0.0,
    };
    r += match c.t_stage {
        TStage::T2 => 0.3,
        TStage::T3 => 0.5,
        TStage::T4 => 0.7,
        _ => 0.0,
    };
    if let Some(g) = c.grade {
        r += 0.3 * (g as f64 - 2.0);
    }
    r
}

fn draw_clinical(rng: &mut impl Rng) -> ClinicalCovariates {
    let age: f64 = Normal::new(58.0, 12.0).expect("valid").sample(rng);
    let er = pick(rng, &[(ReceptorStatus::Positive, 0.75), (ReceptorStatus::Negative, 0.2), (ReceptorStatus::Unknown, 0.05)]);
    let pr = if er == ReceptorStatus::Positive {
        pick(rng, &[(ReceptorStatus::Positive, 0.8), (ReceptorStatus::Negative, 0.17), (ReceptorStatus::Unknown, 0.03)])
    } else {
        pick(rng, &[(ReceptorStatus::Positive, 0.1), (ReceptorStatus::Negative, 0.85), (ReceptorStatus::Unknown, 0.05)])
    };
    ClinicalCovariates {
        age: (age.clamp(25.0, 95.0) * 10.0).round() / 10.0,
        er,
        pr,
        her2: pick(
            rng,
            &[(Her2Status::Positive, 0.15), (Her2Status::Negative, 0.75), (Her2Status::Equivocal, 0.05), (Her2Status::Unknown, 0.05)],
        ),
        t_stage: pick(
            rng,
            &[
                (TStage::T1mi, 0.02),
                (TStage::T1a, 0.06),
                (TStage::T1b, 0.12),
                (TStage::T1c, 0.3),
                (TStage::T2, 0.35),
                (TStage::T3, 0.08),
                (TStage::T4, 0.03),
                (TStage::Tx, 0.02),
                (TStage::Unknown, 0.02),
            ],
        ),
        n_stage: pick(
            rng,
            &[
                (NStage::N0, 0.6),
                (NStage::N1, 0.25),
                (NStage::N2, 0.08),
                (NStage::N3, 0.03),
                (NStage::Nx, 0.02),
                (NStage::Unknown, 0.02),
            ],
        ),
        idc: pick(rng, &[(Component::Yes, 0.8), (Component::No, 0.17), (Component::Unknown, 0.03)]),
        ilc: pick(rng, &[(Component::Yes, 0.12), (Component::No, 0.85), (Component::Unknown, 0.03)]),
        grade: Some(pick(rng, &[(1u8, 0.25), (2, 0.45), (3, 0.3)])),
        race: Some(pick(rng, &[(Race::White, 0.65), (Race::Black, 0.15), (Race::Asian, 0.1), (Race::OtherUnknown, 0.1)])),
        oncotype_score: None,
    }
}

fn outcome_for(d: &Draft, censor: f64, max_followup: f64) -> OutcomeRecord {
    let end = censor.min(max_followup);
    let rec = round_time(d.recurrence);
    let death = round_time(d.death);
    let end_r = round_time(end);
    let death_seen = death <= end_r;
    let rec_seen = rec <= end_r && rec <= death;
    let (lrr, distant) = match (rec_seen, d.distant) {
        (true, true) => (None, Some(rec)),
        (true, false) => (Some(rec), None),
        _ => (None, None),
    };
    let followup = if death_seen { death } else { end_r };
    OutcomeRecord::new(lrr, distant, death_seen.then_some(death), Some(followup)).expect("generated outcome is valid")
}

fn censored_fraction(drafts: &[Draft], hazard: f64, max_followup: f64) -> f64 {
    let censored = drafts
        .iter()
        .filter(|d| {
            let c = if hazard > 0.0 { -d.censor_u.ln() / hazard } else { f64::INFINITY };
            !derive_endpoint(&outcome_for(d, c, max_followup), Endpoint::Dfi).event
        })
        .count();
    censored as f64 / drafts.len() as f64
}

/// Generates every cohort of the spec. Identical specs give identical output.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let k = spec.signal_dims;
    let mut drafts = Vec::new();
    for (ci, cohort) in spec.cohorts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[ci as u64]));
        for i in 0..cohort.n {
            let clinical = draw_clinical(&mut rng);
            let latent: Vec<f64> = (0..spec.embedding_dim).map(|_| rng.sample(StandardNormal)).collect();
            let embedding_risk = if k > 0 {
                spec.embedding_effect * latent[..k].iter().sum::<f64>() / (k as f64).sqrt()
            } else {
                0.0
            };
            let risk = embedding_risk + spec.clinical_effect * clinical_risk(&clinical) + cohort.baseline_shift;
            let rate = spec.baseline_hazard * risk.exp();
            let recurrence = Exp::new(rate).expect("positive rate").sample(&mut rng);
            let distant = rng.random_bool(0.6);
            let after: f64 = Exp::new(0.25).expect("positive rate").sample(&mut rng);
            let background_rate = 0.01 * (0.07 * (clinical.age - 58.0)).exp();
            let background: f64 = Exp::new(background_rate).expect("positive rate").sample(&mut rng);
            let death = background.min(recurrence + after);
            let censor_u: f64 = 1.0 - rng.random::<f64>();
            drafts.push(Draft {
                subject_id: format!("{}-{:05}", cohort.name, i),
                dataset_id: cohort.name.clone(),
                clinical,
                recurrence,
                distant,
                death,
                censor_u,
                risk,
                embedding_risk,
                latent,
            });
        }
    }

    let target = spec.censoring_rate;
    let min = censored_fraction(&drafts, 0.0, spec.max_followup);
    if !(target < 1.0) || target < min {
        return Err(SynthError::InfeasibleCensoring { target, min });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while censored_fraction(&drafts, hi, spec.max_followup) < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(SynthError::InfeasibleCensoring { target, min });
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if censored_fraction(&drafts, mid, spec.max_followup) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let hazard = if min >= target { 0.0 } else { hi };

    let mut subjects = Vec::with_capacity(drafts.len());
    let mut bags = Vec::new();
    let mut truth = Vec::with_capacity(drafts.len());
    for (idx, d) in drafts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1 << 32, idx as u64]));
        let censor = if hazard > 0.0 { -d.censor_u.ln() / hazard } else { f64::INFINITY };
        let outcome = outcome_for(d, censor, spec.max_followup);
        let mut clinical = d.clinical.clone();
        let noise: f64 = Normal::new(0.0, 8.0).expect("valid").sample(&mut rng);
        clinical.oncotype_score = Some(((25.0 + 12.0 * d.risk + noise).clamp(0.0, 100.0) * 10.0).round() / 10.0);
        let n_slides = rng.random_range(1..=spec.max_slides);
        let mut refs = Vec::with_capacity(n_slides);
        for s in 0..n_slides {
            let slide_id = format!("{}-s{}", d.subject_id, s);
            let n_patches = rng.random_range(spec.patches_min..=spec.patches_max);
            let n_tumor = ((n_patches as f64 * spec.tumor_fraction).round() as usize).clamp(1, n_patches);
            let mut vectors = Vec::with_capacity(n_patches * spec.embedding_dim);
            for p in 0..n_patches {
                for j in 0..spec.embedding_dim {
                    let e: f64 = rng.sample(StandardNormal);
                    let v = if p < n_tumor { d.latent[j] + spec.patch_noise * e } else { e };
                    vectors.push(v as f32);
                }
            }
            bags.push(EmbeddingBag::new(slide_id.clone(), spec.embedding_dim, vectors).expect("finite bag"));
            refs.push(slide_id);
        }
        truth.push(TruthRow {
            subject_id: d.subject_id.clone(),
            dataset_id: d.dataset_id.clone(),
            true_risk: d.risk,
            embedding_risk: d.embedding_risk,
        });
        subjects.push(SubjectRecord {
            subject_id: d.subject_id.clone(),
            dataset_id: d.dataset_id.clone(),
            clinical,
            outcome,
            embedding_refs: refs,
        });
    }
    let achieved = censored_fraction(&drafts, hazard, spec.max_followup);
    Ok(SynthOutput { subjects, bags, truth, censoring_hazard: hazard, achieved_censoring: achieved })
}

pub fn truth_tsv(rows: &[TruthRow]) -> String {
    let mut out = String::from("subject_id\tdataset_id\ttrue_risk\tembedding_risk\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.subject_id, r.dataset_id, r.true_risk, r.embedding_risk));
    }
    out
}
