//! Random hyperparameter search with multiple-source cross-validation.
//!
//! Folds rotate whole datasets rather than random rows. Training code reports
//! every dataset it reads through a [`Provenance`] handle and the harness
//! rejects any fold whose validation dataset shows up there.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("search space is empty")]
    EmptySpace,
    #[error("invalid distribution for `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("invalid dataset partition: {0}")]
    InvalidPartition(String),
    #[error("validation leakage: trial {trial} fold {fold} read validation dataset `{dataset}` during training")]
    Leakage { trial: usize, fold: usize, dataset: String },
    #[error("every trial was disqualified")]
    AllDisqualified,
    #[error("malformed trial ledger: {0}")]
    Ledger(String),
}

/// One sampled hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Float(v) => Some(*v),
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Str(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamSpec {
    LogUniform { low: f64, high: f64 },
    Uniform { low: f64, high: f64 },
    Categorical { values: Vec<ParamValue> },
}

impl ParamSpec {
    fn validate(&self, name: &str) -> Result<(), SearchError> {
        let bad = |reason: &str| Err(SearchError::InvalidSpec { name: name.to_string(), reason: reason.into() });
        match self {
            ParamSpec::LogUniform { low, high } if !(*low > 0.0 && high > low && high.is_finite()) => {
                bad("log-uniform needs 0 < low < high")
            }
            ParamSpec::Uniform { low, high } if !(high >= low && low.is_finite() && high.is_finite()) => {
                bad("uniform needs low <= high")
            }
            ParamSpec::Categorical { values } if values.is_empty() => bad("no categories"),
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> ParamValue {
        match self {
            ParamSpec::LogUniform { low, high } => {
                let u: f64 = rng.random();
                ParamValue::Float((low.ln() + u * (high.ln() - low.ln())).exp())
            }
            ParamSpec::Uniform { low, high } => {
                let u: f64 = rng.random();
                ParamValue::Float(low + u * (high - low))
            }
            ParamSpec::Categorical { values } => values[rng.random_range(0..values.len())].clone(),
        }
    }
}

/// Named distributions, iterated in key order so draws are reproducible.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: BTreeMap<String, ParamSpec>,
}

impl SearchSpace {
    pub fn with(mut self, name: &str, spec: ParamSpec) -> Self {
        self.params.insert(name.to_string(), spec);
        self
    }
}

pub type Theta = BTreeMap<String, ParamValue>;

pub fn sample_hyperparameters(space: &SearchSpace, rng: &mut impl Rng) -> Result<Theta, SearchError> {
    if space.params.is_empty() {
        return Err(SearchError::EmptySpace);
    }
    let mut theta = Theta::new();
    for (name, spec) in &space.params {
        spec.validate(name)?;
        theta.insert(name.clone(), spec.sample(rng));
    }
    Ok(theta)
}

/// `n` independent draws from a ChaCha stream seeded with `seed`.
pub fn sample_thetas(space: &SearchSpace, n: usize, seed: u64) -> Result<Vec<Theta>, SearchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_hyperparameters(space, &mut rng)).collect()
}

/// Deterministic child seed from a master seed and a path of indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

/// Datasets used only for training, and datasets rotated through validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPartition {
    pub train_only: Vec<String>,
    pub rotate: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

impl DatasetPartition {
    pub fn new(train_only: Vec<String>, rotate: Vec<String>) -> Result<Self, SearchError> {
        if rotate.is_empty() {
            return Err(SearchError::InvalidPartition("no datasets to rotate".into()));
        }
        let mut all: Vec<&String> = train_only.iter().chain(&rotate).collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(SearchError::InvalidPartition("dataset listed twice".into()));
        }
        Ok(DatasetPartition { train_only, rotate })
    }

    /// Fold k trains on everything except `rotate[k]` and validates on it.
    pub fn folds(&self) -> Vec<Fold> {
        (0..self.rotate.len())
            .map(|k| Fold {
                index: k,
                train: self
                    .train_only
                    .iter()
                    .chain(self.rotate.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, d)| d))
                    .cloned()
                    .collect(),
                validation: vec![self.rotate[k].clone()],
            })
            .collect()
    }
}

/// Records the dataset ids read while training one fold model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    touched: Vec<String>,
}

impl Provenance {
    pub fn touch(&mut self, dataset: &str) {
        if !self.touched.iter().any(|d| d == dataset) {
            self.touched.push(dataset.to_string());
        }
    }

    pub fn touched(&self) -> &[String] {
        &self.touched
    }
}

/// Validation result of one fold model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldEval {
    pub score: f64,
    /// Comparable pairs in the validation set (the fold weight c_k).
    pub weight: f64,
}

/// Model training and validation supplied by the caller.
pub trait FoldTrainer: Sync {
    type Model: Send;
    fn train(
        &self,
        theta: &Theta,
        train_datasets: &[String],
        seed: u64,
        provenance: &mut Provenance,
    ) -> Result<Self::Model, String>;
    fn evaluate(&self, model: &Self::Model, validation_datasets: &[String]) -> Result<FoldEval, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub validation: Vec<String>,
    pub seed_scores: Vec<f64>,
    /// Mean over seeds.
    pub score: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub theta: Theta,
    pub seeds: Vec<u64>,
    pub folds: Vec<FoldScore>,
    /// `(1/K) sum_k c_k v_k`; `None` when disqualified.
    pub overall: Option<f64>,
    pub disqualified: Option<String>,
    pub wall_seconds: Option<f64>,
}

/// `(1/K) sum_k c_k v_k` over the logged fold scores.
pub fn overall_score(folds: &[FoldScore]) -> f64 {
    folds.iter().map(|f| f.weight * f.score).sum::<f64>() / folds.len() as f64
}

/// Best trial by overall score, lowest index on ties.
pub fn select_best(records: &[TrialRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        if let Some(v) = r.overall {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Datasets a fold model was allowed to read and the ones it actually read.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvenanceEntry {
    pub trial: usize,
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub touched: Vec<String>,
}

impl ProvenanceEntry {
    pub fn is_clean(&self) -> bool {
        self.touched.iter().all(|d| !self.validation.contains(d) && self.train.contains(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MscvConfig {
    pub n_trials: usize,
    pub seeds_per_theta: usize,
    pub master_seed: u64,
    pub record_wall_time: bool,
}

impl Default for MscvConfig {
    fn default() -> Self {
        MscvConfig { n_trials: 20, seeds_per_theta: 1, master_seed: 0, record_wall_time: false }
    }
}

pub struct MscvOutcome<M> {
    pub trials: Vec<TrialRecord>,
    pub best: usize,
    /// Fold models of the selected trial, all seeds; prediction-averaged they
    /// form the selected model.
    pub models: Vec<M>,
    pub provenance: Vec<ProvenanceEntry>,
}

struct JobResult<M> {
    model: Option<M>,
    eval: Result<FoldEval, String>,
    provenance: ProvenanceEntry,
}

fn run_job<T: FoldTrainer>(
    trainer: &T,
    trial: usize,
    theta: &Theta,
    fold: &Fold,
    seed: u64,
) -> JobResult<T::Model> {
    let mut prov = Provenance::default();
    let trained = trainer.train(theta, &fold.train, seed, &mut prov);
    let provenance = ProvenanceEntry {
        trial,
        fold: fold.index,
        seed,
        train: fold.train.clone(),
        validation: fold.validation.clone(),
        touched: prov.touched,
    };
    match trained {
        Ok(model) => {
            let eval = trainer.evaluate(&model, &fold.validation);
            JobResult { model: Some(model), eval, provenance }
        }
        Err(e) => JobResult { model: None, eval: Err(e), provenance },
    }
}

/// Trains every (theta, seed, fold) combination concurrently and gathers the
/// results in trial order.
fn evaluate_trials<T: FoldTrainer>(
    trainer: &T,
    thetas: &[Theta],
    folds: &[Fold],
    seeds: &[Vec<u64>],
    record_wall_time: bool,
) -> Result<(Vec<TrialRecord>, Vec<Vec<T::Model>>, Vec<ProvenanceEntry>), SearchError> {
    let results: Vec<(Vec<JobResult<T::Model>>, f64)> = thetas
        .par_iter()
        .enumerate()
        .map(|(t, theta)| {
            let start = Instant::now();
            let jobs: Vec<(usize, usize)> =
                (0..folds.len()).flat_map(|f| (0..seeds[t].len()).map(move |s| (f, s))).collect();
            let out: Vec<JobResult<T::Model>> = jobs
                .par_iter()
                .map(|&(f, s)| run_job(trainer, t, theta, &folds[f], seeds[t][s]))
                .collect();
            (out, start.elapsed().as_secs_f64())
        })
        .collect();

    let mut records = Vec::with_capacity(thetas.len());
    let mut models = Vec::with_capacity(thetas.len());
    let mut provenance = Vec::new();
    for (t, (jobs, wall)) in results.into_iter().enumerate() {
        let n_seeds = seeds[t].len();
        let mut fold_scores = Vec::with_capacity(folds.len());
        let mut trial_models = Vec::with_capacity(jobs.len());
        let mut failure = None;
        let mut jobs = jobs.into_iter();
        for fold in folds {
            let mut seed_scores = Vec::with_capacity(n_seeds);
            let mut weight = f64::NAN;
            for _ in 0..n_seeds {
                let job = jobs.next().expect("one job per fold and seed");
                if !job.provenance.is_clean() {
                    let dataset = job
                        .provenance
                        .touched
                        .iter()
                        .find(|d| !job.provenance.train.contains(d))
                        .cloned()
                        .unwrap_or_default();
                    return Err(SearchError::Leakage { trial: t, fold: fold.index, dataset });
                }
                provenance.push(job.provenance);
                match job.eval {
                    Ok(e) if e.score.is_finite() => {
                        seed_scores.push(e.score);
                        weight = e.weight;
                    }
                    Ok(e) => failure = failure.or(Some(format!("fold {}: score {}", fold.index, e.score))),
                    Err(e) => failure = failure.or(Some(format!("fold {}: {e}", fold.index))),
                }
                if let Some(m) = job.model {
                    trial_models.push(m);
                }
            }
            let score = if seed_scores.is_empty() {
                f64::NAN
            } else {
                seed_scores.iter().sum::<f64>() / seed_scores.len() as f64
            };
            fold_scores.push(FoldScore {
                fold: fold.index,
                validation: fold.validation.clone(),
                seed_scores,
                score,
                weight,
            });
        }
        let overall = failure.is_none().then(|| overall_score(&fold_scores));
        records.push(TrialRecord {
            trial: t,
            theta: thetas[t].clone(),
            seeds: seeds[t].clone(),
            folds: fold_scores,
            overall,
            disqualified: failure,
            wall_seconds: record_wall_time.then_some(wall),
        });
        models.push(trial_models);
    }
    Ok((records, models, provenance))
}

fn trial_seeds(master: u64, n_trials: usize, per_theta: usize, stream: u64) -> Vec<Vec<u64>> {
    (0..n_trials)
        .map(|t| (0..per_theta.max(1)).map(|s| derive_seed(master, &[stream, t as u64, s as u64])).collect())
        .collect()
}

/// Pathology search: for each sampled theta, K fold models per seed, scored
/// by `(1/K) sum_k c_k v_k`; the winner's fold models are returned.
pub fn mscv_pathology<T: FoldTrainer>(
    trainer: &T,
    partition: &DatasetPartition,
    space: &SearchSpace,
    cfg: &MscvConfig,
) -> Result<MscvOutcome<T::Model>, SearchError> {
    let thetas = sample_thetas(space, cfg.n_trials, derive_seed(cfg.master_seed, &[1]))?;
    let seeds = trial_seeds(cfg.master_seed, thetas.len(), cfg.seeds_per_theta, 2);
    let folds = partition.folds();
    let (trials, mut models, provenance) = evaluate_trials(trainer, &thetas, &folds, &seeds, cfg.record_wall_time)?;
    let best = select_best(&trials).ok_or(SearchError::AllDisqualified)?;
    let models = std::mem::take(&mut models[best]);
    Ok(MscvOutcome { trials, best, models, provenance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSelection {
    pub split: usize,
    pub trials: Vec<TrialRecord>,
    pub best: usize,
}

pub struct ClinicalOutcome<M> {
    pub thetas: Vec<Theta>,
    pub splits: Vec<SplitSelection>,
    /// One winning model per split; the final model averages their predictions.
    pub models: Vec<M>,
    pub provenance: Vec<ProvenanceEntry>,
}

/// Clinical search: the same theta list is tried on every split; each split
/// keeps its own best theta, trained on the complement of the split.
pub fn mscv_clinical<T: FoldTrainer>(
    trainer: &T,
    splits: &[Vec<String>],
    space: &SearchSpace,
    cfg: &MscvConfig,
) -> Result<ClinicalOutcome<T::Model>, SearchError> {
    if splits.len() < 2 {
        return Err(SearchError::InvalidPartition("clinical search needs at least two splits".into()));
    }
    if splits.iter().any(|s| s.is_empty()) {
        return Err(SearchError::InvalidPartition("empty split".into()));
    }
    let thetas = sample_thetas(space, cfg.n_trials, derive_seed(cfg.master_seed, &[3]))?;
    let mut out_splits = Vec::with_capacity(splits.len());
    let mut out_models = Vec::with_capacity(splits.len());
    let mut provenance = Vec::new();
    for (k, validation) in splits.iter().enumerate() {
        let train: Vec<String> = splits
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .flat_map(|(_, s)| s.iter().cloned())
            .filter(|d| !validation.contains(d))
            .collect();
        let fold = Fold { index: k, train, validation: validation.clone() };
        let seeds = trial_seeds(cfg.master_seed, thetas.len(), cfg.seeds_per_theta, 4 + k as u64);
        let (mut trials, mut models, prov) =
            evaluate_trials(trainer, &thetas, std::slice::from_ref(&fold), &seeds, cfg.record_wall_time)?;
        for t in &mut trials {
            t.folds.iter_mut().for_each(|f| f.fold = k);
        }
        let best = select_best(&trials).ok_or(SearchError::AllDisqualified)?;
        // With several seeds the winner's models are all kept; averaged with
        // the other splits' winners they form the final model.
        out_models.extend(std::mem::take(&mut models[best]));
        provenance.extend(prov);
        out_splits.push(SplitSelection { split: k, trials, best });
    }
    Ok(ClinicalOutcome { thetas, splits: out_splits, models: out_models, provenance })
}

const LEDGER_HEADER: &str = "trial\ttheta\tfold_scores\tfold_weights\tseeds\toverall\tstatus\twall_seconds";

fn join_f64(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Tab-separated trial ledger, one row per trial. Floats use shortest
/// round-trip formatting so replay is exact.
pub fn write_ledger(records: &[TrialRecord]) -> String {
    let mut out = String::new();
    out.push_str(LEDGER_HEADER);
    out.push('\n');
    for r in records {
        let theta = serde_json::to_string(&r.theta).expect("theta serializes");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.trial,
            theta,
            join_f64(r.folds.iter().map(|f| f.score)),
            join_f64(r.folds.iter().map(|f| f.weight)),
            r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            r.overall.map(|v| v.to_string()).unwrap_or_default(),
            r.disqualified.as_deref().map(|s| s.replace(['\t', '\n'], " ")).unwrap_or_else(|| "ok".into()),
            r.wall_seconds.map(|v| v.to_string()).unwrap_or_default(),
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub trial: usize,
    pub theta: Theta,
    pub fold_scores: Vec<f64>,
    pub fold_weights: Vec<f64>,
    pub seeds: Vec<u64>,
    pub overall: Option<f64>,
    pub status: String,
}

/// Reads a ledger written by [`write_ledger`]; `#` comment lines are skipped.
pub fn read_ledger(text: &str) -> Result<Vec<LedgerRow>, SearchError> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(LEDGER_HEADER) {
        return Err(SearchError::Ledger("missing header".into()));
    }
    let parse_list = |s: &str| -> Result<Vec<f64>, SearchError> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|x| x.parse::<f64>().map_err(|e| SearchError::Ledger(e.to_string()))).collect()
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 8 {
                return Err(SearchError::Ledger(format!("expected 8 columns, got {}", cols.len())));
            }
            Ok(LedgerRow {
                trial: cols[0].parse().map_err(|_| SearchError::Ledger("bad trial index".into()))?,
                theta: serde_json::from_str(cols[1]).map_err(|e| SearchError::Ledger(e.to_string()))?,
                fold_scores: parse_list(cols[2])?,
                fold_weights: parse_list(cols[3])?,
                seeds: if cols[4].is_empty() {
                    Vec::new()
                } else {
                    cols[4]
                        .split(',')
                        .map(|s| s.parse().map_err(|_| SearchError::Ledger("bad seed".into())))
                        .collect::<Result<_, _>>()?
                },
                overall: if cols[5].is_empty() {
                    None
                } else {
                    Some(cols[5].parse().map_err(|_| SearchError::Ledger("bad overall".into()))?)
                },
                status: cols[6].to_string(),
            })
        })
        .collect()
}

/// Recomputes every overall score from the logged fold scores and weights
/// and returns the winning trial index.
pub fn replay_selection(rows: &[LedgerRow]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for r in rows {
        if r.status != "ok" || r.fold_scores.is_empty() {
            continue;
        }
        let v = r.fold_weights.iter().zip(&r.fold_scores).map(|(c, v)| c * v).sum::<f64>()
            / r.fold_scores.len() as f64;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((r.trial, v));
        }
    }
    best.map(|(t, _)| t)
}
