//! `train-pathology` and `train-clinical`.

use std::fmt::Write as _;

use prognos_core::domain::SubjectRecord;
use prognos_core::ensemble::{EnsembleMember, MinMaxNormalizer, Modality};
use prognos_core::io::content_hash;
use prognos_core::search::{
    derive_seed, mscv_clinical, mscv_pathology, write_ledger, DatasetPartition, MscvConfig, ProvenanceEntry,
    SearchSpace, Theta, TrialRecord,
};

use crate::artifacts::{Context, FileRecord, StageWriter};
use crate::commands::prepare::embeddings_digest;
use crate::data::{load_ingested, PathologyData};
use crate::error::{CliError, Result};
use crate::members::{CandidateList, MemberDoc};
use crate::trainers::{clinical_scheme, encode_clinical, ClinicalTrainer, Combination, Loss, PathologyTrainer};

pub const PATHOLOGY_STAGE: &str = "train-pathology";
pub const CLINICAL_STAGE: &str = "train-clinical";

fn provenance_tsv(entries: &[ProvenanceEntry]) -> String {
    let mut out = String::from("trial\tfold\tseed\ttrain\tvalidation\ttouched\tclean\n");
    for e in entries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.trial,
            e.fold,
            e.seed,
            e.train.join(","),
            e.validation.join(","),
            e.touched.join(","),
            e.is_clean()
        );
    }
    out
}

fn mscv_config(ctx: &Context, n_trials: usize, seeds: usize, stream: &[u64]) -> MscvConfig {
    MscvConfig {
        n_trials,
        seeds_per_theta: seeds.max(1),
        master_seed: derive_seed(ctx.cfg.seed, stream),
        record_wall_time: false,
    }
}

fn best_overall(trials: &[TrialRecord], best: usize) -> f64 {
    trials[best].overall.expect("selected trial has a score")
}

/// Writes the scorers and member document; returns the candidate entry.
#[allow(clippy::too_many_arguments)]
fn write_member(
    w: &mut StageWriter,
    ctx: &Context,
    modality: Modality,
    name: &str,
    thetas: Vec<Theta>,
    scorers: Vec<Vec<u8>>,
    oof: &[f64],
    validation_score: f64,
) -> Result<EnsembleMember> {
    let mut records = Vec::with_capacity(scorers.len());
    for (i, bytes) in scorers.iter().enumerate() {
        let path = w.write(&format!("models/{name}/scorer-{i:03}.bin"), bytes)?;
        records.push(FileRecord { path: ctx.display_path(&path), sha256: content_hash(bytes) });
    }
    let doc = MemberDoc { name: name.to_string(), modality, combination: name.to_string(), thetas, scorers: records };
    let json = serde_json::to_string_pretty(&doc).expect("member serializes");
    let path = w.write(&format!("models/{name}/member.json"), json.as_bytes())?;
    Ok(EnsembleMember {
        name: name.to_string(),
        model_ref: ctx.display_path(&path),
        content_hash: content_hash(json.as_bytes()),
        normalizer: MinMaxNormalizer::fit(name, oof)?,
        validation_score,
    })
}

fn write_candidates(w: &mut StageWriter, modality: Modality, candidates: Vec<EnsembleMember>) -> Result<()> {
    let list = CandidateList { modality, candidates };
    let text = toml::to_string(&list).expect("candidates serialize");
    w.write_stamped("candidates.toml", &text)?;
    Ok(())
}

/// Runs the pathology search once per combination; each combination's
/// winner, averaged over its fold models, becomes one ensemble candidate.
pub fn train_pathology(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let partition = DatasetPartition::new(cfg.partition.train_only.clone(), cfg.partition.rotate.clone())?;
    let mut w = StageWriter::begin(ctx, PATHOLOGY_STAGE)?;
    let (cohort_path, subjects) = load_ingested(ctx)?;
    w.input(&cohort_path)?;
    let training = cfg.partition.training();
    let data = PathologyData::load(&ctx.paths.embeddings, &subjects, &training)?;
    let mut slides: Vec<&String> = data.bags.keys().collect();
    slides.sort();
    w.input_hash("embeddings[training]".into(), embeddings_digest(ctx, &slides)?);
    for d in &training {
        if !data.subjects.iter().any(|s| &s.dataset_id == d) {
            return Err(CliError::Validation(format!("training dataset `{d}` has no subjects with slides")));
        }
    }

    let mut candidates = Vec::new();
    for (ci, name) in cfg.pathology.combinations.iter().enumerate() {
        let combo: Combination = name.parse()?;
        let space: &SearchSpace = match combo.loss {
            Loss::Cox => &cfg.pathology.cox_space,
            Loss::DiscreteTime => &cfg.pathology.dt_space,
        };
        let trainer = PathologyTrainer { combo, data: &data, endpoint: cfg.endpoint, cfg: &cfg.pathology };
        let mcfg = mscv_config(ctx, cfg.pathology.n_trials, cfg.pathology.seeds_per_theta, &[10, ci as u64]);
        log::info!("pathology search `{combo}`: {} trials", mcfg.n_trials);
        let outcome = mscv_pathology(&trainer, &partition, space, &mcfg)?;
        w.write_stamped(&format!("ledger/{combo}.tsv"), &write_ledger(&outcome.trials))?;
        w.write_stamped(&format!("provenance/{combo}.tsv"), &provenance_tsv(&outcome.provenance))?;

        // Models arrive fold-major with one per seed; out-of-fold predictions
        // average the seeds of the fold that held the subject out.
        let n_seeds = mcfg.seeds_per_theta;
        let mut oof = Vec::new();
        for (k, fold_models) in outcome.models.chunks(n_seeds).enumerate() {
            let val = data.in_datasets(std::slice::from_ref(&partition.rotate[k]));
            let mut sums = vec![0.0; val.len()];
            for m in fold_models {
                let r = trainer.risks(m, &val).map_err(CliError::Numerical)?;
                sums.iter_mut().zip(r).for_each(|(s, v)| *s += v);
            }
            oof.extend(sums.into_iter().map(|s| s / fold_models.len() as f64));
        }
        let best = &outcome.trials[outcome.best];
        w.note(&format!("best.{combo}"), serde_json::to_string(&best.theta).expect("theta serializes"));
        let scorers = outcome.models.iter().map(|m| m.encode()).collect();
        let thetas = vec![best.theta.clone(); partition.rotate.len()];
        let score = best_overall(&outcome.trials, outcome.best);
        candidates.push(write_member(&mut w, ctx, Modality::Pathology, &combo.to_string(), thetas, scorers, &oof, score)?);
    }
    let mut excl = String::from("subject_id\treason\n");
    for (s, r) in &data.excluded {
        let _ = writeln!(excl, "{s}\t{r}");
    }
    w.write_stamped("exclusions.tsv", &excl)?;
    write_candidates(&mut w, Modality::Pathology, candidates)?;
    w.finish()?;
    Ok(())
}

/// Clinical search once per AFT distribution. Each split keeps its own
/// winner; the candidate averages the winners' predictions.
pub fn train_clinical(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut w = StageWriter::begin(ctx, CLINICAL_STAGE)?;
    let (cohort_path, subjects) = load_ingested(ctx)?;
    w.input(&cohort_path)?;
    let training = cfg.partition.training();
    if training.is_empty() {
        return Err(CliError::Validation("no training datasets configured".into()));
    }
    let splits: Vec<Vec<String>> =
        if cfg.clinical.splits.is_empty() { training.iter().map(|d| vec![d.clone()]).collect() } else { cfg.clinical.splits.clone() };
    if let Some(d) = splits.iter().flatten().find(|d| !training.contains(d)) {
        return Err(CliError::Validation(format!("clinical split names `{d}`, which is not a training dataset")));
    }
    let scheme = clinical_scheme(cfg.clinical.include_grade);
    let probe = ClinicalTrainer { dist: cfg.clinical.distributions[0], subjects: &[], scheme: scheme.clone(), endpoint: cfg.endpoint };
    let mut usable: Vec<SubjectRecord> = Vec::new();
    let mut excl = String::from("subject_id\treason\n");
    for s in subjects.iter().filter(|s| training.contains(&s.dataset_id)) {
        match probe.features(s) {
            Ok(_) => usable.push(s.clone()),
            Err(e) => {
                let _ = writeln!(excl, "{}\t{e}", s.subject_id);
            }
        }
    }
    w.write_stamped("exclusions.tsv", &excl)?;

    let mut candidates = Vec::new();
    for (di, &dist) in cfg.clinical.distributions.iter().enumerate() {
        let trainer = ClinicalTrainer { dist, subjects: &usable, scheme: scheme.clone(), endpoint: cfg.endpoint };
        let mcfg = mscv_config(ctx, cfg.clinical.n_trials, cfg.clinical.seeds_per_theta, &[20, di as u64]);
        let outcome = mscv_clinical(&trainer, &splits, &cfg.clinical.space, &mcfg)?;
        let name = format!("aft-{}", dist.as_str());
        let mut provenance = outcome.provenance.clone();
        provenance.sort_by_key(|e| (e.fold, e.trial, e.seed));
        w.write_stamped(&format!("provenance/{name}.tsv"), &provenance_tsv(&provenance))?;
        let n_seeds = mcfg.seeds_per_theta;
        let mut oof = Vec::new();
        let mut score = 0.0;
        let mut thetas = Vec::new();
        for (k, sel) in outcome.splits.iter().enumerate() {
            w.write_stamped(&format!("ledger/{name}-split{k}.tsv"), &write_ledger(&sel.trials))?;
            score += best_overall(&sel.trials, sel.best) / outcome.splits.len() as f64;
            thetas.push(sel.trials[sel.best].theta.clone());
            let models = &outcome.models[k * n_seeds..(k + 1) * n_seeds];
            for s in usable.iter().filter(|s| splits[k].contains(&s.dataset_id)) {
                let x = trainer.features(s).map_err(CliError::Validation)?;
                oof.push(models.iter().map(|m| m.risk(&x)).sum::<f64>() / models.len() as f64);
            }
        }
        w.note(&format!("best.{name}"), serde_json::to_string(&thetas).expect("thetas serialize"));
        let scorers = outcome.models.iter().map(encode_clinical).collect();
        candidates.push(write_member(&mut w, ctx, Modality::Clinical, &name, thetas, scorers, &oof, score)?);
    }
    write_candidates(&mut w, Modality::Clinical, candidates)?;
    w.finish()?;
    Ok(())
}
