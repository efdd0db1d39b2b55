//! `build-ensemble` and `evaluate`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use prognos_core::coxfit::{fit_cox_exact, ExactOptions};
use prognos_core::domain::{Observation, SubjectRecord};
use prognos_core::ensemble::{fuse_partial, select_top_k, EnsembleSpec, Modality};
use prognos_core::meta::bootstrap_c_index_se;
use prognos_core::metrics::{c_index, recurrence_rate_by_quartile, ScoredObservation};
use prognos_core::search::derive_seed;
use rayon::prelude::*;

use crate::artifacts::{parse_f64, parse_tsv, Context, StageWriter};
use crate::commands::train::{CLINICAL_STAGE, PATHOLOGY_STAGE};
use crate::data::{load_ingested, PathologyData};
use crate::error::{CliError, Result};
use crate::members::{load_clinical, load_pathology, read_candidates, read_ensemble, CandidateList, EnsembleManifest};
use crate::trainers::{clinical_scheme, ClinicalTrainer};

pub const EVALUATE_STAGE: &str = "evaluate";
pub const SCORES_FILE: &str = "scores.tsv";
pub const SCORES_HEADER: &str = "subject_id\tdataset_id\trole\ttime\tevent\tclinical\tpathology\tfused\tfused_unclamped";
pub const METRICS_HEADER: &str =
    "dataset\tn\tevents\tc_index\tc_index_se\tc_clinical\tc_pathology\thr_per_unit\thr_lower\thr_upper\thr_p";

fn top_k(list: &CandidateList, k: usize) -> Result<EnsembleSpec> {
    let scores: Vec<f64> = list.candidates.iter().map(|c| c.validation_score).collect();
    let members = select_top_k(&scores, k).into_iter().map(|i| list.candidates[i].clone()).collect();
    Ok(EnsembleSpec::new(list.modality, members)?)
}

/// Keeps the top-K candidates of each modality by validation score.
pub fn build_ensemble(ctx: &Context) -> Result<()> {
    let mut w = StageWriter::begin(ctx, "ensemble")?;
    let (ppath, pathology) = read_candidates(ctx, PATHOLOGY_STAGE)?;
    let (cpath, clinical) = read_candidates(ctx, CLINICAL_STAGE)?;
    w.input(&ppath)?;
    w.input(&cpath)?;
    if pathology.modality != Modality::Pathology || clinical.modality != Modality::Clinical {
        return Err(CliError::Validation("candidate lists carry the wrong modality".into()));
    }
    let manifest = EnsembleManifest {
        pathology: top_k(&pathology, ctx.cfg.ensemble.k_pathology)?,
        clinical: top_k(&clinical, ctx.cfg.ensemble.k_clinical)?,
    };
    for m in &manifest.pathology.members {
        load_pathology(ctx, m)?;
    }
    for m in &manifest.clinical.members {
        load_clinical(ctx, m)?;
    }
    w.write_stamped("ensemble.toml", &toml::to_string(&manifest).expect("ensemble serializes"))?;
    w.finish()?;
    Ok(())
}

/// One scored subject as written to `scores.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub subject_id: String,
    pub dataset_id: String,
    pub role: String,
    pub obs: Observation,
    pub clinical: Option<f64>,
    pub pathology: Option<f64>,
    pub fused: f64,
    pub fused_unclamped: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

fn parse_opt(path: &Path, s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        Ok(None)
    } else {
        parse_f64(path, s).map(Some)
    }
}

pub fn read_scores(ctx: &Context) -> Result<Vec<ScoreRow>> {
    let (path, text) = ctx.read_upstream(EVALUATE_STAGE, SCORES_FILE)?;
    parse_tsv(&path, &text, SCORES_HEADER)?
        .into_iter()
        .map(|c| {
            Ok(ScoreRow {
                subject_id: c[0].to_string(),
                dataset_id: c[1].to_string(),
                role: c[2].to_string(),
                obs: Observation::new(parse_f64(&path, c[3])?, c[4] == "1"),
                clinical: parse_opt(&path, c[5])?,
                pathology: parse_opt(&path, c[6])?,
                fused: parse_f64(&path, c[7])?,
                fused_unclamped: parse_f64(&path, c[8])?,
            })
        })
        .collect()
}

/// `(dataset label, rows)` for each test dataset in config order, then all
/// test rows together under `all`.
pub fn test_groups<'r>(ctx: &Context, rows: &'r [ScoreRow]) -> Vec<(String, Vec<&'r ScoreRow>)> {
    let mut groups: Vec<(String, Vec<&ScoreRow>)> = ctx
        .cfg
        .partition
        .test
        .iter()
        .map(|d| (d.clone(), rows.iter().filter(|r| &r.dataset_id == d).collect()))
        .collect();
    groups.push(("all".into(), rows.iter().filter(|r| r.role == "test").collect()));
    groups
}

fn c_of(rows: &[&ScoreRow], f: impl Fn(&ScoreRow) -> Option<f64>) -> Option<f64> {
    let scored: Option<Vec<ScoredObservation>> = rows.iter().map(|r| f(r).map(|v| ScoredObservation::new(v, r.obs))).collect();
    c_index(&scored?).ok().map(|c| c.value)
}

/// Scores every training and test subject with both modality ensembles and
/// fuses them; writes scores, per-dataset metrics and quartile tables.
pub fn evaluate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    if cfg.partition.test.is_empty() {
        return Err(CliError::Validation("no test datasets configured".into()));
    }
    let mut w = StageWriter::begin(ctx, EVALUATE_STAGE)?;
    let (epath, ensemble) = read_ensemble(ctx)?;
    w.input(&epath)?;
    let (cohort_path, subjects) = load_ingested(ctx)?;
    w.input(&cohort_path)?;
    let training = cfg.partition.training();
    let datasets: Vec<String> = training.iter().chain(&cfg.partition.test).cloned().collect();
    let data = PathologyData::load(&ctx.paths.embeddings, &subjects, &datasets)?;
    let pathology = ensemble.pathology.members.iter().map(|m| load_pathology(ctx, m)).collect::<Result<Vec<_>>>()?;
    let clinical = ensemble.clinical.members.iter().map(|m| load_clinical(ctx, m)).collect::<Result<Vec<_>>>()?;
    let features = ClinicalTrainer {
        dist: prognos_core::aft::AftDistribution::Normal,
        subjects: &[],
        scheme: clinical_scheme(cfg.clinical.include_grade),
        endpoint: cfg.endpoint,
    };

    let mut selected: Vec<&SubjectRecord> = subjects.iter().filter(|s| datasets.contains(&s.dataset_id)).collect();
    if let Some((_, expr)) = &ctx.subgroup {
        selected.retain(|s| expr.matches(s));
    }
    let policy = cfg.ensemble.missing_modality;
    let scored: Vec<std::result::Result<ScoreRow, String>> = selected
        .par_iter()
        .map(|s| {
            let y_c = match features.features(s) {
                Ok(x) => {
                    let raw: Vec<f64> = clinical.iter().map(|m| m.raw(&x)).collect();
                    Some(ensemble.clinical.score(&raw).map_err(|e| e.to_string())?)
                }
                Err(_) => None,
            };
            let y_p = if s.embedding_refs.is_empty() {
                None
            } else {
                let bags = data.bags_of(s);
                let raw = pathology.iter().map(|m| m.raw(&bags).map_err(|e| format!("{}: {e}", m.name))).collect::<std::result::Result<Vec<_>, _>>()?;
                Some(ensemble.pathology.score(&raw).map_err(|e| e.to_string())?)
            };
            let fused = fuse_partial(y_c, y_p, policy).map_err(|e| e.to_string())?;
            Ok(ScoreRow {
                subject_id: s.subject_id.clone(),
                dataset_id: s.dataset_id.clone(),
                role: if training.contains(&s.dataset_id) { "train" } else { "test" }.to_string(),
                obs: s.endpoint(cfg.endpoint).into(),
                clinical: y_c,
                pathology: y_p,
                fused: fused.value,
                fused_unclamped: fused.unclamped,
            })
        })
        .collect();

    let mut rows = Vec::with_capacity(scored.len());
    let mut excl = String::from("subject_id\treason\n");
    for (s, r) in selected.iter().zip(scored) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                let _ = writeln!(excl, "{}\t{e}", s.subject_id);
            }
        }
    }
    let mut scores = format!("{SCORES_HEADER}\n");
    for r in &rows {
        let _ = writeln!(
            scores,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.subject_id,
            r.dataset_id,
            r.role,
            r.obs.time,
            u8::from(r.obs.event),
            opt(r.clinical),
            opt(r.pathology),
            r.fused,
            r.fused_unclamped
        );
    }
    w.write_stamped(SCORES_FILE, &scores)?;
    w.write_stamped("exclusions.tsv", &excl)?;

    let mut metrics = format!("{METRICS_HEADER}\n");
    for (gi, (label, group)) in test_groups(ctx, &rows).iter().enumerate() {
        let n = group.len();
        let events = group.iter().filter(|r| r.obs.event).count();
        let fused: Vec<ScoredObservation> = group.iter().map(|r| ScoredObservation::new(r.fused, r.obs)).collect();
        let c = c_index(&fused).ok().map(|c| c.value);
        let se = bootstrap_c_index_se(&fused, cfg.report.bootstrap_resamples, derive_seed(cfg.seed, &[30, gi as u64]))
            .ok()
            .map(|b| b.se);
        let hr = if n >= 2 && events > 0 {
            let x = Array2::from_shape_fn((n, 1), |(i, _)| group[i].fused);
            let obs: Vec<Observation> = group.iter().map(|r| r.obs).collect();
            fit_cox_exact(x.view(), &obs, None, ExactOptions::default()).ok()
        } else {
            None
        };
        let (hr_v, hr_lo, hr_hi, hr_p) = match &hr {
            Some(f) => {
                let (h, lo, hi) = f.hr_per(0, cfg.report.hr_unit);
                (Some(h), Some(lo), Some(hi), Some(f.wald_p[0]))
            }
            None => (None, None, None, None),
        };
        let _ = writeln!(
            metrics,
            "{label}\t{n}\t{events}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            opt(c),
            opt(se),
            opt(c_of(group, |r| r.clinical)),
            opt(c_of(group, |r| r.pathology)),
            opt(hr_v),
            opt(hr_lo),
            opt(hr_hi),
            opt(hr_p)
        );
    }
    w.write_stamped("metrics.tsv", &metrics)?;

    let test: Vec<ScoredObservation> =
        rows.iter().filter(|r| r.role == "test").map(|r| ScoredObservation::new(r.fused, r.obs)).collect();
    let mut quart = String::from("quartile\tn\tscore_mean\tscore_min\tscore_max\tevent_rate\tlower\tupper\tevaluated_at\ttruncated\n");
    if let Ok(q) = recurrence_rate_by_quartile(&test, cfg.report.quartile_horizon) {
        for r in q {
            let _ = writeln!(
                quart,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.quartile, r.n, r.score_mean, r.score_min, r.score_max, r.km_event_rate, r.ci_lower, r.ci_upper, r.evaluated_at, r.truncated
            );
        }
    }
    w.write_stamped("quartiles.tsv", &quart)?;
    w.note("c_index_se", format!("bootstrap, {} resamples", cfg.report.bootstrap_resamples));
    w.note("hr_unit", cfg.report.hr_unit.to_string());
    w.finish()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub n: usize,
    pub events: usize,
    pub c_index: Option<f64>,
    pub c_index_se: Option<f64>,
}

pub fn read_metrics(ctx: &Context) -> Result<(std::path::PathBuf, Vec<MetricRow>)> {
    let (path, text) = ctx.read_upstream(EVALUATE_STAGE, "metrics.tsv")?;
    let rows = parse_tsv(&path, &text, METRICS_HEADER)?
        .into_iter()
        .map(|c| {
            Ok(MetricRow {
                dataset: c[0].to_string(),
                n: c[1].parse().map_err(|_| CliError::Validation(format!("{}: bad n", path.display())))?,
                events: c[2].parse().map_err(|_| CliError::Validation(format!("{}: bad events", path.display())))?,
                c_index: parse_opt(&path, c[3])?,
                c_index_se: parse_opt(&path, c[4])?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((path, rows))
}
