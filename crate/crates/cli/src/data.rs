//! Loading cohorts and embedding bags.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use prognos_core::domain::{EmbeddingBag, Endpoint, Observation, SubjectRecord};
use prognos_core::io::{read_cohort, read_cohort_file, read_embedding};

use crate::artifacts::Context;
use crate::error::{CliError, Result};

pub const INGEST_STAGE: &str = "ingest";
pub const INGESTED_COHORT: &str = "cohort.csv";

/// Cohort CSV files of a directory in file-name order.
pub fn cohort_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::missing(dir, e.to_string()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::missing(dir, "no cohort CSV files"));
    }
    Ok(files)
}

/// Reads every cohort file; a subject id seen twice anywhere is fatal.
pub fn load_raw_cohorts(dir: &Path) -> Result<(Vec<PathBuf>, Vec<SubjectRecord>)> {
    let files = cohort_files(dir)?;
    let mut subjects = Vec::new();
    let mut seen = BTreeSet::new();
    for f in &files {
        for s in read_cohort_file(f).map_err(|e| CliError::Validation(format!("{}: {e}", f.display())))? {
            if !seen.insert(s.subject_id.clone()) {
                return Err(CliError::Validation(format!(
                    "{}: duplicate subject_id `{}`",
                    f.display(),
                    s.subject_id
                )));
            }
            subjects.push(s);
        }
    }
    Ok((files, subjects))
}

/// The canonical cohort written by `ingest`.
pub fn load_ingested(ctx: &Context) -> Result<(PathBuf, Vec<SubjectRecord>)> {
    let (path, text) = ctx.read_upstream(INGEST_STAGE, INGESTED_COHORT)?;
    let subjects = read_cohort(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok((path, subjects))
}

pub fn observations(subjects: &[&SubjectRecord], endpoint: Endpoint) -> Vec<Observation> {
    subjects.iter().map(|s| s.endpoint(endpoint).into()).collect()
}

pub fn by_dataset<'s>(subjects: &'s [SubjectRecord], datasets: &[String]) -> Vec<&'s SubjectRecord> {
    subjects.iter().filter(|s| datasets.contains(&s.dataset_id)).collect()
}

/// Subjects with slides and their decoded bags.
pub struct PathologyData {
    pub subjects: Vec<SubjectRecord>,
    pub bags: BTreeMap<String, EmbeddingBag>,
    /// `(subject_id, reason)` for subjects left out.
    pub excluded: Vec<(String, String)>,
}

impl PathologyData {
    /// Loads the bags of every subject in `datasets`. Subjects without slides
    /// are excluded with a reason; a referenced but missing file is an error.
    pub fn load(dir: &Path, subjects: &[SubjectRecord], datasets: &[String]) -> Result<Self> {
        let mut kept = Vec::new();
        let mut bags = BTreeMap::new();
        let mut excluded = Vec::new();
        for s in subjects.iter().filter(|s| datasets.contains(&s.dataset_id)) {
            if s.embedding_refs.is_empty() {
                excluded.push((s.subject_id.clone(), "no slides".to_string()));
                continue;
            }
            for slide in &s.embedding_refs {
                if !bags.contains_key(slide) {
                    let bag = read_embedding(dir, slide).map_err(|e| match e {
                        prognos_core::io::IoError::File { .. } => CliError::missing(dir.join(slide), e.to_string()),
                        other => CliError::Validation(format!("slide `{slide}`: {other}")),
                    })?;
                    bags.insert(slide.clone(), bag);
                }
            }
            kept.push(s.clone());
        }
        let dims: BTreeSet<usize> = bags.values().map(|b| b.dim()).collect();
        if dims.len() > 1 {
            return Err(CliError::Validation(format!("embedding dimensions disagree: {dims:?}")));
        }
        Ok(PathologyData { subjects: kept, bags, excluded })
    }

    pub fn bags_of(&self, s: &SubjectRecord) -> Vec<&EmbeddingBag> {
        s.embedding_refs.iter().map(|r| &self.bags[r]).collect()
    }

    pub fn in_datasets(&self, datasets: &[String]) -> Vec<&SubjectRecord> {
        self.subjects.iter().filter(|s| datasets.contains(&s.dataset_id)).collect()
    }
}
