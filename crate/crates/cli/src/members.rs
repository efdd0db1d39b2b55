//! Ensemble member documents: each member lists its scorer files by
//! content hash; predictions average over those scorers.

use std::path::Path;

use prognos_core::aft::AftModel;
use prognos_core::domain::EmbeddingBag;
use prognos_core::ensemble::{EnsembleMember, EnsembleSpec, Modality};
use prognos_core::io::content_hash;
use prognos_core::pooling::PoolingMethod;
use prognos_core::search::Theta;
use serde::{Deserialize, Serialize};

use crate::artifacts::{Context, FileRecord};
use crate::error::{CliError, Result};
use crate::trainers::{decode_clinical, Combination, PathologyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberDoc {
    pub name: String,
    pub modality: Modality,
    /// `cox-mean`, `dt-attention`, `aft-normal`, ...
    pub combination: String,
    /// Hyperparameters behind each scorer group (one per fold or split).
    pub thetas: Vec<Theta>,
    /// Paths relative to the output directory.
    pub scorers: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub modality: Modality,
    pub candidates: Vec<EnsembleMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub clinical: EnsembleSpec,
    pub pathology: EnsembleSpec,
}

fn read_verified(ctx: &Context, rel: &str, expected: &str) -> Result<Vec<u8>> {
    let path = ctx.paths.output.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| CliError::missing(&path, e.to_string()))?;
    let actual = content_hash(&bytes);
    if actual != expected {
        return Err(CliError::Validation(format!(
            "{}: content hash {actual} does not match recorded {expected}",
            path.display()
        )));
    }
    Ok(bytes)
}

pub fn load_doc(ctx: &Context, member: &EnsembleMember) -> Result<MemberDoc> {
    let bytes = read_verified(ctx, &member.model_ref, &member.content_hash)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", member.model_ref)))
}

pub struct PathologyMember {
    pub name: String,
    pub models: Vec<PathologyModel>,
}

impl PathologyMember {
    pub fn raw(&self, bags: &[&EmbeddingBag]) -> std::result::Result<f64, String> {
        let mut total = 0.0;
        for m in &self.models {
            total += m.subject_risk(bags)?;
        }
        Ok(total / self.models.len() as f64)
    }
}

pub struct ClinicalMember {
    pub name: String,
    pub models: Vec<AftModel>,
}

impl ClinicalMember {
    pub fn raw(&self, x: &[f64]) -> f64 {
        self.models.iter().map(|m| m.risk(x)).sum::<f64>() / self.models.len() as f64
    }
}

pub fn load_pathology(ctx: &Context, member: &EnsembleMember) -> Result<PathologyMember> {
    let doc = load_doc(ctx, member)?;
    let combo: Combination = doc.combination.parse()?;
    let pooling: PoolingMethod = combo.pooling;
    let models = doc
        .scorers
        .iter()
        .map(|s| PathologyModel::decode(&read_verified(ctx, &s.path, &s.sha256)?, pooling))
        .collect::<Result<Vec<_>>>()?;
    if models.is_empty() {
        return Err(CliError::Validation(format!("member `{}` lists no scorers", doc.name)));
    }
    Ok(PathologyMember { name: doc.name, models })
}

pub fn load_clinical(ctx: &Context, member: &EnsembleMember) -> Result<ClinicalMember> {
    let doc = load_doc(ctx, member)?;
    let models = doc
        .scorers
        .iter()
        .map(|s| decode_clinical(&read_verified(ctx, &s.path, &s.sha256)?))
        .collect::<Result<Vec<_>>>()?;
    if models.is_empty() {
        return Err(CliError::Validation(format!("member `{}` lists no scorers", doc.name)));
    }
    Ok(ClinicalMember { name: doc.name, models })
}

pub fn read_candidates(ctx: &Context, stage: &str) -> Result<(std::path::PathBuf, CandidateList)> {
    let (path, text) = ctx.read_upstream(stage, "candidates.toml")?;
    let list: CandidateList = toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok((path, list))
}

pub fn read_ensemble(ctx: &Context) -> Result<(std::path::PathBuf, EnsembleManifest)> {
    let (path, text) = ctx.read_upstream("ensemble", "ensemble.toml")?;
    let m: EnsembleManifest = toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok((path, m))
}

pub fn relative(ctx: &Context, path: &Path) -> String {
    ctx.display_path(path)
}
