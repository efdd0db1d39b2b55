//! Run configuration, read from a single TOML document.

use std::path::{Path, PathBuf};

use prognos_core::aft::AftDistribution;
use prognos_core::domain::Endpoint;
use prognos_core::ensemble::{MissingModalityPolicy, RiskCutoff};
use prognos_core::io::content_hash;
use prognos_core::search::{ParamSpec, ParamValue, SearchSpace};
use prognos_core::synth::SynthSpec;
use prognos_core::tiling::TilingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DATA_DIR_ENV: &str = "PROGNOS_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub endpoint: Endpoint,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub paths: PathsConfig,
    pub partition: PartitionConfig,
    pub pathology: PathologyConfig,
    pub clinical: ClinicalConfig,
    pub ensemble: EnsembleConfig,
    pub cutoff: CutoffConfig,
    pub report: ReportConfig,
    pub tiling: TilingSection,
    pub synth: Option<SynthSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            endpoint: Endpoint::Dfi,
            workers: 0,
            paths: PathsConfig::default(),
            partition: PartitionConfig::default(),
            pathology: PathologyConfig::default(),
            clinical: ClinicalConfig::default(),
            ensemble: EnsembleConfig::default(),
            cutoff: CutoffConfig::default(),
            report: ReportConfig::default(),
            tiling: TilingSection::default(),
            synth: None,
        }
    }
}

/// Relative paths resolve against `root`, then `PROGNOS_DATA_DIR`, then the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub root: Option<PathBuf>,
    /// Directory of cohort CSV files, read in file-name order.
    pub cohorts: PathBuf,
    /// Directory of embedding files named by slide id.
    pub embeddings: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            root: None,
            cohorts: "cohorts".into(),
            embeddings: "embeddings".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Training datasets never used for validation.
    pub train_only: Vec<String>,
    /// Training datasets rotated through validation.
    pub rotate: Vec<String>,
    /// Held-out evaluation datasets.
    pub test: Vec<String>,
}

impl PartitionConfig {
    pub fn training(&self) -> Vec<String> {
        self.train_only.iter().chain(&self.rotate).cloned().collect()
    }
}

fn log_uniform(low: f64, high: f64) -> ParamSpec {
    ParamSpec::LogUniform { low, high }
}

fn categorical_ints(values: &[i64]) -> ParamSpec {
    ParamSpec::Categorical { values: values.iter().map(|&v| ParamValue::Int(v)).collect() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathologyConfig {
    /// Loss and pooling combinations searched, e.g. `cox-mean`, `dt-attention`.
    pub combinations: Vec<String>,
    pub n_trials: usize,
    pub seeds_per_theta: usize,
    /// Discrete-time grid size, cut at event-time quantiles of the training folds.
    pub intervals: usize,
    pub horizon: f64,
    pub cox_epochs: usize,
    pub cox_batch_size: Option<usize>,
    pub dt_epochs: usize,
    pub dt_batch_size: Option<usize>,
    pub cox_space: SearchSpace,
    pub dt_space: SearchSpace,
}

impl Default for PathologyConfig {
    fn default() -> Self {
        PathologyConfig {
            combinations: vec!["cox-mean".into(), "cox-max".into(), "dt-attention".into()],
            n_trials: 20,
            seeds_per_theta: 1,
            intervals: prognos_core::discrete_time::DEFAULT_INTERVALS,
            horizon: prognos_core::discrete_time::DEFAULT_HORIZON,
            cox_epochs: 200,
            cox_batch_size: None,
            dt_epochs: 60,
            dt_batch_size: Some(64),
            cox_space: SearchSpace::default()
                .with("alpha", log_uniform(1e-4, 1e-1))
                .with("gamma", ParamSpec::Uniform { low: 0.0, high: 1.0 })
                .with("step_size", log_uniform(3e-3, 3e-2)),
            dt_space: SearchSpace::default()
                .with("alpha", log_uniform(1e-4, 1e-2))
                .with("gamma", ParamSpec::Uniform { low: 0.0, high: 1.0 })
                .with("step_size", log_uniform(1e-3, 1e-2))
                .with("hidden", categorical_ints(&[16, 64]))
                .with("attention_hidden", categorical_ints(&[64, 128])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClinicalConfig {
    /// One candidate member per distribution.
    pub distributions: Vec<AftDistribution>,
    pub n_trials: usize,
    pub seeds_per_theta: usize,
    /// Dataset groups rotated by the clinical search; empty means one split
    /// per training dataset.
    pub splits: Vec<Vec<String>>,
    pub space: SearchSpace,
    pub include_grade: bool,
}

impl Default for ClinicalConfig {
    fn default() -> Self {
        ClinicalConfig {
            distributions: AftDistribution::ALL.to_vec(),
            n_trials: 20,
            seeds_per_theta: 1,
            splits: Vec::new(),
            space: SearchSpace::default().with("l2", log_uniform(1e-4, 1.0)),
            include_grade: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub k_pathology: usize,
    pub k_clinical: usize,
    pub missing_modality: MissingModalityPolicy,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { k_pathology: 10, k_clinical: 10, missing_modality: MissingModalityPolicy::Reject }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutoffConfig {
    pub percentile: f64,
    /// Datasets whose fused scores define the cutoff; empty means all
    /// training datasets.
    pub population: Vec<String>,
}

impl Default for CutoffConfig {
    fn default() -> Self {
        CutoffConfig { percentile: RiskCutoff::DEFAULT_PERCENTILE, population: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub bootstrap_resamples: usize,
    /// Horizon for the quartile recurrence-rate table, in years.
    pub quartile_horizon: f64,
    /// Score change the continuous hazard ratio is reported per.
    pub hr_unit: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { bootstrap_resamples: 1000, quartile_horizon: 10.0, hr_unit: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingSection {
    /// Directory of PNG/PNM rasters; the file stem is the slide id.
    pub images: PathBuf,
    pub mpp: f64,
    #[serde(flatten)]
    pub grid: TilingConfig,
}

impl Default for TilingSection {
    fn default() -> Self {
        TilingSection { images: "images".into(), mpp: 0.5, grid: TilingConfig::default() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e.to_string()))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Validation(m));
        let mut seen: Vec<&String> =
            self.partition.train_only.iter().chain(&self.partition.rotate).chain(&self.partition.test).collect();
        seen.sort();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("dataset `{}` appears in more than one partition role", w[0]));
        }
        for c in &self.pathology.combinations {
            c.parse::<crate::trainers::Combination>()?;
        }
        if !(self.cutoff.percentile > 0.0 && self.cutoff.percentile < 100.0) {
            return bad(format!("cutoff percentile {} outside (0, 100)", self.cutoff.percentile));
        }
        if self.ensemble.k_pathology == 0 || self.ensemble.k_clinical == 0 {
            return bad("ensemble sizes must be positive".into());
        }
        if !(self.pathology.horizon > 0.0) || self.pathology.intervals == 0 {
            return bad("pathology horizon and intervals must be positive".into());
        }
        if !(self.report.hr_unit > 0.0) {
            return bad("report.hr_unit must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form with paths removed, so moving the
    /// data does not change the hash. Inputs are covered by their own hashes.
    pub fn hash(&self, subgroup: Option<&str>) -> String {
        let mut canonical = self.clone();
        canonical.paths = PathsConfig::default();
        let mut text = toml::to_string(&canonical).expect("config serializes");
        if let Some(s) = subgroup {
            text.push_str("\n# subgroup\n");
            text.push_str(s);
        }
        content_hash(text.as_bytes())
    }
}

/// Resolved filesystem locations for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPaths {
    pub root: PathBuf,
    pub cohorts: PathBuf,
    pub embeddings: PathBuf,
    pub output: PathBuf,
    pub images: PathBuf,
}

pub fn resolve_paths(cfg: &RunConfig, config_dir: &Path, out_override: Option<&Path>) -> ResolvedPaths {
    let root = match &cfg.paths.root {
        Some(r) if r.is_absolute() => r.clone(),
        Some(r) => config_dir.join(r),
        None => match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => config_dir.to_path_buf(),
        },
    };
    let under = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    ResolvedPaths {
        cohorts: under(&cfg.paths.cohorts),
        embeddings: under(&cfg.paths.embeddings),
        output: out_override.map(Path::to_path_buf).unwrap_or_else(|| under(&cfg.paths.output)),
        images: under(&cfg.tiling.images),
        root,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn hash_ignores_paths() {
        let mut a = RunConfig::default();
        let b = a.clone();
        a.paths.output = "elsewhere".into();
        assert_eq!(a.hash(None), b.hash(None));
        a.seed = 9;
        assert_ne!(a.hash(None), b.hash(None));
        assert_ne!(b.hash(Some("er=positive")), b.hash(None));
    }

    #[test]
    fn rejects_overlapping_roles() {
        let text = "[partition]\nrotate = [\"a\", \"b\"]\ntest = [\"b\"]\n";
        assert!(matches!(RunConfig::parse(text), Err(CliError::Validation(_))));
        assert!(RunConfig::parse("unknown_key = 1").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::parse("seed = 3\nendpoint = \"RFS\"\n[pathology]\nn_trials = 2\n").unwrap();
        assert_eq!(cfg.pathology.n_trials, 2);
        assert_eq!(cfg.pathology.intervals, 8);
        assert_eq!(cfg.endpoint, Endpoint::Rfs);
    }
}
