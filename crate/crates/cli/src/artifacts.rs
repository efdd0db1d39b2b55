//! Stage output directories, run manifests and overwrite protection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use prognos_core::io::{content_hash, file_hash, write_file};
use serde::{Deserialize, Serialize};

use crate::config::{ResolvedPaths, RunConfig};
use crate::error::{CliError, Result};
use crate::subgroup::Expr;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Everything a subcommand needs: the effective config, its hash and the
/// resolved locations.
pub struct Context {
    pub cfg: RunConfig,
    pub paths: ResolvedPaths,
    pub config_hash: String,
    pub subgroup: Option<(String, Expr)>,
    pub force: bool,
}

impl Context {
    pub fn new(cfg: RunConfig, paths: ResolvedPaths, subgroup: Option<String>, force: bool) -> Result<Self> {
        let subgroup = match subgroup {
            Some(s) => {
                let e = crate::subgroup::parse(&s)?;
                Some((s, e))
            }
            None => None,
        };
        let config_hash = cfg.hash(subgroup.as_ref().map(|(s, _)| s.as_str()));
        Ok(Context { cfg, paths, config_hash, subgroup, force })
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.paths.output.join(stage)
    }

    /// Comment line prefixed to every text artifact.
    pub fn stamp(&self) -> String {
        format!("# config_sha256={} seed={}\n", self.config_hash, self.cfg.seed)
    }

    /// Path shown in manifests: relative to the output or data root when
    /// possible, so relocated reruns produce identical manifests.
    pub fn display_path(&self, p: &Path) -> String {
        for base in [&self.paths.output, &self.paths.root] {
            if let Ok(rel) = p.strip_prefix(base) {
                return rel.to_string_lossy().replace('\\', "/");
            }
        }
        p.to_string_lossy().into_owned()
    }

    /// Reads an upstream stage file, failing with a missing-artifact error.
    pub fn read_upstream(&self, stage: &str, file: &str) -> Result<(PathBuf, String)> {
        let path = self.stage_dir(stage).join(file);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::missing(&path, format!("run `{stage}` first ({e})")))?;
        Ok((path, text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub endpoint: String,
    #[serde(default)]
    pub subgroup: String,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
    #[serde(default)]
    pub inputs: Vec<FileRecord>,
    #[serde(default)]
    pub outputs: Vec<FileRecord>,
}

/// Collects one stage's outputs and writes its manifest last.
pub struct StageWriter<'a> {
    ctx: &'a Context,
    stage: String,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    notes: BTreeMap<String, String>,
}

impl<'a> StageWriter<'a> {
    /// Refuses to reuse a stage directory produced under a different config
    /// hash unless forced.
    pub fn begin(ctx: &'a Context, stage: &str) -> Result<Self> {
        let dir = ctx.stage_dir(stage);
        let manifest_path = dir.join(MANIFEST_FILE);
        if let Ok(text) = std::fs::read_to_string(&manifest_path) {
            let previous: RunManifest = toml::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", manifest_path.display())))?;
            if previous.config_sha256 != ctx.config_hash && !ctx.force {
                return Err(CliError::Validation(format!(
                    "{} was produced with config {}, current config is {}; refusing to overwrite (use --force)",
                    dir.display(),
                    previous.config_sha256,
                    ctx.config_hash
                )));
            }
        }
        Ok(StageWriter {
            ctx,
            stage: stage.to_string(),
            dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = file_hash(path).map_err(|e| CliError::missing(path, e.to_string()))?;
        self.inputs.insert(self.ctx.display_path(path), hash);
        Ok(())
    }

    pub fn input_hash(&mut self, label: String, hash: String) {
        self.inputs.insert(label, hash);
    }

    pub fn note(&mut self, key: &str, value: impl Into<String>) {
        self.notes.insert(key.to_string(), value.into());
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        self.write_at(&path, bytes)?;
        Ok(path)
    }

    /// Writes outside the stage directory (e.g. synthetic cohorts).
    pub fn write_at(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_file(path, bytes)?;
        self.outputs.insert(self.ctx.display_path(path), content_hash(bytes));
        Ok(())
    }

    /// Writes a text artifact preceded by the stamp line.
    pub fn write_stamped(&mut self, rel: &str, body: &str) -> Result<PathBuf> {
        let text = format!("{}{}", self.ctx.stamp(), body);
        self.write(rel, text.as_bytes())
    }

    /// SVG with the stamp inside an XML comment after the prolog.
    pub fn write_svg(&mut self, rel: &str, svg: &str) -> Result<PathBuf> {
        let comment = format!("<!-- config_sha256={} seed={} -->\n", self.ctx.config_hash, self.ctx.cfg.seed);
        let text = match svg.find("?>") {
            Some(i) if svg.starts_with("<?xml") => {
                let split = svg[i..].find('\n').map(|j| i + j + 1).unwrap_or(svg.len());
                format!("{}{}{}", &svg[..split], comment, &svg[split..])
            }
            _ => format!("{comment}{svg}"),
        };
        self.write(rel, text.as_bytes())
    }

    pub fn finish(self) -> Result<RunManifest> {
        let to_records = |m: BTreeMap<String, String>| {
            m.into_iter().map(|(path, sha256)| FileRecord { path, sha256 }).collect::<Vec<_>>()
        };
        let manifest = RunManifest {
            stage: self.stage,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: self.ctx.config_hash.clone(),
            seed: self.ctx.cfg.seed,
            endpoint: self.ctx.cfg.endpoint.to_string(),
            subgroup: self.ctx.subgroup.as_ref().map(|(s, _)| s.clone()).unwrap_or_default(),
            notes: self.notes,
            inputs: to_records(self.inputs),
            outputs: to_records(self.outputs),
        };
        let text = toml::to_string(&manifest).expect("manifest serializes");
        write_file(&self.dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }
}

/// Data lines of a stamped TSV (comment lines dropped), split on tabs, with
/// the header checked.
pub fn parse_tsv<'t>(path: &Path, text: &'t str, header: &str) -> Result<Vec<Vec<&'t str>>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    if lines.next() != Some(header) {
        return Err(CliError::Validation(format!("{}: unexpected header", path.display())));
    }
    let width = header.split('\t').count();
    lines
        .enumerate()
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != width {
                return Err(CliError::Validation(format!(
                    "{}: data row {} has {} columns, expected {width}",
                    path.display(),
                    i + 1,
                    cols.len()
                )));
            }
            Ok(cols)
        })
        .collect()
}

pub fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse().map_err(|_| CliError::Validation(format!("{}: bad number `{s}`", path.display())))
}
