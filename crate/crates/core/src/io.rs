//! File formats: cohort tables, embedding files, and the versioned binary
//! envelope shared by every fitted scorer.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aft::{AftDistribution, AftModel};
use crate::coxfit::{ElasticNetConfig, LinearRiskScorer, Standardizer};
use crate::discrete_time::{DiscreteTimeModel, HazardNet, IntervalGrid};
use crate::domain::{ClinicalCovariates, DomainError, EmbeddingBag, OutcomeRecord, SubjectRecord};
use crate::pooling::{AttentionDtModel, GatedAttentionParams};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("not a scorer file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u64),
    #[error("expected scorer kind {expected:?}, found tag {found}")]
    WrongKind { expected: ScorerKind, found: u64 },
    #[error("file truncated")]
    Truncated,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("cohort table has {} invalid rows; first: row {}: {}", .0.len(), .0[0].row, .0[0].message)]
    Rows(Vec<RowError>),
    #[error("duplicate subject_id `{id}` at row {row}")]
    DuplicateSubject { id: String, row: usize },
    #[error("cohort table: {0}")]
    Csv(String),
}

/// Problem with one data row; rows are numbered from 1 after the header.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub row: usize,
    pub field: String,
    pub message: String,
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| IoError::File { path: parent.display().to_string(), source })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

/// Lowercase hex SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String, IoError> {
    Ok(content_hash(&read_file(path)?))
}

// Cohort tables.

pub const COHORT_COLUMNS: [&str; 18] = [
    "subject_id",
    "dataset_id",
    "age",
    "er",
    "pr",
    "her2",
    "t_stage",
    "n_stage",
    "idc",
    "ilc",
    "grade",
    "race",
    "oncotype_score",
    "lrr_time",
    "distant_time",
    "death_time",
    "followup_time",
    "slides",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Canonical comma-separated emission; floats use shortest round-trip form.
pub fn write_cohort(records: &[SubjectRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COHORT_COLUMNS).expect("in-memory write");
    for r in records {
        let c = &r.clinical;
        let o = &r.outcome;
        w.write_record([
            r.subject_id.clone(),
            r.dataset_id.clone(),
            c.age.to_string(),
            c.er.to_string(),
            c.pr.to_string(),
            c.her2.to_string(),
            c.t_stage.to_string(),
            c.n_stage.to_string(),
            c.idc.to_string(),
            c.ilc.to_string(),
            c.grade.map(|g| g.to_string()).unwrap_or_default(),
            c.race.map(|g| g.to_string()).unwrap_or_default(),
            fmt_opt(c.oncotype_score),
            fmt_opt(o.local_regional_recurrence_time),
            fmt_opt(o.distant_recurrence_time),
            fmt_opt(o.death_time),
            o.last_followup_time.to_string(),
            r.embedding_refs.join(";"),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

struct RowParser<'a> {
    row: usize,
    record: &'a csv::StringRecord,
    index: &'a [usize],
    errors: Vec<RowError>,
}

impl RowParser<'_> {
    fn raw(&self, col: usize) -> &str {
        self.record.get(self.index[col]).unwrap_or("").trim()
    }

    fn fail(&mut self, col: usize, message: String) {
        self.errors.push(RowError { row: self.row, field: COHORT_COLUMNS[col].to_string(), message });
    }

    fn opt_f64(&mut self, col: usize) -> Option<f64> {
        let s = self.raw(col).to_string();
        if s.is_empty() {
            return None;
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Some(v),
            _ => {
                self.fail(col, format!("not a number: {s:?}"));
                None
            }
        }
    }

    fn level<T: std::str::FromStr<Err = DomainError>>(&mut self, col: usize, default: T) -> T {
        let s = self.raw(col).to_string();
        if s.is_empty() {
            return "unknown".parse().unwrap_or(default);
        }
        match s.parse::<T>() {
            Ok(v) => v,
            Err(e) => {
                self.fail(col, e.to_string());
                default
            }
        }
    }
}

/// Parses a cohort table. Every malformed row is reported with its number;
/// a repeated subject id is fatal.
pub fn read_cohort(text: &str) -> Result<Vec<SubjectRecord>, IoError> {
    use crate::domain::{Component, Her2Status, NStage, Race, ReceptorStatus, TStage};
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| IoError::Csv(e.to_string()))?.clone();
    let mut index = Vec::with_capacity(COHORT_COLUMNS.len());
    for name in COHORT_COLUMNS {
        let pos = headers.iter().position(|h| h == name).ok_or_else(|| IoError::Csv(format!("missing column `{name}`")))?;
        index.push(pos);
    }
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| IoError::Csv(format!("row {row}: {e}")))?;
        let mut p = RowParser { row, record: &rec, index: &index, errors: Vec::new() };
        let subject_id = p.raw(0).to_string();
        if subject_id.is_empty() {
            p.fail(0, "empty subject_id".into());
        } else if !seen.insert(subject_id.clone()) {
            return Err(IoError::DuplicateSubject { id: subject_id, row });
        }
        let dataset_id = p.raw(1).to_string();
        if dataset_id.is_empty() {
            p.fail(1, "empty dataset_id".into());
        }
        let age = p.opt_f64(2);
        if age.is_none() && p.errors.iter().all(|e| e.field != "age") {
            p.fail(2, "age is required".into());
        }
        let er = p.level(3, ReceptorStatus::Unknown);
        let pr = p.level(4, ReceptorStatus::Unknown);
        let her2 = p.level(5, Her2Status::Unknown);
        let t_stage = p.level(6, TStage::Unknown);
        let n_stage = p.level(7, NStage::Unknown);
        let idc = p.level(8, Component::Unknown);
        let ilc = p.level(9, Component::Unknown);
        let grade = match p.raw(10) {
            "" => None,
            s => match s.parse::<u8>() {
                Ok(g) => Some(g),
                Err(_) => {
                    let s = s.to_string();
                    p.fail(10, format!("not an integer grade: {s:?}"));
                    None
                }
            },
        };
        let race = match p.raw(11) {
            "" => None,
            s => match s.parse::<Race>() {
                Ok(r) => Some(r),
                Err(e) => {
                    p.fail(11, e.to_string());
                    None
                }
            },
        };
        let oncotype_score = p.opt_f64(12);
        let lrr = p.opt_f64(13);
        let distant = p.opt_f64(14);
        let death = p.opt_f64(15);
        let followup = p.opt_f64(16);
        let slides: Vec<String> =
            p.raw(17).split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        let clinical = ClinicalCovariates {
            age: age.unwrap_or(0.0),
            er,
            pr,
            her2,
            t_stage,
            n_stage,
            idc,
            ilc,
            grade,
            race,
            oncotype_score,
        };
        if let Err(e) = clinical.validate() {
            p.fail(2, e.to_string());
        }
        let outcome = match OutcomeRecord::new(lrr, distant, death, followup) {
            Ok(o) => Some(o),
            Err(e) => {
                p.fail(16, e.to_string());
                None
            }
        };
        if p.errors.is_empty() {
            records.push(SubjectRecord {
                subject_id,
                dataset_id,
                clinical,
                outcome: outcome.expect("validated"),
                embedding_refs: slides,
            });
        } else {
            errors.extend(p.errors);
        }
    }
    if !errors.is_empty() {
        return Err(IoError::Rows(errors));
    }
    Ok(records)
}

pub fn read_cohort_file(path: &Path) -> Result<Vec<SubjectRecord>, IoError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| IoError::Csv(format!("{}: not UTF-8", path.display())))?;
    read_cohort(&text)
}

// Embedding files.

pub const EMBEDDING_MAGIC: &[u8; 8] = b"PRGEMBD\0";
pub const EMBEDDING_VERSION: u64 = 1;

pub fn encode_embedding(bag: &EmbeddingBag) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * bag.as_slice().len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(bag.n_patches() as u64).to_le_bytes());
    out.extend_from_slice(&(bag.dim() as u64).to_le_bytes());
    for v in bag.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embedding(slide_id: &str, bytes: &[u8]) -> Result<EmbeddingBag, IoError> {
    if bytes.len() < 32 {
        return Err(IoError::Truncated);
    }
    if &bytes[..8] != EMBEDDING_MAGIC {
        return Err(IoError::BadMagic);
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("8 bytes"));
    let version = word(1);
    if version != EMBEDDING_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let (n, dim) = (word(2) as usize, word(3) as usize);
    let expected = n.checked_mul(dim).and_then(|v| v.checked_mul(4)).ok_or(IoError::Truncated)?;
    let body = &bytes[32..];
    if body.len() < expected {
        return Err(IoError::Truncated);
    }
    if body.len() > expected {
        return Err(IoError::TrailingBytes(body.len() - expected));
    }
    let vectors = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    EmbeddingBag::new(slide_id, dim, vectors).map_err(|e| IoError::Invalid(e.to_string()))
}

/// Writes `<dir>/<slide_id>`.
pub fn write_embedding(dir: &Path, bag: &EmbeddingBag) -> Result<(), IoError> {
    write_file(&dir.join(bag.slide_id()), &encode_embedding(bag))
}

pub fn read_embedding(dir: &Path, slide_id: &str) -> Result<EmbeddingBag, IoError> {
    decode_embedding(slide_id, &read_file(&dir.join(slide_id))?)
}

// Scorer envelope: magic, version, kind, dim (u64 LE each), then a
// kind-specific list of u64 integers followed by f64 values.

pub const SCORER_MAGIC: &[u8; 8] = b"PROGNOS\0";
pub const SCORER_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    CoxLinear = 1,
    DiscreteTime = 2,
    Aft = 3,
    AttentionDt = 4,
}

impl ScorerKind {
    pub fn tag(self) -> u64 {
        self as u64
    }

    pub fn from_tag(tag: u64) -> Option<Self> {
        [ScorerKind::CoxLinear, ScorerKind::DiscreteTime, ScorerKind::Aft, ScorerKind::AttentionDt]
            .into_iter()
            .find(|k| k.tag() == tag)
    }
}

struct Enc(Vec<u8>);

impl Enc {
    fn header(kind: ScorerKind, dim: usize) -> Self {
        let mut e = Enc(Vec::new());
        e.0.extend_from_slice(SCORER_MAGIC);
        e.u(SCORER_VERSION);
        e.u(kind.tag());
        e.u(dim as u64);
        e
    }

    fn u(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn fs(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f(x));
    }
}

struct Dec<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn open(bytes: &'a [u8], kind: ScorerKind) -> Result<(Self, usize), IoError> {
        if bytes.len() < 8 {
            return Err(IoError::Truncated);
        }
        if &bytes[..8] != SCORER_MAGIC {
            return Err(IoError::BadMagic);
        }
        let mut d = Dec { bytes, pos: 8 };
        let version = d.u()?;
        if version != SCORER_VERSION {
            return Err(IoError::UnsupportedVersion(version));
        }
        let found = d.u()?;
        if found != kind.tag() {
            return Err(IoError::WrongKind { expected: kind, found });
        }
        let dim = d.u()? as usize;
        Ok((d, dim))
    }

    fn take(&mut self) -> Result<[u8; 8], IoError> {
        let end = self.pos + 8;
        let chunk = self.bytes.get(self.pos..end).ok_or(IoError::Truncated)?;
        self.pos = end;
        Ok(chunk.try_into().expect("8 bytes"))
    }

    fn u(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn fs(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(IoError::Truncated);
        }
        (0..n).map(|_| self.f()).collect()
    }

    fn finish(self) -> Result<(), IoError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(IoError::TrailingBytes(extra)),
        }
    }
}

/// Reads the kind tag without decoding the payload.
pub fn peek_scorer_kind(bytes: &[u8]) -> Result<ScorerKind, IoError> {
    if bytes.len() < 32 {
        return Err(IoError::Truncated);
    }
    if &bytes[..8] != SCORER_MAGIC {
        return Err(IoError::BadMagic);
    }
    let tag = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    ScorerKind::from_tag(tag).ok_or(IoError::Invalid(format!("unknown scorer kind {tag}")))
}

pub fn encode_linear(s: &LinearRiskScorer) -> Vec<u8> {
    let mut e = Enc::header(ScorerKind::CoxLinear, s.dim());
    e.fs(&s.standardizer.means);
    e.fs(&s.standardizer.sds);
    e.fs(&s.beta);
    e.0
}

pub fn decode_linear(bytes: &[u8]) -> Result<LinearRiskScorer, IoError> {
    let (mut d, dim) = Dec::open(bytes, ScorerKind::CoxLinear)?;
    let means = d.fs(dim)?;
    let sds = d.fs(dim)?;
    let beta = d.fs(dim)?;
    d.finish()?;
    Ok(LinearRiskScorer { standardizer: Standardizer { means, sds }, beta })
}

fn put_dt(e: &mut Enc, m: &DiscreteTimeModel) {
    let r = &m.regularization;
    e.u(m.net.hidden as u64);
    e.u(m.grid.cuts().len() as u64);
    e.u(r.max_epochs as u64);
    e.u(r.seed);
    e.u(r.batch_size.map_or(0, |b| b as u64));
    e.fs(&[r.alpha, r.gamma, r.step_size, r.lr_decay, r.tol, m.horizon]);
    e.fs(m.grid.cuts());
    e.fs(&m.standardizer.means);
    e.fs(&m.standardizer.sds);
    e.fs(&m.net.params);
}

fn get_dt(d: &mut Dec, dim: usize) -> Result<DiscreteTimeModel, IoError> {
    let hidden = d.u()? as usize;
    let n_cuts = d.u()? as usize;
    let max_epochs = d.u()? as usize;
    let seed = d.u()?;
    let batch = d.u()? as usize;
    let v = d.fs(6)?;
    let cuts = d.fs(n_cuts)?;
    let means = d.fs(dim)?;
    let sds = d.fs(dim)?;
    let grid = IntervalGrid::new(cuts).map_err(|e| IoError::Invalid(e.to_string()))?;
    let intervals = grid.n_intervals();
    let params = d.fs(HazardNet::param_count(dim, hidden, intervals))?;
    Ok(DiscreteTimeModel {
        grid,
        standardizer: Standardizer { means, sds },
        net: HazardNet { input_dim: dim, hidden, intervals, params },
        horizon: v[5],
        regularization: ElasticNetConfig {
            alpha: v[0],
            gamma: v[1],
            step_size: v[2],
            max_epochs,
            seed,
            batch_size: (batch > 0).then_some(batch),
            lr_decay: v[3],
            tol: v[4],
        },
    })
}

pub fn encode_discrete_time(m: &DiscreteTimeModel) -> Vec<u8> {
    let mut e = Enc::header(ScorerKind::DiscreteTime, m.net.input_dim);
    put_dt(&mut e, m);
    e.0
}

pub fn decode_discrete_time(bytes: &[u8]) -> Result<DiscreteTimeModel, IoError> {
    let (mut d, dim) = Dec::open(bytes, ScorerKind::DiscreteTime)?;
    let m = get_dt(&mut d, dim)?;
    d.finish()?;
    Ok(m)
}

pub fn encode_aft(m: &AftModel) -> Vec<u8> {
    let mut e = Enc::header(ScorerKind::Aft, m.beta.len());
    e.u(m.dist.tag());
    e.f(m.intercept);
    e.f(m.sigma);
    e.fs(&m.beta);
    e.0
}

pub fn decode_aft(bytes: &[u8]) -> Result<AftModel, IoError> {
    let (mut d, dim) = Dec::open(bytes, ScorerKind::Aft)?;
    let tag = d.u()?;
    let dist = AftDistribution::from_tag(tag).ok_or(IoError::Invalid(format!("unknown distribution tag {tag}")))?;
    let intercept = d.f()?;
    let sigma = d.f()?;
    let beta = d.fs(dim)?;
    d.finish()?;
    if !(sigma > 0.0) {
        return Err(IoError::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(AftModel { dist, intercept, beta, sigma })
}

pub fn encode_attention_dt(m: &AttentionDtModel) -> Vec<u8> {
    let mut e = Enc::header(ScorerKind::AttentionDt, m.attention.dim);
    e.u(m.attention.hidden as u64);
    e.fs(&m.patch_standardizer.means);
    e.fs(&m.patch_standardizer.sds);
    e.fs(&m.attention.flatten());
    put_dt(&mut e, &m.dt);
    e.0
}

pub fn decode_attention_dt(bytes: &[u8]) -> Result<AttentionDtModel, IoError> {
    let (mut d, dim) = Dec::open(bytes, ScorerKind::AttentionDt)?;
    let hidden = d.u()? as usize;
    let means = d.fs(dim)?;
    let sds = d.fs(dim)?;
    let flat = d.fs(2 * dim * hidden + hidden)?;
    let attention = GatedAttentionParams::from_flat(dim, hidden, &flat).map_err(|e| IoError::Invalid(e.to_string()))?;
    let dt = get_dt(&mut d, dim)?;
    d.finish()?;
    Ok(AttentionDtModel { patch_standardizer: Standardizer { means, sds }, attention, dt })
}
