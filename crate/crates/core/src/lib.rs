//! Survival modeling over clinical covariates and patch-embedding bags:
//! concordance and hazard-ratio metrics, Cox and discrete-time losses,
//! bag pooling, AFT models, two-round ensembling, multiple-source
//! cross-validated search, random-effects pooling and slide tiling.

pub mod aft;
pub mod coxfit;
pub mod discrete_time;
pub mod domain;
pub mod ensemble;
pub mod io;
pub mod linalg;
pub mod meta;
pub mod metrics;
pub mod optim;
pub mod pooling;
pub mod search;
pub mod stats;
pub mod synth;
pub mod tiling;

pub use domain::{
    derive_endpoint, ClinicalCovariates, DomainError, EmbeddingBag, EncodingScheme, Endpoint, EndpointObservation,
    Observation, OutcomeRecord, SubjectRecord,
};
pub use ensemble::{EnsembleSpec, MinMaxNormalizer, Modality, RiskCutoff, RiskGroup};
pub use meta::{PooledEstimate, StudyEstimate};
pub use metrics::ScoredObservation;
pub use search::{DatasetPartition, TrialRecord};
pub use tiling::PatchManifest;
