//! Fold trainers plugged into the cross-validated search, and the scorers
//! they produce.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use prognos_core::aft::{fit_aft, AftConfig, AftDistribution, AftFlag, AftModel};
use prognos_core::coxfit::{fit_cox_elastic_net, ElasticNetConfig, LinearRiskScorer};
use prognos_core::discrete_time::{fit_discrete_time, DiscreteTimeConfig, DiscreteTimeModel, IntervalGrid};
use prognos_core::domain::{encode_covariates, EmbeddingBag, EncodingScheme, Endpoint, Observation, SubjectRecord};
use prognos_core::io::{
    decode_aft, decode_attention_dt, decode_discrete_time, decode_linear, encode_aft, encode_attention_dt,
    encode_discrete_time, encode_linear, peek_scorer_kind, ScorerKind,
};
use prognos_core::metrics::{c_index, ScoredObservation};
use prognos_core::pooling::{fit_attention_dt, pool, AttentionDtConfig, AttentionDtModel, PoolingMethod};
use prognos_core::search::{FoldEval, FoldTrainer, Provenance, Theta};

use crate::config::PathologyConfig;
use crate::data::PathologyData;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Cox,
    DiscreteTime,
}

/// A pathology loss with a pooling method, written `cox-mean`, `dt-attention`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Combination {
    pub loss: Loss,
    pub pooling: PoolingMethod,
}

impl FromStr for Combination {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CliError::Validation(format!("unknown pathology combination `{s}`"));
        let (loss, pooling) = s.split_once('-').ok_or_else(bad)?;
        let loss = match loss {
            "cox" => Loss::Cox,
            "dt" => Loss::DiscreteTime,
            _ => return Err(bad()),
        };
        let pooling: PoolingMethod = pooling.parse().map_err(|_| bad())?;
        if loss == Loss::Cox && pooling == PoolingMethod::Attention {
            return Err(CliError::Validation("attention pooling is trained with the discrete-time loss only".into()));
        }
        Ok(Combination { loss, pooling })
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let loss = match self.loss {
            Loss::Cox => "cox",
            Loss::DiscreteTime => "dt",
        };
        write!(f, "{loss}-{}", self.pooling)
    }
}

/// One fitted pathology scorer.
#[derive(Debug, Clone, PartialEq)]
pub enum PathologyModel {
    Cox { pooling: PoolingMethod, scorer: LinearRiskScorer },
    Dt { pooling: PoolingMethod, model: DiscreteTimeModel },
    Attention(AttentionDtModel),
}

impl PathologyModel {
    pub fn slide_risk(&self, bag: &EmbeddingBag) -> Result<f64, String> {
        let r = match self {
            PathologyModel::Cox { pooling, scorer } => scorer.score(&pool(bag, *pooling).map_err(|e| e.to_string())?),
            PathologyModel::Dt { pooling, model } => model.risk(&pool(bag, *pooling).map_err(|e| e.to_string())?),
            PathologyModel::Attention(m) => m.bag_risk(bag).map_err(|e| e.to_string())?,
        };
        if r.is_finite() {
            Ok(r)
        } else {
            Err(format!("non-finite risk for slide {}", bag.slide_id()))
        }
    }

    /// Mean of the per-slide risks.
    pub fn subject_risk(&self, bags: &[&EmbeddingBag]) -> Result<f64, String> {
        if bags.is_empty() {
            return Err("subject has no slides".into());
        }
        let mut total = 0.0;
        for b in bags {
            total += self.slide_risk(b)?;
        }
        Ok(total / bags.len() as f64)
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            PathologyModel::Cox { scorer, .. } => encode_linear(scorer),
            PathologyModel::Dt { model, .. } => encode_discrete_time(model),
            PathologyModel::Attention(m) => encode_attention_dt(m),
        }
    }

    /// Decodes a scorer file; pooled models need their pooling method.
    pub fn decode(bytes: &[u8], pooling: PoolingMethod) -> Result<Self, CliError> {
        let kind = peek_scorer_kind(bytes)?;
        Ok(match kind {
            ScorerKind::CoxLinear => PathologyModel::Cox { pooling, scorer: decode_linear(bytes)? },
            ScorerKind::DiscreteTime => PathologyModel::Dt { pooling, model: decode_discrete_time(bytes)? },
            ScorerKind::AttentionDt => PathologyModel::Attention(decode_attention_dt(bytes)?),
            ScorerKind::Aft => return Err(CliError::Validation("AFT scorer where a pathology scorer was expected".into())),
        })
    }
}

pub fn theta_f64(theta: &Theta, name: &str, default: f64) -> f64 {
    theta.get(name).and_then(|v| v.as_f64()).unwrap_or(default)
}

pub fn theta_usize(theta: &Theta, name: &str, default: usize) -> usize {
    theta.get(name).and_then(|v| v.as_f64()).map(|v| v.round().max(0.0) as usize).unwrap_or(default)
}

fn regularization(theta: &Theta, epochs: usize, batch: Option<usize>, seed: u64) -> ElasticNetConfig {
    let base = ElasticNetConfig::default();
    ElasticNetConfig {
        alpha: theta_f64(theta, "alpha", base.alpha),
        gamma: theta_f64(theta, "gamma", base.gamma),
        step_size: theta_f64(theta, "step_size", base.step_size),
        max_epochs: epochs,
        seed,
        batch_size: batch,
        lr_decay: theta_f64(theta, "lr_decay", 0.0),
        tol: 0.0,
    }
}

fn concordance(risks: &[f64], obs: &[Observation]) -> Result<FoldEval, String> {
    let scored: Vec<ScoredObservation> = risks.iter().zip(obs).map(|(&r, &o)| ScoredObservation::new(r, o)).collect();
    let c = c_index(&scored).map_err(|e| e.to_string())?;
    Ok(FoldEval { score: c.value, weight: c.comparable_pairs as f64 })
}

/// Trains one pathology combination on slide-level examples; every slide
/// carries its subject's outcome.
pub struct PathologyTrainer<'a> {
    pub combo: Combination,
    pub data: &'a PathologyData,
    pub endpoint: Endpoint,
    pub cfg: &'a PathologyConfig,
}

impl PathologyTrainer<'_> {
    fn fit(&self, theta: &Theta, train: &[String], seed: u64) -> Result<PathologyModel, String> {
        let subjects = self.data.in_datasets(train);
        if subjects.is_empty() {
            return Err("no training subjects".into());
        }
        let mut bags: Vec<&EmbeddingBag> = Vec::new();
        let mut obs: Vec<Observation> = Vec::new();
        let subject_obs: Vec<Observation> = subjects.iter().map(|s| s.endpoint(self.endpoint).into()).collect();
        for (s, &o) in subjects.iter().zip(&subject_obs) {
            for b in self.data.bags_of(s) {
                bags.push(b);
                obs.push(o);
            }
        }
        let pooled = |method: PoolingMethod| -> Result<Array2<f64>, String> {
            let dim = bags[0].dim();
            let mut x = Array2::zeros((bags.len(), dim));
            for (i, b) in bags.iter().enumerate() {
                let v = pool(b, method).map_err(|e| e.to_string())?;
                x.row_mut(i).iter_mut().zip(v).for_each(|(o, v)| *o = v);
            }
            Ok(x)
        };
        let cfg = self.cfg;
        match (self.combo.loss, self.combo.pooling) {
            (Loss::Cox, method) => {
                let reg = regularization(theta, cfg.cox_epochs, cfg.cox_batch_size, seed);
                let fit = fit_cox_elastic_net(pooled(method)?.view(), &obs, &reg).map_err(|e| e.to_string())?;
                Ok(PathologyModel::Cox { pooling: method, scorer: fit.scorer })
            }
            (Loss::DiscreteTime, method) => {
                let grid = IntervalGrid::from_event_quantiles(&subject_obs, cfg.intervals).map_err(|e| e.to_string())?;
                let dt = DiscreteTimeConfig {
                    hidden: theta_usize(theta, "hidden", DiscreteTimeConfig::default().hidden),
                    regularization: regularization(theta, cfg.dt_epochs, cfg.dt_batch_size, seed),
                    horizon: cfg.horizon,
                };
                if method == PoolingMethod::Attention {
                    let att = AttentionDtConfig {
                        attention_hidden: theta_usize(theta, "attention_hidden", AttentionDtConfig::default().attention_hidden),
                        dt,
                    };
                    let fit = fit_attention_dt(&bags, &obs, &grid, &att).map_err(|e| e.to_string())?;
                    Ok(PathologyModel::Attention(fit.model))
                } else {
                    let fit = fit_discrete_time(pooled(method)?.view(), &obs, &grid, &dt).map_err(|e| e.to_string())?;
                    Ok(PathologyModel::Dt { pooling: method, model: fit.model })
                }
            }
        }
    }

    pub fn risks(&self, model: &PathologyModel, subjects: &[&SubjectRecord]) -> Result<Vec<f64>, String> {
        subjects.iter().map(|s| model.subject_risk(&self.data.bags_of(s))).collect()
    }
}

impl FoldTrainer for PathologyTrainer<'_> {
    type Model = PathologyModel;

    fn train(&self, theta: &Theta, train: &[String], seed: u64, prov: &mut Provenance) -> Result<PathologyModel, String> {
        for d in train {
            prov.touch(d);
        }
        self.fit(theta, train, seed)
    }

    fn evaluate(&self, model: &PathologyModel, validation: &[String]) -> Result<FoldEval, String> {
        let subjects = self.data.in_datasets(validation);
        let obs: Vec<Observation> = subjects.iter().map(|s| s.endpoint(self.endpoint).into()).collect();
        concordance(&self.risks(model, &subjects)?, &obs)
    }
}

pub fn clinical_scheme(include_grade: bool) -> EncodingScheme {
    EncodingScheme { include_grade, ..EncodingScheme::default() }
}

/// AFT model over encoded clinical covariates for one distribution.
pub struct ClinicalTrainer<'a> {
    pub dist: AftDistribution,
    pub subjects: &'a [SubjectRecord],
    pub scheme: EncodingScheme,
    pub endpoint: Endpoint,
}

impl ClinicalTrainer<'_> {
    pub fn features(&self, s: &SubjectRecord) -> Result<Vec<f64>, String> {
        encode_covariates(&s.clinical, &self.scheme).map_err(|e| format!("{}: {e}", s.subject_id))
    }

    fn design(&self, datasets: &[String]) -> Result<(Array2<f64>, Vec<Observation>), String> {
        let subjects: Vec<&SubjectRecord> = self.subjects.iter().filter(|s| datasets.contains(&s.dataset_id)).collect();
        if subjects.is_empty() {
            return Err("no subjects".into());
        }
        let p = self.scheme.width();
        let mut x = Array2::zeros((subjects.len(), p));
        for (i, s) in subjects.iter().enumerate() {
            x.row_mut(i).iter_mut().zip(self.features(s)?).for_each(|(o, v)| *o = v);
        }
        Ok((x, subjects.iter().map(|s| s.endpoint(self.endpoint).into()).collect()))
    }
}

impl FoldTrainer for ClinicalTrainer<'_> {
    type Model = AftModel;

    fn train(&self, theta: &Theta, train: &[String], _seed: u64, prov: &mut Provenance) -> Result<AftModel, String> {
        for d in train {
            prov.touch(d);
        }
        let (x, obs) = self.design(train)?;
        let cfg = AftConfig { dist: self.dist, l2: theta_f64(theta, "l2", 0.0), ..AftConfig::default() };
        let fit = fit_aft(x.view(), &obs, &cfg).map_err(|e| e.to_string())?;
        for flag in &fit.flags {
            match flag {
                AftFlag::NotConverged { grad_norm } => log::warn!("AFT {} stopped at gradient norm {grad_norm:e}", self.dist.as_str()),
                other => return Err(format!("unidentifiable AFT fit: {other:?}")),
            }
        }
        Ok(fit.model)
    }

    fn evaluate(&self, model: &AftModel, validation: &[String]) -> Result<FoldEval, String> {
        let (x, obs) = self.design(validation)?;
        concordance(&model.risks(x.view()), &obs)
    }
}

pub fn decode_clinical(bytes: &[u8]) -> Result<AftModel, CliError> {
    Ok(decode_aft(bytes)?)
}

pub fn encode_clinical(m: &AftModel) -> Vec<u8> {
    encode_aft(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combination_names() {
        for s in ["cox-mean", "cox-max", "dt-mean", "dt-max", "dt-attention"] {
            assert_eq!(s.parse::<Combination>().unwrap().to_string(), s);
        }
        for s in ["cox-attention", "cox", "svm-mean", "dt-median"] {
            assert!(s.parse::<Combination>().is_err(), "{s}");
        }
    }
}
