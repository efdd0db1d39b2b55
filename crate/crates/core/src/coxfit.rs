//! Cox proportional hazards fitting.
//!
//! Two solvers share the Breslow partial likelihood: an exact Newton-Raphson
//! fit for low-dimensional covariates (hazard ratios, Wald tests, multivariate
//! adjustment) and a proximal Adam fit of the elastic-net penalized loss for
//! high-dimensional pooled embeddings.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Observation, Race};
use crate::linalg::{cholesky, cholesky_inverse, cholesky_solve, dot, log_add_exp};
use crate::metrics::{logrank, LogRankResult};
use crate::optim::{elastic_net_penalty, AdamSettings, ProxAdam};
use crate::stats::{two_sided_p, Z_975};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no events in the data")]
    NoEvents,
    #[error("too many covariates for the exact solver: {0} (max 50)")]
    TooManyCovariates(usize),
    #[error("covariate `{0}` is constant across all subjects")]
    ConstantCovariate(String),
    #[error("singular information matrix: covariate `{0}` is collinear with earlier terms")]
    Singular(String),
    #[error("monotone likelihood (separation) on covariate `{0}`")]
    Separation(String),
    #[error("{0} group is empty")]
    EmptyGroup(&'static str),
    #[error("non-finite loss at epoch {epoch} (step size {step_size})")]
    NonFinite { epoch: usize, step_size: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn check_inputs(n_scores: usize, obs: &[Observation]) -> Result<(), CoxError> {
    if n_scores != obs.len() {
        return Err(CoxError::LengthMismatch(format!(
            "{} scores vs {} observations",
            n_scores,
            obs.len()
        )));
    }
    Ok(())
}

/// Indices sorted by descending time, grouped by tied times.
fn tie_groups_desc(obs: &[Observation]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&a, &b| obs[b].time.total_cmp(&obs[a].time).then(a.cmp(&b)));
    let mut groups = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let t = obs[order[start]].time;
        let mut end = start;
        while end < order.len() && obs[order[end]].time == t {
            end += 1;
        }
        groups.push((start, end));
        start = end;
    }
    (order, groups)
}

/// Negative log partial likelihood averaged over all subjects:
/// `(1/n) sum_i delta_i log sum_{j : t_j >= t_i} exp(g_j - g_i)`.
pub fn cox_partial_loss(scores: &[f64], obs: &[Observation]) -> Result<f64, CoxError> {
    cox_partial_loss_grad(scores, obs).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the scores.
pub fn cox_partial_loss_grad(
    scores: &[f64],
    obs: &[Observation],
) -> Result<(f64, Vec<f64>), CoxError> {
    check_inputs(scores.len(), obs)?;
    let n = scores.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let (order, groups) = tie_groups_desc(obs);

    // Risk-set log-sum-exp per group, walking from the latest time.
    let mut lse = f64::NEG_INFINITY;
    let mut group_lse = vec![0.0; groups.len()];
    let mut loss = 0.0;
    for (gi, &(s, e)) in groups.iter().enumerate() {
        for &i in &order[s..e] {
            lse = log_add_exp(lse, scores[i]);
        }
        group_lse[gi] = lse;
        for &i in &order[s..e] {
            if obs[i].event {
                loss += lse - scores[i];
            }
        }
    }

    // d/dg_k = sum over events i with t_i <= t_k of softmax weight of k in S_i.
    let mut grad = vec![0.0; n];
    let mut acc = f64::NEG_INFINITY;
    for (gi, &(s, e)) in groups.iter().enumerate().rev() {
        let d = order[s..e].iter().filter(|&&i| obs[i].event).count();
        if d > 0 {
            acc = log_add_exp(acc, (d as f64).ln() - group_lse[gi]);
        }
        for &k in &order[s..e] {
            let mut gk = if acc.is_finite() { (scores[k] + acc).exp() } else { 0.0 };
            if obs[k].event {
                gk -= 1.0;
            }
            grad[k] = gk / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Result of an exact (Newton-Raphson) Cox fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFitResult {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    /// Maximized log partial likelihood.
    pub loglik: f64,
    /// Log partial likelihood at beta = 0.
    pub loglik_null: f64,
    pub hr: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    pub wald_z: Vec<f64>,
    pub wald_p: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood after every accepted Newton step, starting at beta = 0.
    pub loglik_trace: Vec<f64>,
    pub n: usize,
    pub events: usize,
}

impl CoxFitResult {
    /// Hazard ratio and 95% interval for a change of `unit` in covariate k,
    /// e.g. `unit = 0.2` for a score on [0, 1].
    pub fn hr_per(&self, k: usize, unit: f64) -> (f64, f64, f64) {
        let b = self.beta[k] * unit;
        let half = Z_975 * self.se[k] * unit.abs();
        (b.exp(), (b - half).exp(), (b + half).exp())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Hazard ratio per `unit` given a per-unit hazard ratio: `hr^unit`.
pub fn hr_per_unit(hr: f64, unit: f64) -> f64 {
    hr.powf(unit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactOptions {
    pub max_iter: usize,
    /// Relative change in log-likelihood that ends the iteration.
    pub rel_tol: f64,
}

impl Default for ExactOptions {
    fn default() -> Self {
        ExactOptions { max_iter: 100, rel_tol: 1e-9 }
    }
}

struct Derivatives {
    loglik: f64,
    grad: Vec<f64>,
    info: Vec<f64>,
}

/// Breslow log partial likelihood with gradient and observed information for
/// a centered design matrix.
fn breslow_derivatives(
    x: &[f64],
    p: usize,
    beta: &[f64],
    order: &[usize],
    groups: &[(usize, usize)],
    obs: &[Observation],
    want_info: bool,
) -> Derivatives {
    let n = obs.len();
    let eta: Vec<f64> = (0..n).map(|i| dot(&x[i * p..(i + 1) * p], beta)).collect();
    let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; if want_info { p * p } else { 0 }];
    let mut loglik = 0.0;
    let mut grad = vec![0.0; p];
    let mut info = vec![0.0; if want_info { p * p } else { 0 }];
    for &(s, e) in groups {
        for &i in &order[s..e] {
            let w = (eta[i] - shift).exp();
            let xi = &x[i * p..(i + 1) * p];
            s0 += w;
            for a in 0..p {
                s1[a] += w * xi[a];
            }
            if want_info {
                for a in 0..p {
                    for b in 0..=a {
                        s2[a * p + b] += w * xi[a] * xi[b];
                    }
                }
            }
        }
        let d = order[s..e].iter().filter(|&&i| obs[i].event).count();
        if d == 0 {
            continue;
        }
        let log_s0 = s0.ln() + shift;
        for &i in &order[s..e] {
            if obs[i].event {
                loglik += eta[i] - log_s0;
                let xi = &x[i * p..(i + 1) * p];
                for a in 0..p {
                    grad[a] += xi[a] - s1[a] / s0;
                }
            }
        }
        if want_info {
            let df = d as f64;
            for a in 0..p {
                for b in 0..=a {
                    let v = df * (s2[a * p + b] / s0 - (s1[a] / s0) * (s1[b] / s0));
                    info[a * p + b] += v;
                }
            }
        }
    }
    if want_info {
        for a in 0..p {
            for b in 0..a {
                info[b * p + a] = info[a * p + b];
            }
        }
    }
    Derivatives { loglik, grad, info }
}

fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|k| format!("x{k}")).collect()
}

/// Newton-Raphson maximization of the Breslow partial likelihood.
///
/// Steps that decrease the likelihood are halved. Standard errors come from
/// the inverse observed information at the optimum.
pub fn fit_cox_exact(
    x: ArrayView2<f64>,
    obs: &[Observation],
    names: Option<&[String]>,
    opts: ExactOptions,
) -> Result<CoxFitResult, CoxError> {
    let (n, p) = x.dim();
    check_inputs(n, obs)?;
    let names: Vec<String> = match names {
        Some(v) if v.len() == p => v.to_vec(),
        Some(v) => {
            return Err(CoxError::LengthMismatch(format!("{} names for {} covariates", v.len(), p)))
        }
        None => default_names(p),
    };
    if p > 50 {
        return Err(CoxError::TooManyCovariates(p));
    }
    let events = obs.iter().filter(|o| o.event).count();
    if events == 0 {
        return Err(CoxError::NoEvents);
    }

    // Center columns; beta is unchanged and exp() stays in range.
    let mut xc = vec![0.0; n * p];
    for k in 0..p {
        let col = x.column(k);
        let mean = col.sum() / n as f64;
        if col.iter().all(|&v| v == col[0]) {
            return Err(CoxError::ConstantCovariate(names[k].clone()));
        }
        for i in 0..n {
            xc[i * p + k] = col[i] - mean;
        }
    }
    let (order, groups) = tie_groups_desc(obs);

    let mut beta = vec![0.0; p];
    let mut cur = breslow_derivatives(&xc, p, &beta, &order, &groups, obs, true);
    let loglik_null = cur.loglik;
    let mut trace = vec![cur.loglik];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let l = cholesky(&cur.info, p, 1e-10)
            .map_err(|e| CoxError::Singular(names[e.column].clone()))?;
        let delta = cholesky_solve(&l, p, &cur.grad);
        let mut scale = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + scale * d).collect();
            let d = breslow_derivatives(&xc, p, &cand, &order, &groups, obs, true);
            if d.loglik.is_finite() && d.loglik >= cur.loglik {
                next = Some((cand, d));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, d)) = next else {
            // No ascent possible along the Newton direction: at the optimum
            // to machine precision.
            converged = true;
            break;
        };
        let rel = (d.loglik - cur.loglik).abs() / cur.loglik.abs().max(f64::MIN_POSITIVE);
        beta = cand;
        cur = d;
        trace.push(cur.loglik);
        if rel < opts.rel_tol {
            converged = true;
            break;
        }
    }

    let l = cholesky(&cur.info, p, 1e-10).map_err(|e| CoxError::Separation(names[e.column].clone()))?;
    let cov = cholesky_inverse(&l, p);
    let se: Vec<f64> = (0..p).map(|k| cov[k * p + k].sqrt()).collect();
    for k in 0..p {
        let col = x.column(k);
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        // A linear predictor spanning more than e^40 across the data means
        // the likelihood is still climbing toward infinity.
        if (beta[k] * (hi - lo)).abs() > 40.0 {
            return Err(CoxError::Separation(names[k].clone()));
        }
    }
    let wald_z: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    Ok(CoxFitResult {
        hr: beta.iter().map(|b| b.exp()).collect(),
        ci: beta
            .iter()
            .zip(&se)
            .map(|(b, s)| ((b - Z_975 * s).exp(), (b + Z_975 * s).exp()))
            .collect(),
        wald_p: wald_z.iter().map(|&z| two_sided_p(z)).collect(),
        wald_z,
        names,
        beta,
        se,
        loglik: cur.loglik,
        loglik_null,
        converged,
        iterations,
        loglik_trace: trace,
        n,
        events,
    })
}

/// Log partial likelihood at an arbitrary beta (Breslow ties).
pub fn cox_loglik(x: ArrayView2<f64>, obs: &[Observation], beta: &[f64]) -> Result<f64, CoxError> {
    let (n, p) = x.dim();
    check_inputs(n, obs)?;
    let flat: Vec<f64> = x.iter().cloned().collect();
    let (order, groups) = tie_groups_desc(obs);
    Ok(breslow_derivatives(&flat, p, beta, &order, &groups, obs, false).loglik)
}

/// Elastic-net Cox training settings.
///
/// The loss is `(1 - alpha) L_cox + alpha R(beta)` with
/// `R(beta) = ((1 - gamma) / 2) |beta|_2^2 + gamma |beta|_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub step_size: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Mini-batch size; `None` trains on the full batch.
    pub batch_size: Option<usize>,
    /// Step size at epoch e is `step_size / (1 + lr_decay * e)`.
    pub lr_decay: f64,
    /// Stop once no coefficient moves more than this in an epoch.
    pub tol: f64,
}

impl Default for ElasticNetConfig {
    fn default() -> Self {
        ElasticNetConfig {
            alpha: 1e-3,
            gamma: 0.5,
            step_size: 0.01,
            max_epochs: 300,
            seed: 0,
            batch_size: None,
            lr_decay: 0.0,
            tol: 0.0,
        }
    }
}

impl ElasticNetConfig {
    pub fn validate(&self) -> Result<(), CoxError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoxError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(CoxError::InvalidConfig(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.step_size > 0.0) {
            return Err(CoxError::InvalidConfig("step_size must be positive".into()));
        }
        if matches!(self.batch_size, Some(0)) {
            return Err(CoxError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-column standardization frozen from training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    /// Columns with zero spread get sd 1 so they map to a constant 0.
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let (n, p) = x.dim();
        let mut means = vec![0.0; p];
        let mut sds = vec![1.0; p];
        for k in 0..p {
            let col = x.column(k);
            let m = col.sum() / n.max(1) as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n.max(1) as f64;
            means[k] = m;
            if var > 0.0 {
                sds[k] = var.sqrt();
            }
        }
        Standardizer { means, sds }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..self.means.len() {
            out[k] = (x[k] - self.means[k]) / self.sds[k];
        }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.means[k]) / self.sds[k];
            }
        }
        out
    }
}

/// Linear risk scorer `g(x) = beta . standardize(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRiskScorer {
    pub standardizer: Standardizer,
    pub beta: Vec<f64>,
}

impl LinearRiskScorer {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let s = &self.standardizer;
        (0..self.beta.len()).map(|k| self.beta[k] * (x[k] - s.means[k]) / s.sds[k]).sum()
    }

    pub fn score_rows(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.score(r.as_slice().expect("contiguous rows"))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticNetFit {
    pub scorer: LinearRiskScorer,
    /// Full-data objective after each epoch.
    pub loss_trace: Vec<f64>,
    pub epochs: usize,
}

/// Composite objective on standardized features.
pub fn elastic_net_objective(
    z: ArrayView2<f64>,
    obs: &[Observation],
    beta: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<f64, CoxError> {
    let scores: Vec<f64> = z.rows().into_iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let l = cox_partial_loss(&scores, obs)?;
    Ok((1.0 - alpha) * l + alpha * elastic_net_penalty(beta, alpha, gamma, None, None))
}

/// Full objective with the gradient of its smooth part: `(1 - alpha) L_cox`
/// plus the L2 term. The L1 term is left to the proximal step.
fn smooth_grad(
    z: &Array2<f64>,
    rows: &[usize],
    obs: &[Observation],
    beta: &[f64],
    cfg: &ElasticNetConfig,
) -> Result<(f64, Vec<f64>), CoxError> {
    let p = beta.len();
    let scores: Vec<f64> = rows.iter().map(|&i| dot(z.row(i).as_slice().unwrap(), beta)).collect();
    let sub: Vec<Observation> = rows.iter().map(|&i| obs[i]).collect();
    let (loss, g_scores) = cox_partial_loss_grad(&scores, &sub)?;
    let mut grad = vec![0.0; p];
    for (r, &i) in rows.iter().enumerate() {
        let w = (1.0 - cfg.alpha) * g_scores[r];
        if w != 0.0 {
            for (k, v) in z.row(i).iter().enumerate() {
                grad[k] += w * v;
            }
        }
    }
    let pen = elastic_net_penalty(beta, cfg.alpha, cfg.gamma, None, Some(&mut grad));
    Ok(((1.0 - cfg.alpha) * loss + cfg.alpha * pen, grad))
}

/// Trains a linear Cox scorer by proximal Adam on the elastic-net loss.
/// Deterministic for a given seed and row order.
pub fn fit_cox_elastic_net(
    features: ArrayView2<f64>,
    obs: &[Observation],
    cfg: &ElasticNetConfig,
) -> Result<ElasticNetFit, CoxError> {
    cfg.validate()?;
    let (n, p) = features.dim();
    check_inputs(n, obs)?;
    let standardizer = Standardizer::fit(features);
    let z = standardizer.transform(features);
    let mut beta = vec![0.0; p];
    let mut opt = ProxAdam::new(p, AdamSettings::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let all: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.unwrap_or(n).min(n).max(1);
    let mut trace = Vec::with_capacity(cfg.max_epochs);
    let mut epochs = 0;
    for epoch in 0..cfg.max_epochs {
        epochs = epoch + 1;
        let lr = cfg.step_size / (1.0 + cfg.lr_decay * epoch as f64);
        if batch < n {
            idx.shuffle(&mut rng);
        }
        let before = beta.clone();
        for chunk in idx.chunks(batch) {
            let mut rows = chunk.to_vec();
            rows.sort_unstable();
            let (_, grad) = smooth_grad(&z, &rows, obs, &beta, cfg)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(CoxError::NonFinite { epoch, step_size: lr });
            }
            opt.step(&mut beta, &grad, lr, cfg.alpha * cfg.gamma, None);
        }
        let (total, _) = smooth_grad(&z, &all, obs, &beta, cfg)?;
        if !total.is_finite() {
            return Err(CoxError::NonFinite { epoch, step_size: lr });
        }
        trace.push(total);
        let moved = beta.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if moved < cfg.tol {
            break;
        }
    }
    Ok(ElasticNetFit {
        scorer: LinearRiskScorer { standardizer, beta },
        loss_trace: trace,
        epochs,
    })
}

/// Named design matrix for multivariate Cox analyses.
#[derive(Debug, Clone, Default)]
pub struct MultivariateDesign {
    n: usize,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    /// Indicator columns dropped because the level never occurs.
    pub dropped: Vec<String>,
    /// Dataset reference level actually used.
    pub dataset_reference: Option<String>,
}

impl MultivariateDesign {
    pub fn new(n: usize) -> Self {
        MultivariateDesign { n, ..Default::default() }
    }

    fn push(&mut self, name: String, values: Vec<f64>) -> Result<(), CoxError> {
        if values.len() != self.n {
            return Err(CoxError::LengthMismatch(format!(
                "term `{name}` has {} values for {} subjects",
                values.len(),
                self.n
            )));
        }
        self.names.push(name);
        self.columns.push(values);
        Ok(())
    }

    pub fn numeric(mut self, name: &str, values: &[f64]) -> Result<Self, CoxError> {
        self.push(name.to_string(), values.to_vec())?;
        Ok(self)
    }

    /// AI test score on [0, 1], entered times 5 to span [0, 5].
    pub fn ai_score(self, scores: &[f64]) -> Result<Self, CoxError> {
        let v: Vec<f64> = scores.iter().map(|s| s * 5.0).collect();
        self.numeric("AI test", &v)
    }

    /// Oncotype score on [0, 100], entered divided by 20 to span [0, 5].
    pub fn oncotype(self, scores: &[f64]) -> Result<Self, CoxError> {
        let v: Vec<f64> = scores.iter().map(|s| s / 20.0).collect();
        self.numeric("Oncotype", &v)
    }

    pub fn grade(self, grades: &[u8]) -> Result<Self, CoxError> {
        let v: Vec<f64> = grades.iter().map(|&g| g as f64).collect();
        self.numeric("Grade", &v)
    }

    /// Indicators for black, asian and other/unknown; white is the reference.
    pub fn race(mut self, races: &[Race]) -> Result<Self, CoxError> {
        for level in [Race::Black, Race::Asian, Race::OtherUnknown] {
            let v: Vec<f64> = races.iter().map(|&r| if r == level { 1.0 } else { 0.0 }).collect();
            let name = format!("Race: {level}");
            if v.iter().all(|&x| x == 0.0) {
                self.dropped.push(name);
            } else {
                self.push(name, v)?;
            }
        }
        Ok(self)
    }

    /// One indicator per dataset other than `reference`. When the reference
    /// dataset is absent the first dataset in sorted order takes its place.
    pub fn datasets(mut self, ids: &[String], reference: &str) -> Result<Self, CoxError> {
        let mut levels: Vec<&String> = ids.iter().collect();
        levels.sort();
        levels.dedup();
        let reference = if levels.iter().any(|l| l.as_str() == reference) {
            reference.to_string()
        } else {
            levels.first().map(|s| s.to_string()).unwrap_or_default()
        };
        for level in levels {
            if *level == reference {
                continue;
            }
            let v: Vec<f64> = ids.iter().map(|d| if d == level { 1.0 } else { 0.0 }).collect();
            self.push(format!("{level} dataset"), v)?;
        }
        self.dataset_reference = Some(reference);
        Ok(self)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self) -> Array2<f64> {
        let p = self.columns.len();
        Array2::from_shape_fn((self.n, p), |(i, k)| self.columns[k][i])
    }
}

/// Multivariate Cox fit over a named design.
pub fn fit_cox_multivariate(
    design: &MultivariateDesign,
    obs: &[Observation],
) -> Result<CoxFitResult, CoxError> {
    fit_cox_exact(design.matrix().view(), obs, Some(design.names()), ExactOptions::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomizedHr {
    pub fit: CoxFitResult,
    pub logrank: LogRankResult,
    pub n_high: usize,
    pub n_low: usize,
    pub cutoff: f64,
}

impl DichotomizedHr {
    pub fn hr(&self) -> f64 {
        self.fit.hr[0]
    }
}

/// Univariate Cox fit on the indicator `risk > cutoff`, low-risk group as the
/// reference, with a companion logrank test.
pub fn dichotomized_hr(
    risks: &[f64],
    cutoff: f64,
    obs: &[Observation],
) -> Result<DichotomizedHr, CoxError> {
    check_inputs(risks.len(), obs)?;
    let high: Vec<f64> = risks.iter().map(|&r| if r > cutoff { 1.0 } else { 0.0 }).collect();
    let n_high = high.iter().filter(|&&h| h == 1.0).count();
    let n_low = risks.len() - n_high;
    if n_high == 0 {
        return Err(CoxError::EmptyGroup("high-risk"));
    }
    if n_low == 0 {
        return Err(CoxError::EmptyGroup("low-risk"));
    }
    let x = Array2::from_shape_vec((risks.len(), 1), high.clone()).expect("shape");
    let fit = fit_cox_exact(x.view(), obs, Some(&["high risk".to_string()]), ExactOptions::default())?;
    let hi: Vec<Observation> = obs.iter().zip(&high).filter(|(_, &h)| h == 1.0).map(|(o, _)| *o).collect();
    let lo: Vec<Observation> = obs.iter().zip(&high).filter(|(_, &h)| h == 0.0).map(|(o, _)| *o).collect();
    let logrank = logrank(&hi, &lo).map_err(|_| CoxError::NoEvents)?;
    Ok(DichotomizedHr { fit, logrank, n_high, n_low, cutoff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn obs(times: &[f64], events: &[bool]) -> Vec<Observation> {
        times.iter().zip(events).map(|(&t, &e)| Observation::new(t, e)).collect()
    }

    /// Term-by-term evaluation of the displayed loss.
    fn loss_oracle(g: &[f64], o: &[Observation]) -> f64 {
        let n = g.len();
        let mut total = 0.0;
        for i in 0..n {
            if !o[i].event {
                continue;
            }
            let s: f64 = (0..n).filter(|&j| o[j].time >= o[i].time).map(|j| (g[j] - g[i]).exp()).sum();
            total += s.ln();
        }
        total / n as f64
    }

    #[test]
    fn two_subjects_equal_scores() {
        let o = obs(&[1.0, 2.0], &[true, false]);
        let l = cox_partial_loss(&[0.3, 0.3], &o).unwrap();
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 5;
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let o: Vec<Observation> = (0..n)
                .map(|_| Observation::new(rng.random_range(1..4) as f64, rng.random_bool(0.6)))
                .collect();
            let l = cox_partial_loss(&g, &o).unwrap();
            assert!((l - loss_oracle(&g, &o)).abs() < 1e-13);
            let shifted: Vec<f64> = g.iter().map(|v| v + 3.7).collect();
            assert!((cox_partial_loss(&shifted, &o).unwrap() - l).abs() < 1e-13);
        }
    }

    #[test]
    fn binary_covariate_identical_groups() {
        let times = [1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0];
        let events = [true, false, true, true, true, false, true, true];
        let x = Array2::from_shape_vec((8, 1), vec![0., 0., 0., 0., 1., 1., 1., 1.]).unwrap();
        let fit = fit_cox_exact(x.view(), &obs(&times, &events), None, ExactOptions::default()).unwrap();
        assert!(fit.beta[0].abs() < 1e-12);
        assert!((fit.hr[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_and_duplicate_columns_are_rejected() {
        let o = obs(&[1.0, 2.0, 3.0], &[true, true, false]);
        let x = Array2::from_shape_vec((3, 1), vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            fit_cox_exact(x.view(), &o, None, ExactOptions::default()),
            Err(CoxError::ConstantCovariate(_))
        ));
        let x = Array2::from_shape_vec((3, 2), vec![0.1, 0.1, 0.5, 0.5, 0.2, 0.2]).unwrap();
        let names = vec!["a".to_string(), "a copy".to_string()];
        assert_eq!(
            fit_cox_exact(x.view(), &o, Some(&names), ExactOptions::default()),
            Err(CoxError::Singular("a copy".into()))
        );
    }

    #[test]
    fn perfect_separation_is_reported() {
        // Higher covariate always fails first.
        let o = obs(&[1.0, 2.0, 3.0, 4.0], &[true, true, true, true]);
        let x = Array2::from_shape_vec((4, 1), vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        let r = fit_cox_exact(x.view(), &o, None, ExactOptions::default());
        assert!(matches!(r, Err(CoxError::Separation(_))), "{r:?}");
    }

    #[test]
    fn hr_unit_transform() {
        let h: f64 = 3.0;
        assert!((hr_per_unit(h, 0.2) - h.powf(0.2)).abs() < 1e-15);
        let fit = CoxFitResult {
            names: vec!["s".into()],
            beta: vec![h.ln()],
            se: vec![0.1],
            loglik: 0.0,
            loglik_null: 0.0,
            hr: vec![h],
            ci: vec![(0.0, 0.0)],
            wald_z: vec![0.0],
            wald_p: vec![0.0],
            converged: true,
            iterations: 1,
            loglik_trace: vec![],
            n: 1,
            events: 1,
        };
        assert!((fit.hr_per(0, 0.2).0 - h.powf(0.2)).abs() < 1e-14);
    }

    #[test]
    fn design_indicators() {
        let ids: Vec<String> = ["Basel", "TCGA", "Basel"].iter().map(|s| s.to_string()).collect();
        let d = MultivariateDesign::new(3).datasets(&ids, "Basel").unwrap();
        assert_eq!(d.names(), &["TCGA dataset".to_string()]);
        let single: Vec<String> = vec!["Basel".into(); 3];
        let d = MultivariateDesign::new(3).datasets(&single, "Basel").unwrap();
        assert!(d.names().is_empty());
        let d = MultivariateDesign::new(2).race(&[Race::White, Race::Black]).unwrap();
        assert_eq!(d.names(), &["Race: black".to_string()]);
        assert_eq!(d.dropped.len(), 2);
        let d = MultivariateDesign::new(2).ai_score(&[0.2, 1.0]).unwrap().oncotype(&[20.0, 100.0]).unwrap();
        assert_eq!(d.matrix().row(1).to_vec(), vec![5.0, 5.0]);
    }

    #[test]
    fn dichotomized_rejects_empty_group() {
        let o = obs(&[1.0, 2.0], &[true, true]);
        assert_eq!(dichotomized_hr(&[0.3, 0.4], 0.1, &o).unwrap_err(), CoxError::EmptyGroup("low-risk"));
        assert_eq!(dichotomized_hr(&[0.3, 0.4], 0.9, &o).unwrap_err(), CoxError::EmptyGroup("high-risk"));
    }

    #[test]
    fn elastic_net_alpha_one_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((60, 5), |_| rng.random_range(-1.0..1.0));
        let o: Vec<Observation> = (0..60).map(|i| Observation::new(1.0 + i as f64, i % 3 != 0)).collect();
        let cfg = ElasticNetConfig { alpha: 1.0, gamma: 0.5, max_epochs: 500, step_size: 0.05, ..Default::default() };
        let fit = fit_cox_elastic_net(x.view(), &o, &cfg).unwrap();
        assert!(fit.scorer.beta.iter().all(|b| b.abs() < 1e-3), "{:?}", fit.scorer.beta);
    }

    #[test]
    fn elastic_net_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((50, 4), |_| rng.random_range(-1.0..1.0));
        let o: Vec<Observation> = (0..50).map(|i| Observation::new(1.0 + (i * 7 % 13) as f64, i % 4 != 0)).collect();
        let cfg = ElasticNetConfig { batch_size: Some(16), max_epochs: 20, seed: 9, ..Default::default() };
        let a = fit_cox_elastic_net(x.view(), &o, &cfg).unwrap();
        let b = fit_cox_elastic_net(x.view(), &o, &cfg).unwrap();
        assert_eq!(a.scorer, b.scorer);
        assert!(fit_cox_elastic_net(x.view(), &o, &ElasticNetConfig { alpha: 1.5, ..cfg }).is_err());
    }
}
