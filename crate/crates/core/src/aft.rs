//! Accelerated failure time models on a linear predictor.
//!
//! `log T = b0 + x.beta + sigma * W` with W standard normal, logistic or
//! minimum extreme value (the last is the Weibull model). Fitted by BFGS on
//! the mean negative log-likelihood with internally standardized columns.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::domain::Observation;
use crate::linalg::{sigmoid, softplus};
use crate::optim::{bfgs_minimize, BfgsOptions};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AftError {
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no observations")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AftDistribution {
    Normal,
    Logistic,
    ExtremeValue,
}

impl AftDistribution {
    pub const ALL: [AftDistribution; 3] =
        [AftDistribution::Normal, AftDistribution::Logistic, AftDistribution::ExtremeValue];

    pub fn as_str(self) -> &'static str {
        match self {
            AftDistribution::Normal => "normal",
            AftDistribution::Logistic => "logistic",
            AftDistribution::ExtremeValue => "extreme_value",
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            AftDistribution::Normal => 0,
            AftDistribution::Logistic => 1,
            AftDistribution::ExtremeValue => 2,
        }
    }

    pub fn from_tag(tag: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.tag() == tag)
    }

    /// `-log f(z)` and its derivative.
    pub fn neg_log_density(self, z: f64) -> (f64, f64) {
        match self {
            AftDistribution::Normal => (0.5 * z * z + HALF_LN_2PI, z),
            AftDistribution::Logistic => (z + 2.0 * softplus(-z), 2.0 * sigmoid(z) - 1.0),
            AftDistribution::ExtremeValue => {
                let e = z.exp();
                (e - z, e - 1.0)
            }
        }
    }

    /// `-log S(z)` and its derivative (the hazard).
    pub fn neg_log_survival(self, z: f64) -> (f64, f64) {
        match self {
            AftDistribution::Normal => {
                let log_s = normal_log_sf(z);
                let hazard = (-0.5 * z * z - HALF_LN_2PI - log_s).exp();
                (-log_s, hazard)
            }
            AftDistribution::Logistic => (softplus(z), sigmoid(z)),
            AftDistribution::ExtremeValue => {
                let e = z.exp();
                (e, e)
            }
        }
    }
}

impl std::fmt::Display for AftDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AftDistribution {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "normal" | "lognormal" => Ok(AftDistribution::Normal),
            "logistic" | "loglogistic" => Ok(AftDistribution::Logistic),
            "extreme_value" | "extreme" | "weibull" => Ok(AftDistribution::ExtremeValue),
            other => Err(format!("unknown AFT distribution `{other}`")),
        }
    }
}

/// `log(1 - Phi(z))`, accurate far into the upper tail.
fn normal_log_sf(z: f64) -> f64 {
    if z < 25.0 {
        (0.5 * erfc(z / std::f64::consts::SQRT_2)).ln()
    } else {
        let z2 = z * z;
        -0.5 * z2 - z.ln() - HALF_LN_2PI + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AftModel {
    pub dist: AftDistribution,
    pub intercept: f64,
    /// Coefficients on the original covariate scale.
    pub beta: Vec<f64>,
    pub sigma: f64,
}

impl AftModel {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// Clinical risk `-x.beta`: shorter predicted log-time means higher risk.
    pub fn risk(&self, x: &[f64]) -> f64 {
        -self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn risks(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.risk(&r.to_vec())).collect()
    }
}

fn check(x: ArrayView2<f64>, obs: &[Observation]) -> Result<(), AftError> {
    if x.nrows() != obs.len() {
        return Err(AftError::LengthMismatch(format!("{} rows vs {} observations", x.nrows(), obs.len())));
    }
    if obs.is_empty() {
        return Err(AftError::Empty);
    }
    if let Some(o) = obs.iter().find(|o| !(o.time > 0.0)) {
        return Err(AftError::NonPositiveTime(o.time));
    }
    Ok(())
}

/// Summed negative log-likelihood: events contribute `-log f(z) + log sigma`,
/// censored subjects `-log S(z)`.
pub fn aft_negloglik(model: &AftModel, x: ArrayView2<f64>, obs: &[Observation]) -> Result<f64, AftError> {
    check(x, obs)?;
    let mut total = 0.0;
    for (row, o) in x.rows().into_iter().zip(obs) {
        let z = (o.time.ln() - model.linear_predictor(&row.to_vec())) / model.sigma;
        total += if o.event {
            model.dist.neg_log_density(z).0 + model.sigma.ln()
        } else {
            model.dist.neg_log_survival(z).0
        };
    }
    Ok(total)
}

/// Mean loss and gradient in `theta = [b0, beta..., log sigma]`, plus
/// `(l2 / 2) |beta|^2`.
pub fn aft_loss_grad(
    dist: AftDistribution,
    x: ArrayView2<f64>,
    obs: &[Observation],
    theta: &[f64],
    l2: f64,
) -> Result<(f64, Vec<f64>), AftError> {
    check(x, obs)?;
    let p = x.ncols();
    if theta.len() != p + 2 {
        return Err(AftError::LengthMismatch(format!("theta has {} entries for {p} covariates", theta.len())));
    }
    let log_t: Vec<f64> = obs.iter().map(|o| o.time.ln()).collect();
    Ok(loss_grad_rows(dist, |i| x.row(i).to_vec(), &log_t, obs, theta, l2))
}

fn loss_grad_rows(
    dist: AftDistribution,
    row: impl Fn(usize) -> Vec<f64>,
    log_t: &[f64],
    obs: &[Observation],
    theta: &[f64],
    l2: f64,
) -> (f64, Vec<f64>) {
    let p = theta.len() - 2;
    let b0 = theta[0];
    let beta = &theta[1..=p];
    let s = theta[p + 1];
    let sigma = s.exp();
    let n = obs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p + 2];
    for (i, o) in obs.iter().enumerate() {
        let xi = row(i);
        let eta = b0 + beta.iter().zip(&xi).map(|(b, v)| b * v).sum::<f64>();
        let z = (log_t[i] - eta) / sigma;
        let (val, dz, ds_extra) = if o.event {
            let (v, d) = dist.neg_log_density(z);
            (v + s, d, 1.0)
        } else {
            let (v, d) = dist.neg_log_survival(z);
            (v, d, 0.0)
        };
        loss += val;
        let g_eta = -dz / sigma;
        grad[0] += g_eta;
        for k in 0..p {
            grad[k + 1] += g_eta * xi[k];
        }
        grad[p + 1] += -z * dz + ds_extra;
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    for k in 0..p {
        loss += 0.5 * l2 * beta[k] * beta[k];
        grad[k + 1] += l2 * beta[k];
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AftConfig {
    pub dist: AftDistribution,
    /// Ridge penalty on standardized coefficients.
    pub l2: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for AftConfig {
    fn default() -> Self {
        AftConfig { dist: AftDistribution::Normal, l2: 0.0, max_iter: 2000, grad_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AftFlag {
    TooFewEvents { events: usize },
    ScaleDiverged { sigma: f64 },
    NotConverged { grad_norm: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AftFit {
    pub model: AftModel,
    pub flags: Vec<AftFlag>,
    pub iterations: usize,
    /// Mean loss at the optimum (standardized parametrization, with penalty).
    pub loss: f64,
    pub grad_norm: f64,
}

impl AftFit {
    pub fn identifiable(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Maximum-likelihood AFT fit. Constant columns get a zero coefficient.
/// Problems (too few events, diverging scale, no convergence) are reported
/// as flags rather than errors.
pub fn fit_aft(x: ArrayView2<f64>, obs: &[Observation], cfg: &AftConfig) -> Result<AftFit, AftError> {
    check(x, obs)?;
    let (n, p) = x.dim();
    let mut means = vec![0.0; p];
    let mut sds = vec![0.0; p];
    for k in 0..p {
        let col = x.column(k);
        let m = col.sum() / n as f64;
        means[k] = m;
        sds[k] = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
    }
    let active: Vec<usize> = (0..p).filter(|&k| sds[k] > 0.0).collect();
    let q = active.len();
    let z_rows: Vec<Vec<f64>> = (0..n)
        .map(|i| active.iter().map(|&k| (x[[i, k]] - means[k]) / sds[k]).collect())
        .collect();
    let log_t: Vec<f64> = obs.iter().map(|o| o.time.ln()).collect();
    let mean_lt = log_t.iter().sum::<f64>() / n as f64;
    let sd_lt = (log_t.iter().map(|v| (v - mean_lt).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut theta0 = vec![0.0; q + 2];
    theta0[0] = mean_lt;
    theta0[q + 1] = if sd_lt > 1e-8 { sd_lt.ln() } else { 0.0 };

    let result = bfgs_minimize(
        |th| loss_grad_rows(cfg.dist, |i| z_rows[i].clone(), &log_t, obs, th, cfg.l2),
        &theta0,
        BfgsOptions { max_iter: cfg.max_iter, grad_tol: cfg.grad_tol },
    );
    let th = &result.x;
    let mut beta = vec![0.0; p];
    let mut intercept = th[0];
    for (j, &k) in active.iter().enumerate() {
        beta[k] = th[j + 1] / sds[k];
        intercept -= beta[k] * means[k];
    }
    let sigma = th[q + 1].exp();

    let mut flags = Vec::new();
    let events = obs.iter().filter(|o| o.event).count();
    if events < 5 {
        flags.push(AftFlag::TooFewEvents { events });
    }
    let scale_ref = if sd_lt > 1e-8 { sd_lt } else { 1.0 };
    if !sigma.is_finite() || sigma > 1e3 * scale_ref {
        flags.push(AftFlag::ScaleDiverged { sigma });
    }
    if !result.converged {
        flags.push(AftFlag::NotConverged { grad_norm: result.grad_norm });
    }
    Ok(AftFit {
        model: AftModel { dist: cfg.dist, intercept, beta, sigma },
        flags,
        iterations: result.iterations,
        loss: result.value,
        grad_norm: result.grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn standard_normal_at_zero() {
        let m = AftModel { dist: AftDistribution::Normal, intercept: 0.0, beta: vec![], sigma: 1.0 };
        let x = Array2::<f64>::zeros((1, 0));
        let l = aft_negloglik(&m, x.view(), &[Observation::new(1.0, true)]).unwrap();
        assert!((l - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_time() {
        let m = AftModel { dist: AftDistribution::Logistic, intercept: 0.0, beta: vec![], sigma: 1.0 };
        let x = Array2::<f64>::zeros((1, 0));
        assert_eq!(
            aft_negloglik(&m, x.view(), &[Observation::new(0.0, true)]),
            Err(AftError::NonPositiveTime(0.0))
        );
    }

    #[test]
    fn survival_derivatives_match_finite_differences() {
        for dist in AftDistribution::ALL {
            for z in [-3.0, -0.4, 0.0, 0.9, 2.5, 30.0] {
                let h = 1e-6;
                let fd = (dist.neg_log_survival(z + h).0 - dist.neg_log_survival(z - h).0) / (2.0 * h);
                let an = dist.neg_log_survival(z).1;
                assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "{dist} z={z}: {fd} vs {an}");
                let fd = (dist.neg_log_density(z + h).0 - dist.neg_log_density(z - h).0) / (2.0 * h);
                let an = dist.neg_log_density(z).1;
                assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "{dist} z={z}");
            }
        }
    }

    #[test]
    fn identical_subjects_get_zero_coefficients() {
        let x = Array2::from_shape_fn((12, 2), |(_, k)| k as f64 + 1.0);
        let obs: Vec<Observation> = (0..12).map(|i| Observation::new(1.0 + i as f64, i % 3 != 0)).collect();
        let fit = fit_aft(x.view(), &obs, &AftConfig::default()).unwrap();
        assert_eq!(fit.model.beta, vec![0.0, 0.0]);
        assert!(fit.identifiable(), "{:?}", fit.flags);
    }

    #[test]
    fn all_censored_is_flagged() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64);
        let obs: Vec<Observation> = (0..20).map(|i| Observation::new(1.0 + i as f64, false)).collect();
        let fit = fit_aft(x.view(), &obs, &AftConfig { max_iter: 300, ..Default::default() }).unwrap();
        assert!(!fit.identifiable());
        assert!(fit.flags.iter().any(|f| matches!(f, AftFlag::TooFewEvents { events: 0 })));
    }

    #[test]
    fn distribution_names_round_trip() {
        for d in AftDistribution::ALL {
            assert_eq!(d.as_str().parse::<AftDistribution>().unwrap(), d);
            assert_eq!(AftDistribution::from_tag(d.tag()), Some(d));
        }
    }
}
