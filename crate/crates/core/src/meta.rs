//! Random-effects pooling of per-dataset estimates and forest-plot tables.
//!
//! Model: `M_i ~ Normal(mu, tau^2 + se_i^2)`, fitted by maximum likelihood.
//! For fixed tau^2 the optimal mu is the weighted mean with weights
//! `1 / (tau^2 + se_i^2)`, so tau^2 is found on the profile likelihood.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{c_index, ScoredObservation};
use crate::search::derive_seed;
use crate::stats::Z_975;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("no studies to pool")]
    NoStudies,
    #[error("study `{0}` has a non-positive or non-finite standard error")]
    NonPositiveSe(String),
    #[error("study `{0}` has a non-finite estimate")]
    NonFiniteValue(String),
    #[error("rows mix metric kinds {0} and {1}")]
    MixedKinds(MetricKind, MetricKind),
    #[error("bootstrap produced fewer than two usable resamples")]
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    CIndex,
    /// Pooled on the log scale, reported exponentiated.
    LogHazardRatio,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricKind::CIndex => "c_index",
            MetricKind::LogHazardRatio => "hazard_ratio",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEstimate {
    pub dataset_id: String,
    pub kind: MetricKind,
    pub value: f64,
    pub se: f64,
    pub n: usize,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub mu: f64,
    pub tau2: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    /// Normalized weights `∝ 1 / (tau^2 + se_i^2)`, in input order.
    pub weights: Vec<f64>,
}

/// `-2 log L` profiled over mu, up to a constant.
pub fn profile_deviance(values: &[f64], ses: &[f64], tau2: f64) -> f64 {
    let mu = weighted_mean(values, ses, tau2);
    values
        .iter()
        .zip(ses)
        .map(|(m, s)| {
            let v = tau2 + s * s;
            v.ln() + (m - mu) * (m - mu) / v
        })
        .sum()
}

/// `-2 log L(mu, tau^2)` up to a constant.
pub fn deviance(values: &[f64], ses: &[f64], mu: f64, tau2: f64) -> f64 {
    values
        .iter()
        .zip(ses)
        .map(|(m, s)| {
            let v = tau2 + s * s;
            v.ln() + (m - mu) * (m - mu) / v
        })
        .sum()
}

fn weighted_mean(values: &[f64], ses: &[f64], tau2: f64) -> f64 {
    // Accumulate in sorted order so the result is independent of study order.
    let mut terms: Vec<(f64, f64)> = values.iter().zip(ses).map(|(m, s)| (*m, 1.0 / (tau2 + s * s))).collect();
    terms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (num, den) = terms.iter().fold((0.0, 0.0), |(n, d), (m, w)| (n + w * m, d + w));
    num / den
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Maximum-likelihood random-effects pooling.
pub fn pool_random_effects(estimates: &[StudyEstimate]) -> Result<PooledEstimate, MetaError> {
    if estimates.is_empty() {
        return Err(MetaError::NoStudies);
    }
    for e in estimates {
        if !(e.se > 0.0 && e.se.is_finite()) {
            return Err(MetaError::NonPositiveSe(e.dataset_id.clone()));
        }
        if !e.value.is_finite() {
            return Err(MetaError::NonFiniteValue(e.dataset_id.clone()));
        }
    }
    let values: Vec<f64> = estimates.iter().map(|e| e.value).collect();
    let ses: Vec<f64> = estimates.iter().map(|e| e.se).collect();
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    // The score in tau^2 is positive once tau^2 exceeds every squared
    // residual, so the maximizer lies in [0, range^2].
    let upper = (hi - lo) * (hi - lo);
    let f = |t: f64| profile_deviance(&values, &ses, t);
    let mut tau2 = 0.0;
    if upper > 0.0 {
        let steps = 400;
        let grid: Vec<f64> = (0..=steps).map(|k| upper * (k as f64 / steps as f64).powi(2)).collect();
        let (best, _) = grid
            .iter()
            .enumerate()
            .map(|(k, &t)| (k, f(t)))
            .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc });
        let a = grid[best.saturating_sub(1)];
        let b = grid[(best + 1).min(steps)];
        let refined = golden_min(f, a, b);
        if f(refined) < f(0.0) {
            tau2 = refined;
        }
    }
    let mu = weighted_mean(&values, &ses, tau2);
    let raw: Vec<f64> = ses.iter().map(|s| 1.0 / (tau2 + s * s)).collect();
    let total: f64 = raw.iter().sum();
    let se = (1.0 / total).sqrt();
    Ok(PooledEstimate {
        mu,
        tau2,
        se,
        ci95: (mu - Z_975 * se, mu + Z_975 * se),
        weights: raw.iter().map(|w| w / total).collect(),
    })
}

/// Inverse-variance (fixed-effect) weighted mean.
pub fn fixed_effect_mean(values: &[f64], ses: &[f64]) -> f64 {
    weighted_mean(values, ses, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSe {
    pub se: f64,
    pub resamples: usize,
    /// Resamples skipped because they had no comparable pair.
    pub skipped: usize,
}

/// Nonparametric bootstrap standard error of the C-index. Resample `r` draws
/// with its own generator seeded from `(seed, r)`.
pub fn bootstrap_c_index_se(obs: &[ScoredObservation], resamples: usize, seed: u64) -> Result<BootstrapSe, MetaError> {
    let n = obs.len();
    if n == 0 {
        return Err(MetaError::Bootstrap);
    }
    let values: Vec<Option<f64>> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64]));
            let sample: Vec<ScoredObservation> = (0..n).map(|_| obs[rng.random_range(0..n)]).collect();
            c_index(&sample).ok().map(|c| c.value)
        })
        .collect();
    let ok: Vec<f64> = values.iter().flatten().copied().collect();
    if ok.len() < 2 {
        return Err(MetaError::Bootstrap);
    }
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    let var = ok.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (ok.len() - 1) as f64;
    Ok(BootstrapSe { se: var.sqrt(), resamples: ok.len(), skipped: resamples - ok.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestRow {
    pub label: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub events: usize,
    pub n: usize,
    pub weight: f64,
    pub pooled: bool,
}

/// One row per study in input order, then the pooled row. Hazard ratios are
/// exponentiated back from the log scale.
pub fn forest_rows(studies: &[StudyEstimate], pooled: &PooledEstimate) -> Result<Vec<ForestRow>, MetaError> {
    let kind = studies.first().ok_or(MetaError::NoStudies)?.kind;
    if let Some(other) = studies.iter().find(|s| s.kind != kind) {
        return Err(MetaError::MixedKinds(kind, other.kind));
    }
    let report = |v: f64| match kind {
        MetricKind::CIndex => v,
        MetricKind::LogHazardRatio => v.exp(),
    };
    let mut rows: Vec<ForestRow> = studies
        .iter()
        .zip(&pooled.weights)
        .map(|(s, &w)| ForestRow {
            label: s.dataset_id.clone(),
            estimate: report(s.value),
            lower: report(s.value - Z_975 * s.se),
            upper: report(s.value + Z_975 * s.se),
            events: s.events,
            n: s.n,
            weight: w,
            pooled: false,
        })
        .collect();
    rows.push(ForestRow {
        label: "Pooled".into(),
        estimate: report(pooled.mu),
        lower: report(pooled.ci95.0),
        upper: report(pooled.ci95.1),
        events: studies.iter().map(|s| s.events).sum(),
        n: studies.iter().map(|s| s.n).sum(),
        weight: 1.0,
        pooled: true,
    });
    Ok(rows)
}

pub fn forest_tsv(rows: &[ForestRow]) -> String {
    let mut out = String::from("dataset\testimate\tlower\tupper\tevents\tn\tweight\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{:.6}",
            r.label, r.estimate, r.lower, r.upper, r.events, r.n, r.weight
        );
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static forest plot. `reference` draws the null line (0.5 for C-index,
/// 1 for hazard ratios); `log_axis` spaces the axis logarithmically.
pub fn forest_svg(rows: &[ForestRow], title: &str, reference: f64, log_axis: bool) -> String {
    let width = 720.0;
    let row_h = 24.0;
    let top = 48.0;
    let height = top + row_h * (rows.len() as f64 + 1.0) + 24.0;
    let (x0, x1) = (260.0, 560.0);
    let tr = |v: f64| if log_axis { v.max(1e-12).ln() } else { v };
    let mut lo = tr(reference);
    let mut hi = tr(reference);
    for r in rows {
        lo = lo.min(tr(r.lower));
        hi = hi.max(tr(r.upper));
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let sx = |v: f64| x0 + (tr(v) - lo) / (hi - lo) * (x1 - x0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="10" y="24" font-size="14">{}</text>"#, xml_escape(title));
    let y_end = top + row_h * rows.len() as f64;
    let _ = writeln!(
        s,
        r##"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
        sx(reference),
        top - 8.0,
        y_end
    );
    for (i, r) in rows.iter().enumerate() {
        let y = top + row_h * i as f64 + row_h / 2.0;
        let _ = writeln!(s, r#"<text x="10" y="{:.2}">{}</text>"#, y + 4.0, xml_escape(&r.label));
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/>"#,
            sx(r.lower),
            sx(r.upper)
        );
        if r.pooled {
            let (cx, l, u) = (sx(r.estimate), sx(r.lower), sx(r.upper));
            let _ = writeln!(
                s,
                r#"<polygon points="{l:.2},{y:.2} {cx:.2},{:.2} {u:.2},{y:.2} {cx:.2},{:.2}" fill="black"/>"#,
                y - 7.0,
                y + 7.0
            );
        } else {
            let half = 3.0 + 6.0 * r.weight.sqrt();
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="black"/>"#,
                sx(r.estimate) - half,
                y - half,
                2.0 * half,
                2.0 * half
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="580" y="{:.2}">{:.2} [{:.2}, {:.2}]</text>"#,
            y + 4.0,
            r.estimate,
            r.lower,
            r.upper
        );
    }
    s.push_str("</svg>\n");
    s
}
