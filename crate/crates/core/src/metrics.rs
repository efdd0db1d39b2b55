//! Evaluation statistics: concordance index, Kaplan-Meier estimator,
//! recurrence rate by risk quartile and the two-group logrank test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Observation;
use crate::stats::{chi2_1_sf, Z_975};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("C-index undefined: no comparable pairs")]
    NoComparablePairs,
    #[error("logrank statistic undefined: zero variance")]
    ZeroVariance,
    #[error("need at least {need} subjects, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("invalid observation at index {index}: {reason}")]
    InvalidObservation { index: usize, reason: &'static str },
}

/// A risk score paired with its observed outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredObservation {
    pub risk: f64,
    pub time: f64,
    pub event: bool,
}

impl ScoredObservation {
    pub fn new(risk: f64, obs: Observation) -> Self {
        ScoredObservation { risk, time: obs.time, event: obs.event }
    }

    pub fn observation(&self) -> Observation {
        Observation::new(self.time, self.event)
    }
}

/// Harrell's concordance with pair counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CIndex {
    pub value: f64,
    /// Number of comparable pairs (shorter time is an event).
    pub comparable_pairs: u64,
    pub concordant: u64,
    /// Comparable pairs with tied risk; each counts one half.
    pub tied_risk: u64,
}

impl CIndex {
    pub fn from_counts(comparable: u64, concordant: u64, tied: u64) -> Result<Self, MetricsError> {
        if comparable == 0 {
            return Err(MetricsError::NoComparablePairs);
        }
        let value = (2 * concordant + tied) as f64 / (2 * comparable) as f64;
        Ok(CIndex { value, comparable_pairs: comparable, concordant, tied_risk: tied })
    }
}

fn validate_scored(obs: &[ScoredObservation]) -> Result<(), MetricsError> {
    for (index, o) in obs.iter().enumerate() {
        if !o.risk.is_finite() {
            return Err(MetricsError::InvalidObservation { index, reason: "non-finite risk" });
        }
        if !(o.time > 0.0 && o.time.is_finite()) {
            return Err(MetricsError::InvalidObservation { index, reason: "time must be positive" });
        }
    }
    Ok(())
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick { tree: vec![0; n + 1] }
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks strictly below `i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Concordance index in O(n log n).
///
/// A pair (i, j) is comparable when `T_i < T_j` and subject i had the event;
/// it is concordant when `risk_i > risk_j`. Tied risks count one half.
pub fn c_index(obs: &[ScoredObservation]) -> Result<CIndex, MetricsError> {
    if obs.is_empty() {
        return Err(MetricsError::Empty);
    }
    validate_scored(obs)?;
    let n = obs.len();

    // Dense ranks of risk values.
    let mut by_risk: Vec<usize> = (0..n).collect();
    by_risk.sort_by(|&a, &b| obs[a].risk.total_cmp(&obs[b].risk));
    let mut rank = vec![0usize; n];
    let mut r = 0;
    for w in 0..n {
        if w > 0 && obs[by_risk[w]].risk != obs[by_risk[w - 1]].risk {
            r += 1;
        }
        rank[by_risk[w]] = r;
    }
    let n_ranks = r + 1;

    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| obs[b].time.total_cmp(&obs[a].time));

    // Walk times descending; the tree holds subjects with strictly later times.
    let mut tree = Fenwick::new(n_ranks);
    let mut inserted = 0u64;
    let (mut comparable, mut concordant, mut tied) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < n {
        let t = obs[by_time[start]].time;
        let mut end = start;
        while end < n && obs[by_time[end]].time == t {
            end += 1;
        }
        for &i in &by_time[start..end] {
            if obs[i].event {
                let below = tree.prefix(rank[i]);
                let at_or_below = tree.prefix(rank[i] + 1);
                comparable += inserted;
                concordant += below;
                tied += at_or_below - below;
            }
        }
        for &i in &by_time[start..end] {
            tree.add(rank[i]);
            inserted += 1;
        }
        start = end;
    }
    CIndex::from_counts(comparable, concordant, tied)
}

/// Product-limit survival curve with log-transformed Greenwood bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    /// Number at risk just before each time.
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    /// Largest observed time (event or censoring).
    pub last_time: f64,
}

impl KmCurve {
    /// Step-function value S(t); 1 before the first event time.
    pub fn survival_at(&self, t: f64) -> f64 {
        match self.step_index(t) {
            Some(k) => self.survival[k],
            None => 1.0,
        }
    }

    /// Confidence band at t; (1, 1) before the first event.
    pub fn band_at(&self, t: f64) -> (f64, f64) {
        match self.step_index(t) {
            Some(k) => (self.ci_lower[k], self.ci_upper[k]),
            None => (1.0, 1.0),
        }
    }

    fn step_index(&self, t: f64) -> Option<usize> {
        let k = self.times.partition_point(|&x| x <= t);
        k.checked_sub(1)
    }
}

/// Kaplan-Meier estimate `S(t) = prod_{t_j <= t} (1 - d_j / n_j)`.
///
/// Subjects censored at an event time stay in that time's risk set. Bands use
/// Greenwood's variance of log S and are clipped to [0, 1]; once S reaches 0
/// both bounds are 0.
pub fn kaplan_meier(obs: &[Observation]) -> Result<KmCurve, MetricsError> {
    if obs.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (index, o) in obs.iter().enumerate() {
        if !(o.time > 0.0 && o.time.is_finite()) {
            return Err(MetricsError::InvalidObservation { index, reason: "time must be positive" });
        }
    }
    let mut sorted: Vec<Observation> = obs.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let n = sorted.len();
    let last_time = sorted[n - 1].time;

    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
        ci_lower: Vec::new(),
        ci_upper: Vec::new(),
        last_time,
    };
    let mut s = 1.0;
    let mut greenwood = 0.0;
    let mut i = 0;
    while i < n {
        let t = sorted[i].time;
        let at_risk = n - i;
        let mut d = 0;
        let mut j = i;
        while j < n && sorted[j].time == t {
            if sorted[j].event {
                d += 1;
            }
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            let (lo, hi) = if d < at_risk {
                greenwood += d as f64 / (at_risk as f64 * (at_risk - d) as f64);
                let half = Z_975 * greenwood.sqrt();
                ((s * (-half).exp()).clamp(0.0, 1.0), (s * half.exp()).clamp(0.0, 1.0))
            } else {
                (0.0, 0.0)
            };
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
            curve.ci_lower.push(lo);
            curve.ci_upper.push(hi);
        }
        i = j;
    }
    Ok(curve)
}

/// One risk-quartile row of the recurrence-rate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileRate {
    pub quartile: usize,
    pub n: usize,
    pub score_mean: f64,
    pub score_min: f64,
    pub score_max: f64,
    /// `1 - S(horizon)` from the group's Kaplan-Meier curve.
    pub km_event_rate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Time at which the rate was read.
    pub evaluated_at: f64,
    /// True when follow-up in the group ended before the horizon.
    pub truncated: bool,
}

/// Splits subjects into four equal-size groups by ascending risk (ties broken
/// by input order) and reports each group's Kaplan-Meier event rate at
/// `horizon`.
pub fn recurrence_rate_by_quartile(
    obs: &[ScoredObservation],
    horizon: f64,
) -> Result<Vec<QuartileRate>, MetricsError> {
    if obs.len() < 4 {
        return Err(MetricsError::TooFew { need: 4, got: obs.len() });
    }
    validate_scored(obs)?;
    let n = obs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| obs[a].risk.total_cmp(&obs[b].risk).then(a.cmp(&b)));
    let mut rows = Vec::with_capacity(4);
    for q in 0..4 {
        let members = &order[q * n / 4..(q + 1) * n / 4];
        let group: Vec<Observation> = members.iter().map(|&i| obs[i].observation()).collect();
        let curve = kaplan_meier(&group)?;
        let truncated = curve.last_time < horizon;
        let at = if truncated { curve.last_time } else { horizon };
        let s = curve.survival_at(at);
        let (lo, hi) = curve.band_at(at);
        let risks = members.iter().map(|&i| obs[i].risk);
        rows.push(QuartileRate {
            quartile: q + 1,
            n: members.len(),
            score_mean: risks.clone().sum::<f64>() / members.len() as f64,
            score_min: risks.clone().fold(f64::INFINITY, f64::min),
            score_max: risks.fold(f64::NEG_INFINITY, f64::max),
            km_event_rate: 1.0 - s,
            ci_lower: 1.0 - hi,
            ci_upper: 1.0 - lo,
            evaluated_at: at,
            truncated,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi_square: f64,
    pub p: f64,
    /// Observed minus expected events in the first group.
    pub observed_minus_expected: f64,
    pub variance: f64,
    pub observed: [usize; 2],
    pub expected: [f64; 2],
}

/// Two-group logrank test with hypergeometric variance.
pub fn logrank(a: &[Observation], b: &[Observation]) -> Result<LogRankResult, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut all: Vec<(f64, bool, usize)> = a
        .iter()
        .map(|o| (o.time, o.event, 0))
        .chain(b.iter().map(|o| (o.time, o.event, 1)))
        .collect();
    for (index, &(t, _, _)) in all.iter().enumerate() {
        if !(t > 0.0 && t.is_finite()) {
            return Err(MetricsError::InvalidObservation { index, reason: "time must be positive" });
        }
    }
    if !all.iter().any(|x| x.1) {
        return Err(MetricsError::ZeroVariance);
    }
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut at_risk = [a.len(), b.len()];
    let mut observed = [0usize; 2];
    let mut expected = [0.0f64; 2];
    let mut variance = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let mut j = i;
        let mut d = [0usize; 2];
        let mut leaving = [0usize; 2];
        while j < all.len() && all[j].0 == t {
            let g = all[j].2;
            if all[j].1 {
                d[g] += 1;
            }
            leaving[g] += 1;
            j += 1;
        }
        let n = (at_risk[0] + at_risk[1]) as f64;
        let dt = (d[0] + d[1]) as f64;
        if dt > 0.0 {
            let n0 = at_risk[0] as f64;
            let n1 = at_risk[1] as f64;
            expected[0] += dt * n0 / n;
            expected[1] += dt * n1 / n;
            if n > 1.0 {
                variance += dt * n0 * n1 * (n - dt) / (n * n * (n - 1.0));
            }
            observed[0] += d[0];
            observed[1] += d[1];
        }
        at_risk[0] -= leaving[0];
        at_risk[1] -= leaving[1];
        i = j;
    }
    if variance <= 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    let ome = observed[0] as f64 - expected[0];
    let chi_square = ome * ome / variance;
    Ok(LogRankResult {
        chi_square,
        p: chi2_1_sf(chi_square),
        observed_minus_expected: ome,
        variance,
        observed,
        expected,
    })
}
