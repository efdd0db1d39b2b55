//! Discrete-time hazard model.
//!
//! Follow-up is cut into J contiguous intervals, the last one open. A small
//! feed-forward network maps features to logits φ_j, the per-interval hazard
//! is λ_j = sigmoid(φ_j), and survival is the running product of 1 - λ_j.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coxfit::{ElasticNetConfig, Standardizer};
use crate::domain::Observation;
use crate::linalg::sigmoid;
use crate::optim::{elastic_net_penalty, AdamSettings, ProxAdam};

pub const HAZARD_FLOOR: f64 = 1e-12;
pub const DEFAULT_INTERVALS: usize = 8;
pub const DEFAULT_HORIZON: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DtError {
    #[error("invalid interval grid: {0}")]
    InvalidGrid(String),
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no events to place grid cut points")]
    NoEvents,
    #[error("non-finite loss at epoch {epoch} (step size {step_size}, last finite loss {last_loss})")]
    NonFinite { epoch: usize, step_size: f64, last_loss: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Interval grid `(0, t_1], (t_1, t_2], ..., (t_{J-1}, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalGrid {
    cuts: Vec<f64>,
}

impl IntervalGrid {
    /// `cuts` are the interior boundaries t_1 < ... < t_{J-1}; t_0 = 0 is implied.
    pub fn new(cuts: Vec<f64>) -> Result<Self, DtError> {
        if cuts.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(DtError::InvalidGrid("cut points must be finite and positive".into()));
        }
        if cuts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DtError::InvalidGrid("cut points must be strictly ascending".into()));
        }
        Ok(IntervalGrid { cuts })
    }

    /// Cuts at the k/J quantiles (linear interpolation) of the event times.
    /// Duplicate quantiles collapse, so fewer than J intervals may result.
    pub fn from_event_quantiles(obs: &[Observation], intervals: usize) -> Result<Self, DtError> {
        if intervals == 0 {
            return Err(DtError::InvalidGrid("need at least one interval".into()));
        }
        let mut t: Vec<f64> = obs.iter().filter(|o| o.event).map(|o| o.time).collect();
        if t.is_empty() {
            return Err(DtError::NoEvents);
        }
        t.sort_by(f64::total_cmp);
        let mut cuts: Vec<f64> = Vec::new();
        for k in 1..intervals {
            let h = (t.len() - 1) as f64 * k as f64 / intervals as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(t.len() - 1);
            let q = t[lo] + (h - lo as f64) * (t[hi] - t[lo]);
            if q > 0.0 && cuts.last().is_none_or(|&last| q > last) {
                cuts.push(q);
            }
        }
        IntervalGrid::new(cuts)
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn n_intervals(&self) -> usize {
        self.cuts.len() + 1
    }

    /// 1-based index j with t in (t_{j-1}, t_j].
    pub fn interval_of(&self, t: f64) -> usize {
        self.cuts.partition_point(|&c| c < t) + 1
    }

    /// Number of intervals whose upper boundary is at or before t.
    pub fn completed_by(&self, t: f64) -> usize {
        self.cuts.partition_point(|&c| c <= t)
    }
}

/// Indicator path d_i1..d_iL: all zeros except a trailing 1 for events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscretePath {
    pub len: usize,
    pub event: bool,
}

impl DiscretePath {
    pub fn indicators(&self) -> Vec<u8> {
        let mut v = vec![0u8; self.len];
        if self.event {
            if let Some(last) = v.last_mut() {
                *last = 1;
            }
        }
        v
    }

    /// Recovers (interval, event flag). For censored paths the interval is
    /// the last fully survived one (0 if none).
    pub fn reconstruct(indicators: &[u8]) -> (usize, bool) {
        (indicators.len(), indicators.last() == Some(&1))
    }
}

/// Events end at their event interval; censored subjects contribute only the
/// intervals they survived completely.
pub fn discretize(obs: Observation, grid: &IntervalGrid) -> Result<DiscretePath, DtError> {
    if !(obs.time > 0.0) {
        return Err(DtError::NonPositiveTime(obs.time));
    }
    Ok(if obs.event {
        DiscretePath { len: grid.interval_of(obs.time), event: true }
    } else {
        DiscretePath { len: grid.completed_by(obs.time), event: false }
    })
}

/// Feed-forward map from features to J hazard logits.
///
/// With `hidden == 0` the map is linear, otherwise one tanh hidden layer.
/// Parameters are stored flat: `[W1 (h x p), b1 (h), W2 (J x h), b2 (J)]`
/// or `[W (J x p), b (J)]` for the linear form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardNet {
    pub input_dim: usize,
    pub hidden: usize,
    pub intervals: usize,
    pub params: Vec<f64>,
}

impl HazardNet {
    pub fn param_count(input_dim: usize, hidden: usize, intervals: usize) -> usize {
        if hidden == 0 {
            intervals * (input_dim + 1)
        } else {
            hidden * (input_dim + 1) + intervals * (hidden + 1)
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize, intervals: usize) -> Self {
        HazardNet {
            input_dim,
            hidden,
            intervals,
            params: vec![0.0; Self::param_count(input_dim, hidden, intervals)],
        }
    }

    /// Glorot-uniform weights, zero hidden biases, output biases set to
    /// `output_bias`.
    pub fn init(input_dim: usize, hidden: usize, intervals: usize, output_bias: &[f64], rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(input_dim, hidden, intervals);
        let (p, h, j) = (input_dim, hidden, intervals);
        if h == 0 {
            let a = (6.0 / (p + j) as f64).sqrt() * 0.1;
            for w in &mut net.params[..j * p] {
                *w = rng.random_range(-a..a);
            }
        } else {
            let a1 = (6.0 / (p + h) as f64).sqrt();
            for w in &mut net.params[..h * p] {
                *w = rng.random_range(-a1..a1);
            }
            let a2 = (6.0 / (h + j) as f64).sqrt() * 0.1;
            let off = h * (p + 1);
            for w in &mut net.params[off..off + j * h] {
                *w = rng.random_range(-a2..a2);
            }
        }
        let n = net.params.len();
        net.params[n - j..].copy_from_slice(output_bias);
        net
    }

    /// True for weight entries, false for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let (p, h, j) = (self.input_dim, self.hidden, self.intervals);
        let mut m = vec![true; self.params.len()];
        if h == 0 {
            m[j * p..].iter_mut().for_each(|v| *v = false);
        } else {
            m[h * p..h * (p + 1)].iter_mut().for_each(|v| *v = false);
            let off = h * (p + 1) + j * h;
            m[off..].iter_mut().for_each(|v| *v = false);
        }
        m
    }

    /// Writes φ into `phi`; `act` receives the hidden activations.
    pub fn forward(&self, x: &[f64], act: &mut Vec<f64>, phi: &mut [f64]) {
        let (p, h, j) = (self.input_dim, self.hidden, self.intervals);
        let w = &self.params;
        act.clear();
        if h == 0 {
            for k in 0..j {
                phi[k] = w[j * p + k] + (0..p).map(|d| w[k * p + d] * x[d]).sum::<f64>();
            }
            return;
        }
        for c in 0..h {
            let a = w[h * p + c] + (0..p).map(|d| w[c * p + d] * x[d]).sum::<f64>();
            act.push(a.tanh());
        }
        let off = h * (p + 1);
        for k in 0..j {
            phi[k] = w[off + j * h + k] + (0..h).map(|c| w[off + k * h + c] * act[c]).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients given dL/dφ; optionally dL/dx.
    pub fn backward(&self, x: &[f64], act: &[f64], dphi: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let (p, h, j) = (self.input_dim, self.hidden, self.intervals);
        let w = &self.params;
        if h == 0 {
            for k in 0..j {
                grad[j * p + k] += dphi[k];
                for d in 0..p {
                    grad[k * p + d] += dphi[k] * x[d];
                }
            }
            if let Some(dx) = dx {
                for d in 0..p {
                    dx[d] += (0..j).map(|k| dphi[k] * w[k * p + d]).sum::<f64>();
                }
            }
            return;
        }
        let off = h * (p + 1);
        let mut dact = vec![0.0; h];
        for k in 0..j {
            grad[off + j * h + k] += dphi[k];
            for c in 0..h {
                grad[off + k * h + c] += dphi[k] * act[c];
                dact[c] += dphi[k] * w[off + k * h + c];
            }
        }
        let mut dx = dx;
        for c in 0..h {
            let dpre = dact[c] * (1.0 - act[c] * act[c]);
            grad[h * p + c] += dpre;
            for d in 0..p {
                grad[c * p + d] += dpre * x[d];
            }
            if let Some(dx) = dx.as_deref_mut() {
                for d in 0..p {
                    dx[d] += dpre * w[c * p + d];
                }
            }
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut phi = vec![0.0; self.intervals];
        self.forward(x, &mut Vec::new(), &mut phi);
        phi
    }
}

/// Negative log-likelihood of one path given logits, with its gradient
/// written into `dphi` when supplied. Returns (loss, clamped count).
pub fn path_negloglik(phi: &[f64], path: DiscretePath, dphi: Option<&mut [f64]>) -> (f64, usize) {
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut dphi = dphi;
    for j in 0..path.len {
        let raw = sigmoid(phi[j]);
        let lam = raw.clamp(HAZARD_FLOOR, 1.0 - HAZARD_FLOOR);
        let hit = lam != raw;
        clamped += hit as usize;
        let d = path.event && j + 1 == path.len;
        loss -= if d { lam.ln() } else { (1.0 - lam).ln() };
        if let Some(g) = dphi.as_deref_mut() {
            g[j] = if hit { 0.0 } else { lam - f64::from(u8::from(d)) };
        }
    }
    if let Some(g) = dphi {
        g[path.len..].iter_mut().for_each(|v| *v = 0.0);
    }
    (loss, clamped)
}

/// Summed negative log-likelihood over rows of already-scaled features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllEval {
    pub nll: f64,
    pub clamped: usize,
}

pub fn dt_negloglik(net: &HazardNet, x: ArrayView2<f64>, paths: &[DiscretePath]) -> Result<NllEval, DtError> {
    if x.nrows() != paths.len() {
        return Err(DtError::LengthMismatch(format!("{} rows vs {} paths", x.nrows(), paths.len())));
    }
    let mut phi = vec![0.0; net.intervals];
    let mut act = Vec::new();
    let mut out = NllEval { nll: 0.0, clamped: 0 };
    for (row, &path) in x.rows().into_iter().zip(paths) {
        let row = row.to_vec();
        net.forward(&row, &mut act, &mut phi);
        let (l, c) = path_negloglik(&phi, path, None);
        out.nll += l;
        out.clamped += c;
    }
    Ok(out)
}

/// Training objective `(1 - alpha) NLL / n + alpha R(weights)` and its
/// gradient of its smooth part (L1 is handled by the proximal step).
pub fn dt_objective_grad(
    net: &HazardNet,
    x: ArrayView2<f64>,
    paths: &[DiscretePath],
    rows: &[usize],
    alpha: f64,
    gamma: f64,
    mask: &[bool],
) -> (f64, Vec<f64>, usize) {
    let mut grad = vec![0.0; net.params.len()];
    let mut phi = vec![0.0; net.intervals];
    let mut dphi = vec![0.0; net.intervals];
    let mut act = Vec::new();
    let mut nll = 0.0;
    let mut clamped = 0;
    let scale = (1.0 - alpha) / rows.len().max(1) as f64;
    for &i in rows {
        let row = x.row(i).to_vec();
        net.forward(&row, &mut act, &mut phi);
        let (l, c) = path_negloglik(&phi, paths[i], Some(&mut dphi));
        nll += l;
        clamped += c;
        dphi.iter_mut().for_each(|g| *g *= scale);
        net.backward(&row, &act, &dphi, &mut grad, None);
    }
    let pen = elastic_net_penalty(&net.params, alpha, gamma, Some(mask), Some(&mut grad));
    (scale * nll + alpha * pen, grad, clamped)
}

/// Survival step function `S(t) = prod_{j : t_j <= t} (1 - λ_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve {
    pub cuts: Vec<f64>,
    pub hazards: Vec<f64>,
}

impl SurvivalCurve {
    pub fn at(&self, t: f64) -> f64 {
        let done = self.cuts.partition_point(|&c| c <= t);
        self.hazards[..done].iter().map(|l| 1.0 - l).product()
    }

    /// Survival just after each completed interval.
    pub fn steps(&self) -> Vec<f64> {
        let mut s = 1.0;
        self.hazards[..self.cuts.len()]
            .iter()
            .map(|l| {
                s *= 1.0 - l;
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTimeConfig {
    /// Hidden width; 0 gives a linear scorer.
    pub hidden: usize,
    pub regularization: ElasticNetConfig,
    /// Horizon t* for the scalar risk `1 - S(t*)`.
    pub horizon: f64,
}

impl Default for DiscreteTimeConfig {
    fn default() -> Self {
        DiscreteTimeConfig {
            hidden: 16,
            regularization: ElasticNetConfig { step_size: 0.01, max_epochs: 200, ..Default::default() },
            horizon: DEFAULT_HORIZON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTimeModel {
    pub grid: IntervalGrid,
    pub standardizer: Standardizer,
    pub net: HazardNet,
    pub horizon: f64,
    pub regularization: ElasticNetConfig,
}

impl DiscreteTimeModel {
    fn scaled(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; x.len()];
        self.standardizer.apply(x, &mut z);
        z
    }

    pub fn hazards(&self, x: &[f64]) -> Vec<f64> {
        self.net.logits(&self.scaled(x)).into_iter().map(sigmoid).collect()
    }

    pub fn survival_curve(&self, x: &[f64]) -> SurvivalCurve {
        SurvivalCurve { cuts: self.grid.cuts().to_vec(), hazards: self.hazards(x) }
    }

    /// `1 - S(t*)`.
    pub fn risk(&self, x: &[f64]) -> f64 {
        1.0 - self.survival_curve(x).at(self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtFit {
    pub model: DiscreteTimeModel,
    pub loss_trace: Vec<f64>,
    /// Hazards clamped away from 0 or 1 during the final full-data pass.
    pub clamped: usize,
}

/// Per-interval marginal hazard logits, used as output-bias initialization.
pub fn marginal_logits(paths: &[DiscretePath], intervals: usize) -> Vec<f64> {
    let mut at_risk = vec![0.0f64; intervals];
    let mut events = vec![0.0f64; intervals];
    for p in paths {
        for j in 0..p.len {
            at_risk[j] += 1.0;
        }
        if p.event && p.len > 0 {
            events[p.len - 1] += 1.0;
        }
    }
    (0..intervals)
        .map(|j| {
            let h = ((events[j] + 0.5) / (at_risk[j] + 1.0)).clamp(1e-4, 1.0 - 1e-4);
            (h / (1.0 - h)).ln()
        })
        .collect()
}

pub(crate) fn validate_regularization(cfg: &ElasticNetConfig) -> Result<(), DtError> {
    cfg.validate().map_err(|e| DtError::InvalidConfig(e.to_string()))
}

/// Minimizes the regularized negative log-likelihood by proximal Adam.
/// The grid must be fixed beforehand; results are deterministic per seed.
pub fn fit_discrete_time(
    features: ArrayView2<f64>,
    obs: &[Observation],
    grid: &IntervalGrid,
    cfg: &DiscreteTimeConfig,
) -> Result<DtFit, DtError> {
    let reg = &cfg.regularization;
    validate_regularization(reg)?;
    let (n, p) = features.dim();
    if n != obs.len() {
        return Err(DtError::LengthMismatch(format!("{} rows vs {} observations", n, obs.len())));
    }
    let paths: Vec<DiscretePath> = obs.iter().map(|&o| discretize(o, grid)).collect::<Result<_, _>>()?;
    let standardizer = Standardizer::fit(features);
    let z = standardizer.transform(features);
    let intervals = grid.n_intervals();
    let mut rng = ChaCha8Rng::seed_from_u64(reg.seed);
    let mut net = HazardNet::init(p, cfg.hidden, intervals, &marginal_logits(&paths, intervals), &mut rng);
    let mask = net.weight_mask();
    let mut opt = ProxAdam::new(net.params.len(), AdamSettings::default());
    let batch = reg.batch_size.unwrap_or(n).clamp(1, n.max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    let all: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(reg.max_epochs);
    let mut last = f64::NAN;
    let mut clamped = 0;
    for epoch in 0..reg.max_epochs {
        let lr = reg.step_size / (1.0 + reg.lr_decay * epoch as f64);
        if batch < n {
            idx.shuffle(&mut rng);
        }
        let before = net.params.clone();
        for chunk in idx.chunks(batch) {
            let mut rows = chunk.to_vec();
            rows.sort_unstable();
            let (_, grad, _) = dt_objective_grad(&net, z.view(), &paths, &rows, reg.alpha, reg.gamma, &mask);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(DtError::NonFinite { epoch, step_size: lr, last_loss: last });
            }
            opt.step(&mut net.params, &grad, lr, reg.alpha * reg.gamma, Some(&mask));
        }
        let (total, _, c) = dt_objective_grad(&net, z.view(), &paths, &all, reg.alpha, reg.gamma, &mask);
        if !total.is_finite() {
            return Err(DtError::NonFinite { epoch, step_size: lr, last_loss: last });
        }
        last = total;
        clamped = c;
        trace.push(total);
        let moved = net.params.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if moved < reg.tol {
            break;
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} hazards clamped to [{HAZARD_FLOOR}, 1 - {HAZARD_FLOOR}]");
    }
    Ok(DtFit {
        model: DiscreteTimeModel {
            grid: grid.clone(),
            standardizer,
            net,
            horizon: cfg.horizon,
            regularization: reg.clone(),
        },
        loss_trace: trace,
        clamped,
    })
}
