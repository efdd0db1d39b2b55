//! Bag pooling: mean, max and gated attention over patch embeddings.
//!
//! Every operator processes patches in a canonical (lexicographic) order so
//! that results are bitwise identical under any reordering of the bag.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coxfit::Standardizer;
use crate::discrete_time::{
    discretize, marginal_logits, path_negloglik, validate_regularization, DiscretePath, DiscreteTimeConfig,
    DiscreteTimeModel, DtError, HazardNet, IntervalGrid,
};
use crate::domain::{EmbeddingBag, Observation};
use crate::linalg::sigmoid;
use crate::optim::{elastic_net_penalty, AdamSettings, ProxAdam};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolingError {
    #[error("bag has no patches")]
    EmptyBag,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid attention parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Fit(#[from] DtError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMethod {
    Mean,
    Max,
    Attention,
}

impl PoolingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolingMethod::Mean => "mean",
            PoolingMethod::Max => "max",
            PoolingMethod::Attention => "attention",
        }
    }
}

impl std::fmt::Display for PoolingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PoolingMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(PoolingMethod::Mean),
            "max" => Ok(PoolingMethod::Max),
            "attention" | "gated_attention" => Ok(PoolingMethod::Attention),
            other => Err(format!("unknown pooling method `{other}`")),
        }
    }
}

fn canonical_order<T>(rows: &[T], dim: usize, cmp: impl Fn(&T, &T) -> Ordering) -> Vec<usize> {
    let n = if dim == 0 { 0 } else { rows.len() / dim };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = &rows[a * dim..(a + 1) * dim];
        let rb = &rows[b * dim..(b + 1) * dim];
        ra.iter()
            .zip(rb)
            .map(|(x, y)| cmp(x, y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn check_bag(bag: &EmbeddingBag) -> Result<(), PoolingError> {
    if bag.n_patches() == 0 {
        return Err(PoolingError::EmptyBag);
    }
    Ok(())
}

/// Coordinatewise mean across patches.
pub fn pool_mean(bag: &EmbeddingBag) -> Result<Vec<f64>, PoolingError> {
    check_bag(bag)?;
    let dim = bag.dim();
    let rows = bag.as_slice();
    let mut out = vec![0.0; dim];
    for k in canonical_order(rows, dim, f32::total_cmp) {
        for (o, &v) in out.iter_mut().zip(bag.patch(k)) {
            *o += v as f64;
        }
    }
    let n = bag.n_patches() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Coordinatewise max across patches.
pub fn pool_max(bag: &EmbeddingBag) -> Result<Vec<f64>, PoolingError> {
    check_bag(bag)?;
    let mut out = vec![f64::NEG_INFINITY; bag.dim()];
    for patch in bag.patches() {
        for (o, &v) in out.iter_mut().zip(patch) {
            *o = o.max(v as f64);
        }
    }
    Ok(out)
}

pub fn pool(bag: &EmbeddingBag, method: PoolingMethod) -> Result<Vec<f64>, PoolingError> {
    match method {
        PoolingMethod::Mean => pool_mean(bag),
        PoolingMethod::Max => pool_max(bag),
        PoolingMethod::Attention => Err(PoolingError::InvalidParams(
            "attention pooling needs trained parameters".into(),
        )),
    }
}

/// Gated attention network: `a_k ∝ exp(w . (tanh(V'x_k) ⊙ sigmoid(U'x_k)))`.
/// V and U are `dim x hidden`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedAttentionParams {
    pub dim: usize,
    pub hidden: usize,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

impl GatedAttentionParams {
    pub fn new(dim: usize, hidden: usize, v: Vec<f64>, u: Vec<f64>, w: Vec<f64>) -> Result<Self, PoolingError> {
        if hidden == 0 {
            return Err(PoolingError::InvalidParams("hidden width must be at least 1".into()));
        }
        if v.len() != dim * hidden || u.len() != dim * hidden || w.len() != hidden {
            return Err(PoolingError::InvalidParams(format!(
                "expected V, U of {} entries and w of {hidden}",
                dim * hidden
            )));
        }
        if v.iter().chain(&u).chain(&w).any(|x| !x.is_finite()) {
            return Err(PoolingError::InvalidParams("non-finite entry".into()));
        }
        Ok(GatedAttentionParams { dim, hidden, v, u, w })
    }

    /// Glorot-uniform V and U; w small so initial weights are near uniform.
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (dim + hidden) as f64).sqrt();
        let v = (0..dim * hidden).map(|_| rng.random_range(-a..a)).collect();
        let u = (0..dim * hidden).map(|_| rng.random_range(-a..a)).collect();
        let b = 0.1 * (6.0 / (hidden + 1) as f64).sqrt();
        let w = (0..hidden).map(|_| rng.random_range(-b..b)).collect();
        GatedAttentionParams { dim, hidden, v, u, w }
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim * self.hidden + self.hidden
    }

    /// `[V, U, w]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.u);
        out.extend_from_slice(&self.w);
        out
    }

    pub fn from_flat(dim: usize, hidden: usize, flat: &[f64]) -> Result<Self, PoolingError> {
        let m = dim * hidden;
        if flat.len() != 2 * m + hidden {
            return Err(PoolingError::InvalidParams(format!("expected {} values, got {}", 2 * m + hidden, flat.len())));
        }
        Self::new(dim, hidden, flat[..m].to_vec(), flat[m..2 * m].to_vec(), flat[2 * m..].to_vec())
    }

    /// Pre-activations and gates for one patch.
    fn branches(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let mut t = vec![0.0; h];
        let mut g = vec![0.0; h];
        for (d, &xd) in x.iter().enumerate() {
            for c in 0..h {
                t[c] += self.v[d * h + c] * xd;
                g[c] += self.u[d * h + c] * xd;
            }
        }
        t.iter_mut().for_each(|v| *v = v.tanh());
        g.iter_mut().for_each(|v| *v = sigmoid(*v));
        (t, g)
    }

    fn score(&self, t: &[f64], g: &[f64]) -> f64 {
        (0..self.hidden).map(|c| self.w[c] * t[c] * g[c]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub pooled: Vec<f64>,
    /// One weight per patch, in the bag's original order.
    pub weights: Vec<f64>,
}

/// Gated attention over row-major patch rows.
pub fn gated_attention_rows(rows: &[f64], dim: usize, params: &GatedAttentionParams) -> Result<AttentionOutput, PoolingError> {
    if dim != params.dim {
        return Err(PoolingError::DimMismatch { expected: params.dim, got: dim });
    }
    if rows.is_empty() {
        return Err(PoolingError::EmptyBag);
    }
    let n = rows.len() / dim;
    let order = canonical_order(rows, dim, f64::total_cmp);
    let mut scores = vec![0.0; n];
    for &k in &order {
        let (t, g) = params.branches(&rows[k * dim..(k + 1) * dim]);
        scores[k] = params.score(&t, &g);
    }
    let top = order.iter().map(|&k| scores[k]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut weights = vec![0.0; n];
    for &k in &order {
        weights[k] = (scores[k] - top).exp();
        total += weights[k];
    }
    weights.iter_mut().for_each(|w| *w /= total);
    let mut pooled = vec![0.0; dim];
    for &k in &order {
        for (o, &x) in pooled.iter_mut().zip(&rows[k * dim..(k + 1) * dim]) {
            *o += weights[k] * x;
        }
    }
    Ok(AttentionOutput { pooled, weights })
}

pub fn pool_gated_attention(bag: &EmbeddingBag, params: &GatedAttentionParams) -> Result<AttentionOutput, PoolingError> {
    check_bag(bag)?;
    let rows: Vec<f64> = bag.as_slice().iter().map(|&v| v as f64).collect();
    gated_attention_rows(&rows, bag.dim(), params)
}

/// Accumulates `d loss / d [V, U, w]` into `grad` given `d loss / d pooled`.
pub fn gated_attention_backward(
    rows: &[f64],
    params: &GatedAttentionParams,
    out: &AttentionOutput,
    d_pooled: &[f64],
    grad: &mut [f64],
) {
    let (dim, h) = (params.dim, params.hidden);
    let m = dim * h;
    let gp: f64 = d_pooled.iter().zip(&out.pooled).map(|(a, b)| a * b).sum();
    for (k, &a_k) in out.weights.iter().enumerate() {
        let x = &rows[k * dim..(k + 1) * dim];
        let gx: f64 = d_pooled.iter().zip(x).map(|(a, b)| a * b).sum();
        let ds = a_k * (gx - gp);
        if ds == 0.0 {
            continue;
        }
        let (t, g) = params.branches(x);
        for c in 0..h {
            grad[2 * m + c] += ds * t[c] * g[c];
            let dt = ds * params.w[c] * (1.0 - t[c] * t[c]) * g[c];
            let dg = ds * params.w[c] * t[c] * g[c] * (1.0 - g[c]);
            for (d, &xd) in x.iter().enumerate() {
                grad[d * h + c] += dt * xd;
                grad[m + d * h + c] += dg * xd;
            }
        }
    }
}

/// Gated-attention pooling feeding a discrete-time hazard scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDtModel {
    pub patch_standardizer: Standardizer,
    pub attention: GatedAttentionParams,
    /// Operates on the pooled standardized patches; its own standardizer is
    /// the identity.
    pub dt: DiscreteTimeModel,
}

impl AttentionDtModel {
    fn scaled_rows(&self, bag: &EmbeddingBag) -> Vec<f64> {
        scale_bag(&self.patch_standardizer, bag)
    }

    pub fn attend(&self, bag: &EmbeddingBag) -> Result<AttentionOutput, PoolingError> {
        check_bag(bag)?;
        if bag.dim() != self.attention.dim {
            return Err(PoolingError::DimMismatch { expected: self.attention.dim, got: bag.dim() });
        }
        gated_attention_rows(&self.scaled_rows(bag), bag.dim(), &self.attention)
    }

    pub fn bag_risk(&self, bag: &EmbeddingBag) -> Result<f64, PoolingError> {
        Ok(self.dt.risk(&self.attend(bag)?.pooled))
    }

    /// Average of per-slide risks.
    pub fn subject_risk(&self, bags: &[&EmbeddingBag]) -> Result<f64, PoolingError> {
        if bags.is_empty() {
            return Err(PoolingError::EmptyBag);
        }
        let mut total = 0.0;
        for b in bags {
            total += self.bag_risk(b)?;
        }
        Ok(total / bags.len() as f64)
    }
}

fn scale_bag(s: &Standardizer, bag: &EmbeddingBag) -> Vec<f64> {
    let dim = bag.dim();
    let mut out = vec![0.0; bag.as_slice().len()];
    let mut buf = vec![0.0; dim];
    for (k, patch) in bag.patches().enumerate() {
        buf.iter_mut().zip(patch).for_each(|(b, &v)| *b = v as f64);
        s.apply(&buf, &mut out[k * dim..(k + 1) * dim]);
    }
    out
}

/// Standardization statistics over every patch of every bag.
pub fn patch_standardizer(bags: &[&EmbeddingBag]) -> Result<Standardizer, PoolingError> {
    let dim = bags.first().ok_or(PoolingError::EmptyBag)?.dim();
    let total: usize = bags.iter().map(|b| b.n_patches()).sum();
    if total == 0 {
        return Err(PoolingError::EmptyBag);
    }
    let mut all = Array2::<f64>::zeros((total, dim));
    let mut r = 0;
    for b in bags {
        if b.dim() != dim {
            return Err(PoolingError::DimMismatch { expected: dim, got: b.dim() });
        }
        for patch in b.patches() {
            all.row_mut(r).iter_mut().zip(patch).for_each(|(o, &v)| *o = v as f64);
            r += 1;
        }
    }
    Ok(Standardizer::fit(all.view()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDtConfig {
    pub attention_hidden: usize,
    pub dt: DiscreteTimeConfig,
}

impl Default for AttentionDtConfig {
    fn default() -> Self {
        AttentionDtConfig { attention_hidden: 64, dt: DiscreteTimeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDtFit {
    pub model: AttentionDtModel,
    pub loss_trace: Vec<f64>,
}

struct JointProblem<'a> {
    rows: Vec<Vec<f64>>,
    paths: Vec<DiscretePath>,
    dim: usize,
    att_hidden: usize,
    net_shape: (usize, usize, usize),
    alpha: f64,
    gamma: f64,
    mask: &'a [bool],
}

impl JointProblem<'_> {
    fn split(&self, theta: &[f64]) -> (GatedAttentionParams, HazardNet) {
        let n_att = 2 * self.dim * self.att_hidden + self.att_hidden;
        let att = GatedAttentionParams {
            dim: self.dim,
            hidden: self.att_hidden,
            v: theta[..self.dim * self.att_hidden].to_vec(),
            u: theta[self.dim * self.att_hidden..2 * self.dim * self.att_hidden].to_vec(),
            w: theta[2 * self.dim * self.att_hidden..n_att].to_vec(),
        };
        let (p, h, j) = self.net_shape;
        let net = HazardNet { input_dim: p, hidden: h, intervals: j, params: theta[n_att..].to_vec() };
        (att, net)
    }

    /// Objective and smooth-part gradient on a subset of bags.
    fn objective_grad(&self, theta: &[f64], bags: &[usize]) -> Result<(f64, Vec<f64>), PoolingError> {
        let (att, net) = self.split(theta);
        let n_att = att.param_count();
        let mut grad = vec![0.0; theta.len()];
        let scale = (1.0 - self.alpha) / bags.len().max(1) as f64;
        let mut phi = vec![0.0; net.intervals];
        let mut dphi = vec![0.0; net.intervals];
        let mut act = Vec::new();
        let mut nll = 0.0;
        for &b in bags {
            let out = gated_attention_rows(&self.rows[b], self.dim, &att)?;
            net.forward(&out.pooled, &mut act, &mut phi);
            let (l, _) = path_negloglik(&phi, self.paths[b], Some(&mut dphi));
            nll += l;
            dphi.iter_mut().for_each(|g| *g *= scale);
            let mut dpool = vec![0.0; self.dim];
            net.backward(&out.pooled, &act, &dphi, &mut grad[n_att..], Some(&mut dpool));
            gated_attention_backward(&self.rows[b], &att, &out, &dpool, &mut grad[..n_att]);
        }
        let pen = elastic_net_penalty(theta, self.alpha, self.gamma, Some(self.mask), Some(&mut grad));
        Ok((scale * nll + self.alpha * pen, grad))
    }
}

/// Trains attention and hazard network jointly end to end. Each bag is one
/// training example carrying its subject's outcome.
pub fn fit_attention_dt(
    bags: &[&EmbeddingBag],
    obs: &[Observation],
    grid: &IntervalGrid,
    cfg: &AttentionDtConfig,
) -> Result<AttentionDtFit, PoolingError> {
    let reg = &cfg.dt.regularization;
    validate_regularization(reg)?;
    if bags.len() != obs.len() {
        return Err(DtError::LengthMismatch(format!("{} bags vs {} observations", bags.len(), obs.len())).into());
    }
    if cfg.attention_hidden == 0 {
        return Err(PoolingError::InvalidParams("attention width must be at least 1".into()));
    }
    for b in bags {
        check_bag(b)?;
    }
    let standardizer = patch_standardizer(bags)?;
    let dim = standardizer.dim();
    let rows: Vec<Vec<f64>> = bags.iter().map(|b| scale_bag(&standardizer, b)).collect();
    let paths: Vec<DiscretePath> = obs.iter().map(|&o| discretize(o, grid)).collect::<Result<_, _>>()?;
    let intervals = grid.n_intervals();

    let mut rng = ChaCha8Rng::seed_from_u64(reg.seed);
    let att = GatedAttentionParams::init(dim, cfg.attention_hidden, &mut rng);
    let net = HazardNet::init(dim, cfg.dt.hidden, intervals, &marginal_logits(&paths, intervals), &mut rng);
    let mut theta = att.flatten();
    let mut mask = vec![true; theta.len()];
    theta.extend_from_slice(&net.params);
    mask.extend(net.weight_mask());

    let problem = JointProblem {
        rows,
        paths,
        dim,
        att_hidden: cfg.attention_hidden,
        net_shape: (dim, cfg.dt.hidden, intervals),
        alpha: reg.alpha,
        gamma: reg.gamma,
        mask: &mask,
    };
    let n = bags.len();
    let batch = reg.batch_size.unwrap_or(n).clamp(1, n.max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    let all: Vec<usize> = (0..n).collect();
    let mut opt = ProxAdam::new(theta.len(), AdamSettings::default());
    let mut trace = Vec::with_capacity(reg.max_epochs);
    let mut last = f64::NAN;
    for epoch in 0..reg.max_epochs {
        let lr = reg.step_size / (1.0 + reg.lr_decay * epoch as f64);
        if batch < n {
            idx.shuffle(&mut rng);
        }
        let before = theta.clone();
        for chunk in idx.chunks(batch) {
            let mut sel = chunk.to_vec();
            sel.sort_unstable();
            let (_, grad) = problem.objective_grad(&theta, &sel)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(DtError::NonFinite { epoch, step_size: lr, last_loss: last }.into());
            }
            opt.step(&mut theta, &grad, lr, reg.alpha * reg.gamma, Some(&mask));
        }
        let (total, _) = problem.objective_grad(&theta, &all)?;
        if !total.is_finite() {
            return Err(DtError::NonFinite { epoch, step_size: lr, last_loss: last }.into());
        }
        last = total;
        trace.push(total);
        let moved = theta.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if moved < reg.tol {
            break;
        }
    }
    let (attention, net) = problem.split(&theta);
    Ok(AttentionDtFit {
        model: AttentionDtModel {
            patch_standardizer: standardizer,
            attention,
            dt: DiscreteTimeModel {
                grid: grid.clone(),
                standardizer: Standardizer { means: vec![0.0; dim], sds: vec![1.0; dim] },
                net,
                horizon: cfg.dt.horizon,
                regularization: reg.clone(),
            },
        },
        loss_trace: trace,
    })
}

/// Objective and gradient of the joint attention + hazard problem, exposed for
/// derivative checks.
pub fn attention_dt_objective_grad(
    bags: &[&EmbeddingBag],
    obs: &[Observation],
    model: &AttentionDtModel,
    alpha: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>), PoolingError> {
    let grid = &model.dt.grid;
    let paths: Vec<DiscretePath> = obs.iter().map(|&o| discretize(o, grid)).collect::<Result<_, _>>()?;
    let rows: Vec<Vec<f64>> = bags.iter().map(|b| scale_bag(&model.patch_standardizer, b)).collect();
    let mut theta = model.attention.flatten();
    let mut mask = vec![true; theta.len()];
    theta.extend_from_slice(&model.dt.net.params);
    mask.extend(model.dt.net.weight_mask());
    let problem = JointProblem {
        rows,
        paths,
        dim: model.attention.dim,
        att_hidden: model.attention.hidden,
        net_shape: (model.dt.net.input_dim, model.dt.net.hidden, model.dt.net.intervals),
        alpha,
        gamma,
        mask: &mask,
    };
    let all: Vec<usize> = (0..bags.len()).collect();
    problem.objective_grad(&theta, &all)
}
