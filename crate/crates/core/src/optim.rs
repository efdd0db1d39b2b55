//! Optimizers: Adam with a proximal L1 step, and BFGS for smooth problems.

use serde::{Deserialize, Serialize};

/// Adam moment settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam state for a flat parameter vector.
///
/// After the smooth update each coordinate listed in `l1_mask` is
/// soft-thresholded with its own effective step, so the iteration is a
/// diagonally scaled proximal gradient step and exact zeros are reachable.
#[derive(Debug, Clone)]
pub struct ProxAdam {
    settings: AdamSettings,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ProxAdam {
    pub fn new(n: usize, settings: AdamSettings) -> Self {
        ProxAdam { settings, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One step. `l1_weight` is the coefficient of `|theta_k|` for masked
    /// coordinates; `l1_mask[k] == false` exempts coordinate k (biases).
    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        l1_weight: f64,
        l1_mask: Option<&[bool]>,
    ) {
        let AdamSettings { beta1, beta2, eps } = self.settings;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            let step = lr / (v_hat.sqrt() + eps);
            let mut p = params[k] - step * m_hat;
            let penalized = l1_mask.is_none_or(|mask| mask[k]);
            if penalized && l1_weight > 0.0 {
                let thr = step * l1_weight;
                p = p.signum() * (p.abs() - thr).max(0.0);
            }
            params[k] = p;
        }
    }
}

/// Gradient of `((1 - gamma) / 2) * |theta|^2` scaled by `alpha`, added in
/// place for masked coordinates. Returns the penalty value (L2 and L1 parts).
pub fn elastic_net_penalty(
    params: &[f64],
    alpha: f64,
    gamma: f64,
    mask: Option<&[bool]>,
    grad: Option<&mut [f64]>,
) -> f64 {
    let mut l2 = 0.0;
    let mut l1 = 0.0;
    let included = |k: usize| mask.is_none_or(|m| m[k]);
    for (k, &p) in params.iter().enumerate() {
        if included(k) {
            l2 += p * p;
            l1 += p.abs();
        }
    }
    if let Some(g) = grad {
        for (k, gk) in g.iter_mut().enumerate() {
            if included(k) {
                *gk += alpha * (1.0 - gamma) * params[k];
            }
        }
    }
    0.5 * (1.0 - gamma) * l2 + gamma * l1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 2000, grad_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Quasi-Newton minimization with an inverse-Hessian BFGS update and
/// backtracking Armijo line search. `f` returns value and gradient; a
/// non-finite value is treated as outside the domain.
pub fn bfgs_minimize(
    mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: &[f64],
    opts: BfgsOptions,
) -> BfgsResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let identity = || {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        h
    };
    let mut h = identity();
    let mut iterations = 0;
    while iterations < opts.max_iter && norm(&g) >= opts.grad_tol {
        iterations += 1;
        let mut d: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h[i * n + j] * g[j]).sum::<f64>()).collect();
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h = identity();
            d = g.iter().map(|v| -v).collect();
            slope = -g.iter().map(|v| v * v).sum::<f64>();
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-16 * norm(&s) * norm(&y) && sy > 0.0 {
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    let grad_norm = norm(&g);
    BfgsResult { converged: grad_norm < opts.grad_tol, x, value: fx, grad_norm, iterations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut opt = ProxAdam::new(2, AdamSettings::default());
        let mut p = vec![3.0, -2.0];
        for _ in 0..3000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g, 0.01, 0.0, None);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn l1_reaches_exact_zero() {
        // min (p - 0.1)^2 + |p| has its minimum at 0.
        let mut opt = ProxAdam::new(1, AdamSettings::default());
        let mut p = vec![1.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 0.1)];
            opt.step(&mut p, &g, 0.01, 1.0, None);
        }
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn penalty_value_and_gradient() {
        let p = [1.0, -2.0, 3.0];
        let mask = [true, true, false];
        let mut g = [0.0; 3];
        let r = elastic_net_penalty(&p, 0.5, 0.25, Some(&mask), Some(&mut g));
        assert!((r - (0.5 * 0.75 * 5.0 + 0.25 * 3.0)).abs() < 1e-15);
        assert_eq!(g, [0.5 * 0.75 * 1.0, 0.5 * 0.75 * -2.0, 0.0]);
    }

    #[test]
    fn bfgs_rosenbrock() {
        let r = bfgs_minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
                (f, g)
            },
            &[-1.2, 1.0],
            BfgsOptions::default(),
        );
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }
}
