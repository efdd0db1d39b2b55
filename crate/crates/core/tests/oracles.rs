use ndarray::Array2;
use prognos_core::aft::{fit_aft, AftConfig, AftDistribution};
use prognos_core::coxfit::{
    cox_partial_loss_grad, dichotomized_hr, elastic_net_objective, fit_cox_elastic_net, fit_cox_exact, ElasticNetConfig,
    ExactOptions, Standardizer,
};
use prognos_core::discrete_time::{
    discretize, dt_negloglik, fit_discrete_time, DiscretePath, DiscreteTimeConfig, HazardNet, IntervalGrid,
};
use prognos_core::domain::{EmbeddingBag, Endpoint, Observation};
use prognos_core::metrics::{c_index, recurrence_rate_by_quartile, ScoredObservation};
use prognos_core::pooling::{pool_gated_attention, pool_max, pool_mean, GatedAttentionParams};
use prognos_core::search::{
    overall_score, sample_thetas, select_best, FoldScore, ParamSpec, ParamValue, SearchSpace, Theta, TrialRecord,
};
use prognos_core::synth::{synthesize, CohortSpec, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn c_of(risks: &[f64], obs: &[Observation]) -> f64 {
    let s: Vec<ScoredObservation> = risks.iter().zip(obs).map(|(&r, &o)| ScoredObservation::new(r, o)).collect();
    c_index(&s).unwrap().value
}

/// Breslow log partial likelihood for one covariate, summed term by term.
fn loglik_1d(x: &[f64], obs: &[Observation], beta: f64) -> f64 {
    let mut total = 0.0;
    for (i, oi) in obs.iter().enumerate() {
        if !oi.event {
            continue;
        }
        let denom: f64 = obs.iter().zip(x).filter(|(oj, _)| oj.time >= oi.time).map(|(_, &xj)| (beta * xj).exp()).sum();
        total += beta * x[i] - denom.ln();
    }
    total
}

#[test]
fn two_group_cox_fit_matches_fine_grid() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let obs: Vec<Observation> = x
            .iter()
            .map(|&g| {
                let t: f64 = Exp::new(if g == 1.0 { 0.3 } else { 0.1 }).unwrap().sample(&mut r);
                Observation::new(t.min(15.0), t < 15.0)
            })
            .collect();
        let design = Array2::from_shape_vec((20, 1), x.clone()).unwrap();
        let fit = fit_cox_exact(design.view(), &obs, None, ExactOptions::default()).unwrap();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=10_000 {
            let b = -5.0 + k as f64 * 1e-3;
            let l = loglik_1d(&x, &obs, b);
            if l > best.0 {
                best = (l, b);
            }
        }
        assert!((fit.beta[0] - best.1).abs() <= 1e-3, "seed {seed}: {} vs grid {}", fit.beta[0], best.1);
        assert!(fit.loglik >= best.0 - 1e-9);
    }
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

#[test]
fn lasso_fit_is_sparse_and_matches_proximal_gradient_oracle() {
    let (n, p) = (300, 10);
    let mut r = rng(7);
    let x = Array2::from_shape_fn((n, p), |_| normal(&mut r));
    let obs: Vec<Observation> = (0..n)
        .map(|i| {
            let eta = x[[i, 0]] - 0.8 * x[[i, 1]];
            let t: f64 = Exp::new(0.1 * eta.exp()).unwrap().sample(&mut r);
            let c: f64 = Exp::new(0.05).unwrap().sample(&mut r);
            Observation::new(t.min(c), t <= c)
        })
        .collect();
    let (alpha, gamma) = (0.1, 1.0);
    let cfg = ElasticNetConfig { alpha, gamma, step_size: 0.01, max_epochs: 3000, ..Default::default() };
    let fit = fit_cox_elastic_net(x.view(), &obs, &cfg).unwrap();
    let zeros = fit.scorer.beta.iter().filter(|&&b| b == 0.0).count();
    assert!(zeros * 2 >= p, "only {zeros} exact zeros: {:?}", fit.scorer.beta);

    let z = Standardizer::fit(x.view()).transform(x.view());
    let mut beta = vec![0.0; p];
    let eta = 0.2;
    for _ in 0..20_000 {
        let scores: Vec<f64> = z.rows().into_iter().map(|row| row.iter().zip(&beta).map(|(a, b)| a * b).sum()).collect();
        let (_, gs) = cox_partial_loss_grad(&scores, &obs).unwrap();
        for k in 0..p {
            let g: f64 = (0..n).map(|i| gs[i] * z[[i, k]]).sum::<f64>() * (1.0 - alpha);
            beta[k] = soft(beta[k] - eta * g, eta * alpha);
        }
    }
    let oracle = elastic_net_objective(z.view(), &obs, &beta, alpha, gamma).unwrap();
    let got = elastic_net_objective(z.view(), &obs, &fit.scorer.beta, alpha, gamma).unwrap();
    assert!(got <= oracle + 1e-4, "fit objective {got} vs oracle {oracle}");
    for (a, b) in fit.scorer.beta.iter().zip(&beta) {
        assert_eq!(*a == 0.0, *b == 0.0, "support differs: {:?} vs {:?}", fit.scorer.beta, beta);
    }
}

#[test]
fn planted_feature_is_recovered_by_elastic_net() {
    let (n, p) = (400, 5);
    let mut r = rng(11);
    let x = Array2::from_shape_fn((n, p), |_| normal(&mut r));
    let obs: Vec<Observation> = (0..n)
        .map(|i| {
            let t: f64 = Exp::new((8.0 * x[[i, 2]]).exp()).unwrap().sample(&mut r);
            Observation::new(t, true)
        })
        .collect();
    let cfg = ElasticNetConfig { alpha: 1e-3, step_size: 0.05, max_epochs: 500, ..Default::default() };
    let fit = fit_cox_elastic_net(x.view(), &obs, &cfg).unwrap();
    let c = c_of(&fit.scorer.score_rows(x.view()), &obs);
    assert!(c > 0.9, "{c}");
    let top = (0..p).max_by(|&a, &b| fit.scorer.beta[a].abs().total_cmp(&fit.scorer.beta[b].abs())).unwrap();
    assert_eq!(top, 2);
}

#[test]
fn dichotomized_identical_groups_have_unit_hazard_ratio() {
    let mut r = rng(3);
    let mut risks = Vec::new();
    let mut obs = Vec::new();
    for _ in 0..40 {
        let t = r.random_range(1.0..10.0);
        let e = r.random_bool(0.7);
        risks.extend([0.9, 0.1]);
        obs.extend([Observation::new(t, e), Observation::new(t, e)]);
    }
    let d = dichotomized_hr(&risks, 0.5, &obs).unwrap();
    assert!((d.hr() - 1.0).abs() < 1e-6, "{}", d.hr());
    assert!(d.logrank.p > 0.5);
    assert!(d.fit.wald_p[0] > 0.5);
    assert_eq!((d.n_high, d.n_low), (40, 40));
    assert!(dichotomized_hr(&risks, 0.0, &obs).is_err());
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Logits of a hazard network computed directly from its flat layout.
fn logits_by_hand(net: &HazardNet, x: &[f64]) -> Vec<f64> {
    let (p, h, j) = (net.input_dim, net.hidden, net.intervals);
    let w = &net.params;
    if h == 0 {
        (0..j).map(|q| (0..p).map(|k| w[q * p + k] * x[k]).sum::<f64>() + w[j * p + q]).collect()
    } else {
        let hidden: Vec<f64> =
            (0..h).map(|a| ((0..p).map(|k| w[a * p + k] * x[k]).sum::<f64>() + w[h * p + a]).tanh()).collect();
        let off = h * (p + 1);
        (0..j).map(|q| (0..h).map(|a| w[off + q * h + a] * hidden[a]).sum::<f64>() + w[off + j * h + q]).collect()
    }
}

#[test]
fn discrete_time_likelihood_term_by_term() {
    let grid = IntervalGrid::new(vec![1.0, 2.0, 3.5]).unwrap();
    for (seed, hidden) in [(0, 0), (1, 5), (2, 0), (3, 5)] {
        let mut r = rng(seed);
        let x = Array2::from_shape_fn((6, 3), |_| normal(&mut r));
        let obs: Vec<Observation> = (0..6).map(|_| Observation::new(r.random_range(0.2..5.0), r.random_bool(0.5))).collect();
        let paths: Vec<DiscretePath> = obs.iter().map(|&o| discretize(o, &grid).unwrap()).collect();
        let bias: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..0.0)).collect();
        let net = HazardNet::init(3, hidden, 4, &bias, &mut r);
        let mut oracle = 0.0;
        for (i, path) in paths.iter().enumerate() {
            let phi = logits_by_hand(&net, x.row(i).as_slice().unwrap());
            for q in 0..path.len {
                let lam = sigmoid(phi[q]);
                oracle -= if path.event && q + 1 == path.len { lam.ln() } else { (1.0 - lam).ln() };
            }
        }
        let got = dt_negloglik(&net, x.view(), &paths).unwrap();
        assert!((got.nll - oracle).abs() < 1e-10, "{} vs {oracle}", got.nll);
        assert_eq!(got.clamped, 0);
    }
}

#[test]
fn discrete_time_ranks_planted_hazards() {
    let grid = IntervalGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
    let mut r = rng(5);
    let n = 4000;
    let group: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let obs: Vec<Observation> = group
        .iter()
        .map(|&g| {
            let h = 0.08 * (g + 1) as f64;
            for q in 0..3 {
                if r.random_bool(h) {
                    return Observation::new(q as f64 + 0.5, true);
                }
            }
            Observation::new(3.0, false)
        })
        .collect();
    let x = Array2::from_shape_fn((n, 1), |(i, _)| group[i] as f64);
    let reg = ElasticNetConfig { alpha: 0.0, step_size: 0.05, max_epochs: 600, ..Default::default() };
    let cfg = DiscreteTimeConfig { hidden: 0, regularization: reg, horizon: 3.0 };
    let fit = fit_discrete_time(x.view(), &obs, &grid, &cfg).unwrap();
    let risks: Vec<f64> = (0..4).map(|g| fit.model.risk(&[g as f64])).collect();
    assert!(risks.windows(2).all(|w| w[0] < w[1]), "{risks:?}");
}

#[test]
fn pooling_matches_loop_oracle() {
    let (n, dim, hidden) = (100, 8, 6);
    let mut r = rng(9);
    let rows: Vec<f32> = (0..n * dim).map(|_| r.random_range(-3.0f32..3.0)).collect();
    let bag = EmbeddingBag::new("s", dim, rows.clone()).unwrap();
    let x = |k: usize, d: usize| rows[k * dim + d] as f64;

    let mean = pool_mean(&bag).unwrap();
    let max = pool_max(&bag).unwrap();
    for d in 0..dim {
        let mut s = 0.0;
        let mut m = f64::NEG_INFINITY;
        for k in 0..n {
            s += x(k, d);
            m = m.max(x(k, d));
        }
        assert!((mean[d] - s / n as f64).abs() < 1e-12);
        assert_eq!(max[d], m);
    }

    let mut draw = |len: usize| (0..len).map(|_| r.random_range(-0.5..0.5)).collect::<Vec<f64>>();
    let params = GatedAttentionParams::new(dim, hidden, draw(dim * hidden), draw(dim * hidden), draw(hidden)).unwrap();
    let scores: Vec<f64> = (0..n)
        .map(|k| {
            (0..hidden)
                .map(|h| {
                    let a: f64 = (0..dim).map(|d| x(k, d) * params.v[d * hidden + h]).sum();
                    let b: f64 = (0..dim).map(|d| x(k, d) * params.u[d * hidden + h]).sum();
                    params.w[h] * a.tanh() * sigmoid(b)
                })
                .sum()
        })
        .collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
    let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp() / z).collect();
    let out = pool_gated_attention(&bag, &params).unwrap();
    for k in 0..n {
        assert!((out.weights[k] - weights[k]).abs() < 1e-12);
    }
    for d in 0..dim {
        let v: f64 = (0..n).map(|k| weights[k] * x(k, d)).sum();
        assert!((out.pooled[d] - v).abs() < 1e-10);
    }
}

#[test]
fn aft_on_noise_is_uninformative() {
    let (n, p) = (2000, 4);
    let mut r = rng(21);
    let draw = |r: &mut ChaCha8Rng| {
        let x = Array2::from_shape_fn((n, p), |_| normal(r));
        let obs: Vec<Observation> = (0..n)
            .map(|_| {
                let t = (1.0 + 0.5 * normal(r)).exp();
                let c = r.random_range(0.5..8.0);
                Observation::new(t.min(c), t <= c)
            })
            .collect();
        (x, obs)
    };
    let (x, obs) = draw(&mut r);
    let (xt, ot) = draw(&mut r);
    let fit = fit_aft(x.view(), &obs, &AftConfig::default()).unwrap();
    let c = c_of(&fit.model.risks(xt.view()), &ot);
    assert!((c - 0.5).abs() < 0.05, "{c}");
}

#[test]
fn lognormal_aft_recovers_planted_coefficients() {
    let n = 3000;
    let truth = [0.5, -0.8, 0.3];
    let mut r = rng(13);
    let x = Array2::from_shape_fn((n, 3), |_| normal(&mut r));
    let obs: Vec<Observation> = (0..n)
        .map(|i| {
            let mu = 1.0 + (0..3).map(|k| truth[k] * x[[i, k]]).sum::<f64>();
            let t = (mu + 0.5 * normal(&mut r)).exp();
            let c = r.random_range(1.0..12.0);
            Observation::new(t.min(c), t <= c)
        })
        .collect();
    let cfg = AftConfig { dist: AftDistribution::Normal, ..Default::default() };
    let fit = fit_aft(x.view(), &obs, &cfg).unwrap();
    assert!(fit.identifiable(), "{:?}", fit.flags);
    for (b, t) in fit.model.beta.iter().zip(truth) {
        assert!(((b - t) / t).abs() < 0.1, "{b} vs {t}");
    }
    assert!((fit.model.sigma - 0.5).abs() < 0.05);
}

#[test]
fn log_uniform_draws_pass_kolmogorov_smirnov() {
    let n = 10_000;
    let space = SearchSpace::default().with("lr", ParamSpec::LogUniform { low: 1e-4, high: 1e-1 });
    let thetas = sample_thetas(&space, n, 17).unwrap();
    let (lo, hi) = (1e-4f64.ln(), 1e-1f64.ln());
    let mut u: Vec<f64> = thetas.iter().map(|t| (t["lr"].as_f64().unwrap().ln() - lo) / (hi - lo)).collect();
    u.sort_by(f64::total_cmp);
    assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - v))
        .fold(0.0, f64::max);
    assert!(d < 1.628 / (n as f64).sqrt(), "D = {d}");
}

fn fold(k: usize, score: f64, weight: f64) -> FoldScore {
    FoldScore { fold: k, validation: vec![format!("d{k}")], seed_scores: vec![score], score, weight }
}

fn trial(i: usize, folds: Vec<FoldScore>) -> TrialRecord {
    TrialRecord {
        trial: i,
        theta: Theta::new(),
        seeds: vec![0],
        overall: Some(overall_score(&folds)),
        folds,
        disqualified: None,
        wall_seconds: None,
    }
}

#[test]
fn overall_score_edge_cases() {
    assert_eq!(overall_score(&[fold(0, 0.7, 1.0)]), 0.7);
    assert!((overall_score(&[fold(0, 0.6, 1.0), fold(1, 0.8, 1.0)]) - 0.7).abs() < 1e-15);

    let mut r = rng(2);
    let records: Vec<Vec<FoldScore>> = (0..12)
        .map(|_| (0..3).map(|k| fold(k, r.random_range(0.4..0.9), r.random_range(10.0..500.0))).collect())
        .collect();
    let base: Vec<TrialRecord> = records.iter().cloned().enumerate().map(|(i, f)| trial(i, f)).collect();
    let scaled: Vec<TrialRecord> = records
        .iter()
        .enumerate()
        .map(|(i, f)| trial(i, f.iter().map(|x| FoldScore { weight: 37.5 * x.weight, ..x.clone() }).collect()))
        .collect();
    assert_eq!(select_best(&base), select_best(&scaled));
}

#[test]
fn theta_floats_survive_json() {
    let mut r = rng(31);
    for _ in 0..5000 {
        let mut theta = Theta::new();
        theta.insert("a".into(), ParamValue::Float(r.random::<f64>() * 10f64.powi(r.random_range(-8..3))));
        theta.insert("b".into(), ParamValue::Float(f64::from_bits(r.random::<u64>() >> 2)));
        let text = serde_json::to_string(&theta).unwrap();
        let back: Theta = serde_json::from_str(&text).unwrap();
        assert_eq!(back, theta, "{text}");
    }
}

#[test]
fn quartile_rates_rise_with_planted_risk() {
    let n = 2000;
    let mut r = rng(41);
    let scored: Vec<ScoredObservation> = (0..n)
        .map(|_| {
            let x = normal(&mut r);
            let t: f64 = Exp::new(0.05 * (1.2 * x).exp()).unwrap().sample(&mut r);
            ScoredObservation::new(x, Observation::new(t.min(10.0), t < 10.0))
        })
        .collect();
    let rows = recurrence_rate_by_quartile(&scored, 10.0).unwrap();
    assert!(rows.windows(2).all(|w| w[0].km_event_rate < w[1].km_event_rate), "{rows:?}");
    assert!(rows.windows(2).all(|w| w[0].score_max <= w[1].score_min));
}

#[test]
fn synthetic_cohort_without_effects_is_uninformative() {
    let spec = SynthSpec {
        cohorts: vec![CohortSpec { name: "x".into(), n: 3000, baseline_shift: 0.0 }],
        embedding_effect: 0.0,
        clinical_effect: 0.0,
        seed: 8,
        ..Default::default()
    };
    let out = synthesize(&spec).unwrap();
    let bags: std::collections::HashMap<&str, &EmbeddingBag> = out.bags.iter().map(|b| (b.slide_id(), b)).collect();
    let mut risks = Vec::new();
    let mut obs = Vec::new();
    for s in &out.subjects {
        let Some(slide) = s.embedding_refs.first() else { continue };
        let pooled = pool_mean(bags[slide.as_str()]).unwrap();
        risks.push(pooled[..spec.signal_dims].iter().sum::<f64>());
        obs.push(s.endpoint(Endpoint::Dfi).into());
    }
    assert!(risks.len() > 1000);
    let c = c_of(&risks, &obs);
    assert!((c - 0.5).abs() < 0.03, "{c}");
}
