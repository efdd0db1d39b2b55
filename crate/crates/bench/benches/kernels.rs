use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use prognos_core::coxfit::{cox_partial_loss_grad, fit_cox_elastic_net, ElasticNetConfig};
use prognos_core::domain::{EmbeddingBag, Observation};
use prognos_core::metrics::{c_index, ScoredObservation};
use prognos_core::pooling::{pool_gated_attention, pool_mean, GatedAttentionParams};
use prognos_core::tiling::otsu_threshold;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn observations(n: usize, rng: &mut ChaCha8Rng) -> Vec<Observation> {
    (0..n).map(|_| Observation::new(rng.random_range(0.1..10.0), rng.random_bool(0.4))).collect()
}

fn concordance(c: &mut Criterion) {
    let mut group = c.benchmark_group("c_index");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [1_000, 10_000, 100_000] {
        let obs: Vec<ScoredObservation> = observations(n, &mut rng)
            .into_iter()
            .map(|o| ScoredObservation::new(rng.random_range(0.0..1.0), o))
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &obs, |b, obs| b.iter(|| c_index(black_box(obs)).unwrap()));
    }
    group.finish();
}

fn cox(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let obs = observations(n, &mut rng);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    c.bench_function("cox_loss_grad/10000", |b| b.iter(|| cox_partial_loss_grad(black_box(&scores), &obs).unwrap()));

    let (n, p) = (1_000, 32);
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
    let obs = observations(n, &mut rng);
    let cfg = ElasticNetConfig { max_epochs: 50, ..Default::default() };
    c.bench_function("cox_elastic_net/1000x32x50", |b| b.iter(|| fit_cox_elastic_net(x.view(), &obs, &cfg).unwrap()));
}

fn otsu(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hist: Vec<u64> = (0..256).map(|_| rng.random_range(0..1_000_000)).collect();
    c.bench_function("otsu/256", |b| b.iter(|| otsu_threshold(black_box(&hist)).unwrap()));
}

fn pooling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, dim) = (2_000, 64);
    let rows: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bag = EmbeddingBag::new("bench", dim, rows).unwrap();
    let params = GatedAttentionParams::init(dim, 64, &mut rng);
    c.bench_function("pool_mean/2000x64", |b| b.iter(|| pool_mean(black_box(&bag)).unwrap()));
    c.bench_function("pool_attention/2000x64", |b| b.iter(|| pool_gated_attention(black_box(&bag), &params).unwrap()));
}

criterion_group!(benches, concordance, cox, otsu, pooling);
criterion_main!(benches);
