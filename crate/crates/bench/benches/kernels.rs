use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;

use relapse_core::eval::silhouette_coefficient;
use relapse_core::models::{train_rf, ForestConfig};
use relapse_core::nn::{network_backward, LossKind, Mode, NetworkParams, NetworkShape};
use relapse_core::synth::separable_windows;
use relapse_core::{seed, Normalizer, ObservationWindow};

fn lstm(c: &mut Criterion) {
    let windows = separable_windows(32, 28, 0.15, 1);
    let batch: Vec<&[f64]> = windows.iter().map(|w| w.input.as_slice()).collect();
    let ys: Vec<f64> = windows
        .iter()
        .map(|w| f64::from(u8::from(w.label)))
        .collect();
    let shape = NetworkShape {
        input_dim: 144,
        hidden_dim: 32,
        fc1: 32,
        fc2: 16,
        dropout_rate: 0.2,
    };
    let params = NetworkParams::init(&shape, 1).unwrap();
    c.bench_function("network forward, batch 32 x 28 days", |b| {
        b.iter(|| {
            params
                .loss(black_box(&batch), &ys, LossKind::Bce, Mode::Train, 7)
                .unwrap()
        })
    });
    c.bench_function("network backward, batch 32 x 28 days", |b| {
        b.iter(|| {
            network_backward(
                &params,
                black_box(&batch),
                &ys,
                LossKind::Bce,
                Mode::Train,
                7,
            )
            .unwrap()
        })
    });
}

fn forest(c: &mut Criterion) {
    let windows = separable_windows(200, 28, 0.15, 2);
    let refs: Vec<&ObservationWindow> = windows.iter().collect();
    let normalizer = Normalizer {
        min: vec![0.0; 144],
        max: vec![1.0; 144],
        fitted_on: "bench".into(),
    };
    let cfg = ForestConfig::default();
    c.bench_function("forest fit, 200 windows", |b| {
        b.iter(|| train_rf(black_box(&refs), &cfg, &normalizer).unwrap())
    });
}

fn silhouette(c: &mut Criterion) {
    let mut rng = seed::rng(3);
    let points: Vec<Vec<f64>> = (0..500)
        .map(|_| (0..16).map(|_| rng.gen()).collect())
        .collect();
    let labels: Vec<usize> = (0..500).map(|i| i % 2).collect();
    c.bench_function("silhouette, 500 points x 16", |b| {
        b.iter(|| silhouette_coefficient(black_box(&points), &labels).unwrap())
    });
}

criterion_group!(benches, lstm, forest, silhouette);
criterion_main!(benches);
