use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use uniam::cam::CamConfig;
use uniam::data::{generate, ScenarioSpec};
use uniam::separation::{kmeans, residual_refine};
use uniam::sparse::{normalize_dictionary, solve_lasso, LassoOptions};
use uniam::trainer::{init_model, refresh_snapshot, TrainConfig, TrainData};
use uniam::{Dictionary, Matrix, Rng, Vector};

fn lasso(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    for (dim, atoms) in [(32, 8), (64, 31)] {
        let cols: Vec<Vec<f64>> = (0..atoms).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let d = Dictionary::new(Matrix::from_columns(&refs).unwrap(), (0..atoms).collect()).unwrap();
        let d = normalize_dictionary(&d).unwrap();
        let q: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        c.bench_function(&format!("lasso {dim}x{atoms}"), |b| {
            b.iter(|| solve_lasso(black_box(&q), &d, 0.1, &LassoOptions::default()).unwrap())
        });
    }
}

fn clustering(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let centers: Vec<Vector> = (0..8).map(|_| rng.normal_vec(16, 3.0)).collect();
    let pts: Vec<Vector> = (0..800)
        .map(|i| Vector::new(centers[i % 8].iter().map(|x| x + rng.normal()).collect()))
        .collect();
    let cam = CamConfig::default();
    let unit: Vec<Vector> = pts.iter().map(|p| Vector::new(cam.prepare_query(p))).collect();
    c.bench_function("kmeans 800x16 k10", |b| b.iter(|| kmeans(black_box(&pts), 10, 7, 100).unwrap()));
    let init = kmeans(&unit, 10, 7, 100).unwrap();
    c.bench_function("residual refine 800x16 k10", |b| {
        b.iter(|| residual_refine(black_box(&unit), &init, &cam, 5).unwrap())
    });
}

fn snapshot(c: &mut Criterion) {
    let data = TrainData::from_dataset(&generate(&ScenarioSpec::default()).unwrap()).unwrap();
    let cfg = TrainConfig::default();
    let model = init_model(&data, &cfg).unwrap();
    let mut group = c.benchmark_group("refresh");
    group.sample_size(10);
    group.bench_function("snapshot default scenario", |b| {
        b.iter(|| refresh_snapshot(black_box(&model), &data, &cfg, 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, lasso, clustering, snapshot);
criterion_main!(benches);
