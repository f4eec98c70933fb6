use candle_core::{DType, Device};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rockseg::classical::{fcm_segment, kmeans_segment, otsu_multiclass};
use rockseg::neural::{Builder, HeadKind, HeadSpec, Init, LinearHead};
use rockseg::preprocess::{bfe, nl_means_with, BfeConfig, NlMeansConfig};
use rockseg::shallow::{KnnConfig, KnnProbe};
use rockseg_bench::{phase_mask, phase_slice, random_features};

fn classical(c: &mut Criterion) {
    let mut g = c.benchmark_group("classical");
    for size in [128, 256] {
        let s = phase_slice(size, 0);
        g.bench_with_input(BenchmarkId::new("otsu3", size), &s, |b, s| {
            b.iter(|| otsu_multiclass(black_box(s), 3, 256).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("kmeans3", size), &s, |b, s| {
            b.iter(|| kmeans_segment(black_box(s), 3, 0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("fcm3", size), &s, |b, s| {
            b.iter(|| fcm_segment(black_box(s), 3, 2.0, 0).unwrap())
        });
    }
    g.finish();
}

fn preprocess(c: &mut Criterion) {
    let mut g = c.benchmark_group("preprocess");
    g.sample_size(10);
    let s = phase_slice(128, 1);
    let nl = NlMeansConfig::default();
    g.bench_function("nlmeans_128", |b| b.iter(|| nl_means_with(black_box(&s), &nl).unwrap()));
    let cfg = BfeConfig::default();
    g.bench_function("bfe_128", |b| b.iter(|| bfe(black_box(&s), &cfg).unwrap()));
    g.finish();
}

fn knn(c: &mut Criterion) {
    let cfg = KnnConfig {
        k: 10,
        probe_size: 32,
        ..Default::default()
    };
    let train = [random_features(32, 32, 15, 1), random_features(32, 32, 15, 2)];
    let masks = [phase_mask(32), phase_mask(32)];
    let test = random_features(32, 32, 15, 3);
    let probe = KnnProbe::fit(&train, &masks, &cfg).unwrap();
    c.bench_function("knn_probe_predict_32", |b| b.iter(|| probe.predict(black_box(&test)).unwrap()));
}

fn linear_head(c: &mut Criterion) {
    let dev = Device::Cpu;
    let mut b = Builder::new(0, &dev, DType::F32);
    let spec = HeadSpec::new(HeadKind::Linear, 3);
    let head = LinearHead::new(&mut b, "head", 768, &spec).unwrap();
    let tokens = b.init(&[1, 768, 40, 40], Init::Normal(1.0)).unwrap();
    c.bench_function("linear_head_40x40_to_560", |bch| bch.iter(|| head.forward(black_box(&tokens)).unwrap()));
}

criterion_group!(benches, classical, preprocess, knn, linear_head);
criterion_main!(benches);
