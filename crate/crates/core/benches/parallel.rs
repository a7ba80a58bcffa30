//! Sequential against rayon execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use glcf::data::logicshapes::{generate_all, LogicShapesSpec};
use candle_core::DType;
use glcf::data::{to_batch, ChannelStats};
use image::{Rgb, RgbImage};
use glcf::par::{self, Parallelism};
use glcf::scoring::{gaussian_smooth_with, score_branch_maps, BranchMaps, FusionConfig, ScoreMap};
use glcf::training::{CalibrationStats, Moments};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [Parallelism; 2] = [Parallelism::Sequential, Parallelism::Rayon];

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScoreMap {
    ScoreMap::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())
}

fn label(mode: Parallelism) -> &'static str {
    match mode {
        Parallelism::Sequential => "sequential",
        Parallelism::Rayon => "rayon",
    }
}

fn with_mode<R>(mode: Parallelism, f: impl FnOnce() -> R) -> R {
    par::set_sequential(mode == Parallelism::Sequential);
    let r = f();
    par::set_sequential(false);
    r
}

fn smoothing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let map = random_map(&mut rng, 256, 256);
    let mut g = c.benchmark_group("gaussian_smooth_256");
    for mode in MODES {
        g.bench_function(BenchmarkId::from_parameter(label(mode)), |b| {
            b.iter(|| gaussian_smooth_with(mode, &map, 4.0))
        });
    }
    g.finish();
}

fn branch_scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let maps: Vec<BranchMaps> = (0..64)
        .map(|_| BranchMaps {
            local: [random_map(&mut rng, 16, 16), random_map(&mut rng, 8, 8), random_map(&mut rng, 4, 4)],
            global: [random_map(&mut rng, 16, 16), random_map(&mut rng, 8, 8), random_map(&mut rng, 4, 4)],
        })
        .collect();
    let m = Moments { mu: 0.5, sigma: 0.3 };
    let stats = CalibrationStats { local: [m; 3], global: [m; 3] };
    let cfg = FusionConfig::default();
    let mut g = c.benchmark_group("score_64_images");
    for mode in MODES {
        g.bench_function(BenchmarkId::from_parameter(label(mode)), |b| {
            b.iter(|| {
                with_mode(mode, || {
                    par::map_range(maps.len(), |i| score_branch_maps(&maps[i], &stats, &cfg, (64, 64)).unwrap())
                })
            })
        });
    }
    g.finish();
}

fn preprocessing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images: Vec<RgbImage> = (0..64)
        .map(|_| RgbImage::from_fn(128, 128, |_, _| Rgb([rng.random(), rng.random(), rng.random()])))
        .collect();
    let stats = ChannelStats::default();
    let mut g = c.benchmark_group("preprocess_64_images");
    for mode in MODES {
        g.bench_function(BenchmarkId::from_parameter(label(mode)), |b| {
            b.iter(|| with_mode(mode, || to_batch(&images, 64, &stats, DType::F32).unwrap()))
        });
    }
    g.finish();
}

fn data_generation(c: &mut Criterion) {
    let spec = LogicShapesSpec {
        n_train: 32,
        n_test_normal: 8,
        n_test_structural: 8,
        n_test_logical: 8,
        ..Default::default()
    };
    let mut g = c.benchmark_group("generate_56_samples");
    g.sample_size(10);
    for mode in MODES {
        g.bench_function(BenchmarkId::from_parameter(label(mode)), |b| {
            b.iter(|| with_mode(mode, || generate_all(&spec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, smoothing, branch_scoring, preprocessing, data_generation);
criterion_main!(benches);
