//! Every workload runs the same library code twice: on the global rayon pool
//! and inside a one-thread pool, where the `par` helpers fall back to plain
//! loops. Build with `--no-default-features` and both arms are sequential.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rayon::ThreadPool;

use vlad_core::data::{generate_scenes, render_scene, Canvas, SceneConfig};
use vlad_core::metrics::ocr_detect;
use vlad_core::model::{sampler_for, schedule_for};
use vlad_core::par;
use vlad_core::rng::RngStream;
use vlad_core::tensor::kernels::matmul_nn;
use vlad_core::{RunConfig, Vlad};

fn single() -> ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()
}

fn both<R: Send>(c: &mut Criterion, group: &str, samples: usize, f: impl Fn() -> R + Sync) {
    let one = single();
    let mut g = c.benchmark_group(group);
    g.sample_size(samples);
    let label = if par::is_parallel() {
        format!("parallel/{}", rayon::current_num_threads())
    } else {
        "parallel/off".to_string()
    };
    g.bench_function(label, |b| b.iter(|| black_box(f())));
    g.bench_function("sequential", |b| b.iter(|| one.install(|| black_box(f()))));
    g.finish();
}

fn scenes(c: &mut Criterion) {
    let cfg = SceneConfig::default();
    both(c, "scene_generation_4096", 50, || generate_scenes(7, 4096, &cfg));
}

fn ocr(c: &mut Criterion) {
    let canvases: Vec<Canvas> = generate_scenes(11, 1024, &SceneConfig::default())
        .iter()
        .map(|s| render_scene(s).unwrap())
        .collect();
    both(c, "ocr_detect_1024", 30, || {
        par::map_indexed(canvases.len(), |i| ocr_detect(&canvases[i]))
    });
}

fn matmul(c: &mut Criterion) {
    let (m, k, n) = (256, 536, 512);
    let mut rng = RngStream::new(3);
    let a: Vec<f32> = rng.gauss_vec(m * k).into_iter().map(|v| v as f32).collect();
    let w: Vec<f32> = rng.gauss_vec(k * n).into_iter().map(|v| v as f32).collect();
    both(c, "matmul_256x536x512", 30, || matmul_nn(&a, &w, m, k, n));
}

fn sampling(c: &mut Criterion) {
    let cfg = RunConfig {
        hidden: 128,
        t_steps: 20,
        ..RunConfig::default()
    };
    let (model, store) = Vlad::build(&cfg);
    let schedule = schedule_for(&cfg).unwrap();
    let prompts = generate_scenes(5, 128, &SceneConfig::default());
    let opts = sampler_for(&cfg, true);
    both(c, "reverse_sampling_128", 10, || {
        model.generate(&store, &schedule, &prompts, 0, opts).unwrap()
    });
}

criterion_group!(benches, scenes, ocr, matmul, sampling);
criterion_main!(benches);
