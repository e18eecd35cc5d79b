//! Sequential vs parallel execution of the per-frame and per-pair loops.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use gvedit::exec::Execution;
use gvedit::metrics::{embed_frames, mean_pairwise_cosine};
use gvedit::pipeline::{Pipeline, PipelineConfig};
use gvedit::providers::{FlowEstimator, ToyEmbedder, ToyFlow};
use gvedit::video_model::FrameSequence;
use ndarray::Array4;

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn clip(n: usize, size: usize) -> FrameSequence {
    let data = Array4::from_shape_fn((n, size, size, 3), |(i, y, x, c)| {
        let moving = (x + 2 * i) % size;
        (((moving * 7 + y * 3 + c * 11) % 17) as f64 / 16.0).clamp(0.0, 1.0)
    });
    FrameSequence::new(data, None).unwrap()
}

fn flow(c: &mut Criterion) {
    let frames = clip(8, 32);
    let mut group = c.benchmark_group("flow_block_matching");
    for exec in MODES {
        let est = ToyFlow { execution: exec, ..ToyFlow::default() };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &frames, |b, f| {
            b.iter(|| black_box(est.estimate(f).unwrap()))
        });
    }
    group.finish();
}

fn inversion(c: &mut Criterion) {
    let frames = clip(4, 16);
    let mut group = c.benchmark_group("inversion_and_null_opt");
    group.sample_size(10);
    for exec in MODES {
        let mut cfg = PipelineConfig::default();
        cfg.diffusion.num_inference_steps = 10;
        cfg.execution = exec;
        let pipeline = Pipeline::new(cfg).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &frames, |b, f| {
            b.iter(|| black_box(pipeline.invert(f, "a red car").unwrap()))
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let frames = clip(16, 64);
    let embedder = ToyEmbedder::new(42);
    let mut group = c.benchmark_group("metrics");
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &frames, |b, f| {
            b.iter(|| {
                let embs = embed_frames(exec, f, &embedder).unwrap();
                black_box(mean_pairwise_cosine(exec, &embs).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, flow, inversion, metrics);
criterion_main!(benches);
