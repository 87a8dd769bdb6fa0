// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use geopatch_core::corpus::{distance_phrases, PromptPair};
use geopatch_core::model::{HookId, PatchSpec};
use geopatch_core::numerics::{matmul, Tensor2};
use geopatch_core::patching::{cache_reuse_plan, sliding_windows, PatchContext};
use geopatch_core::toy::{reference_vocab, toy_model};

fn ramp(rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols).map(|i| ((i % 17) as f32 - 8.0) * 0.01).collect();
    Tensor2::new(rows, cols, data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let a = ramp(16, 64);
    let b = ramp(64, 256);
    c.bench_function("matmul 16x64x256", |bench| bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
}

fn bench_forward(c: &mut Criterion) {
    let model = toy_model(4, 32, 0);
    let tokens: Vec<u32> = (0..16).map(|i| i * 3 % 50).collect();
    let capture: HashSet<HookId> = (0..4).map(HookId::mlp_out).collect();
    c.bench_function("forward toy 4x32, 16 tokens", |bench| {
        bench.iter(|| model.forward(black_box(&tokens), &HashSet::new(), &PatchSpec::new()).unwrap())
    });
    c.bench_function("forward toy 4x32, 16 tokens, capture mlp_out", |bench| {
        bench.iter(|| model.forward(black_box(&tokens), &capture, &PatchSpec::new()).unwrap())
    });
}

fn bench_plan(c: &mut Criterion) {
    let model = toy_model(4, 32, 0);
    let pair = PromptPair::new("Bristol", &distance_phrases()[12], &reference_vocab()).unwrap();
    let windows = sliding_windows(4, 2).unwrap();
    let offsets: Vec<usize> = (0..pair.report_width()).collect();
    let plan = cache_reuse_plan(&windows, &offsets).unwrap();
    let ctx = PatchContext::new(&model);
    c.bench_function("execute plan, one pair, 5 offsets x 3 windows", |bench| {
        bench.iter(|| ctx.execute(black_box(&pair), &plan).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_forward, bench_plan);
criterion_main!(benches);
