use criterion::{criterion_group, criterion_main, Criterion};
use floquet_core::colloc::CollocationSystem;
use floquet_core::sensitivity::gradient;
use floquet_core::solve::{two_stage, LeftOptions, SpectrumOptions};
use floquet_core::{CharEvalContext, Scheme, C64};
use floquet_bench::{mathieu, milling_model, scalar};
use std::hint::black_box;

fn collocation(c: &mut Criterion) {
    let (s, g) = scalar();
    c.bench_function("scalar/assemble+eig M=15", |b| {
        b.iter(|| {
            let cs = CollocationSystem::assemble(&s, &g, 15).unwrap();
            black_box(cs.eigen().unwrap())
        })
    });
    let (s, g) = mathieu();
    c.bench_function("mathieu/assemble+eig M=10", |b| {
        b.iter(|| {
            let cs = CollocationSystem::assemble(&s, &g, 10).unwrap();
            black_box(cs.eigen().unwrap())
        })
    });
}

fn characteristic(c: &mut Criterion) {
    let (s, g) = scalar();
    let ctx = CharEvalContext::new(s, g, Scheme::Rk4, 1e-3).unwrap();
    let v = vec![C64::new(1.0, 0.0); ctx.size()];
    c.bench_function("scalar/N action rk4 delta=1e-3", |b| {
        b.iter(|| black_box(ctx.n_action(C64::new(2.7, 0.1), &v).unwrap()))
    });
    let (s, g) = milling_model(10);
    let ctx = CharEvalContext::new(s, g, Scheme::Trapezoidal, 0.01).unwrap();
    let v: Vec<C64> = (0..ctx.size()).map(|i| C64::new((i as f64).sin(), 0.0)).collect();
    c.bench_function("milling n=10/N action trap delta=0.01", |b| {
        b.iter(|| black_box(ctx.n_action(C64::new(0.5, 0.7), &v).unwrap()))
    });
}

fn pipeline(c: &mut Criterion) {
    let (s, g) = scalar();
    let opts = SpectrumOptions::default();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("scalar/two_stage", |b| b.iter(|| black_box(two_stage(&s, &g, &opts).unwrap())));
    let ctx = CharEvalContext::new(s.clone(), g.clone(), opts.scheme, opts.step).unwrap();
    let pair = two_stage(&s, &g, &opts).unwrap().pairs[0].clone();
    group.bench_function("scalar/gradient", |b| {
        b.iter(|| black_box(gradient(&ctx, &pair, &LeftOptions::default()).unwrap()))
    });
    let (s, g) = mathieu();
    let opts = SpectrumOptions {
        degree: 10,
        ..Default::default()
    };
    group.bench_function("mathieu/two_stage", |b| b.iter(|| black_box(two_stage(&s, &g, &opts).unwrap())));
    group.finish();
}

criterion_group!(benches, collocation, characteristic, pipeline);
criterion_main!(benches);
