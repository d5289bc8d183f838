use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use num_bigint::BigUint;

use nullmark_core::editor::{build_projector, closed_form_update, sample_noise_matrix};
use nullmark_core::*;

fn codec(c: &mut Criterion) {
    let params = capacity(89, 5).unwrap();
    let chunk = BigUint::from(0xDEAD_BEEFu32);
    let answer = encode(&chunk, 123_456, &params).unwrap();
    c.bench_function("encode 89/5", |b| b.iter(|| encode(&chunk, 123_456, &params).unwrap()));
    c.bench_function("decode 89/5", |b| b.iter(|| decode(answer.values(), 123_456, &params).unwrap()));
}

fn editor(c: &mut Criterion) {
    let model = init_model(&ModelConfig::default()).unwrap();
    c.bench_function("projector", |b| b.iter(|| build_projector(model.k0(), 1e-8).unwrap()));

    let proj = build_projector(model.k0(), 1e-8).unwrap();
    let prompts: Vec<String> = (0..4).map(|i| format!("For the inequality {i}<x<{}, 5 random integer solutions are x=", i + 90)).collect();
    let k1 = model.keys(&prompts);
    let v1 = model.w() * &k1 * 1.1;
    let eps = sample_noise_matrix(&k1, 0.1, 1, 1);
    c.bench_function("closed form u=4", |b| b.iter(|| closed_form_update(model.w(), &k1, &v1, &proj, None).unwrap()));
    c.bench_function("closed form u=4 noisy", |b| {
        b.iter(|| closed_form_update(model.w(), &k1, &v1, &proj, Some(&eps)).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let model = init_model(&ModelConfig::default()).unwrap();
    let params = capacity(89, 5).unwrap();
    let templates = builtin_templates();
    let bits = random_watermark(1, 128);
    let config = EditConfig::default();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("embed 128 bits", |b| {
        b.iter_batched(
            || model.clone(),
            |m| embed_watermark(&m, SeedKey(1), &bits, &params, &templates, &config).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let marked = embed_watermark(&model, SeedKey(1), &bits, &params, &templates, &config).unwrap();
    group.bench_function("extract 128 bits", |b| {
        b.iter(|| extract(&marked.model, SeedKey(1), &params, 128, &templates, Some(&bits)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, codec, editor, pipeline);
criterion_main!(benches);
