use criterion::{criterion_group, criterion_main, Criterion};
use highmmt_bench::{avmnist_image, large_model, mosei_batch};
use highmmt_core::modality::{large_setting_registry, standardize};
use highmmt_core::model::{Mode, Trace};
use highmmt_core::training::build_schedule;
use highmmt_core::Tape;
use std::hint::black_box;

fn standardization(c: &mut Criterion) {
    let reg = large_setting_registry();
    let spec = reg.spec_by_name("avmnist.image").unwrap().clone();
    let raw = avmnist_image(32);
    c.bench_function("standardize avmnist image x32", |b| {
        b.iter(|| standardize(black_box(&raw), &spec, &reg, "avmnist").unwrap())
    });
}

fn forward_backward(c: &mut Criterion) {
    let model = large_model();
    let inputs = mosei_batch(4);
    let labels = [0, 1, 1, 0];
    c.bench_function("large forward mosei x4", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            model
                .forward_task(
                    &mut tape,
                    "mosei",
                    black_box(&inputs),
                    Mode::Eval,
                    &mut Trace::default(),
                )
                .unwrap()
        })
    });
    c.bench_function("large forward+backward mosei x4", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let logits = model
                .forward_task(
                    &mut tape,
                    "mosei",
                    &inputs,
                    Mode::Train,
                    &mut Trace::default(),
                )
                .unwrap();
            let loss = tape.cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap();
        })
    });
}

fn schedule(c: &mut Criterion) {
    let counts: Vec<(String, usize)> = (0..8).map(|i| (format!("t{i}"), 100 * (i + 1))).collect();
    c.bench_function("build_schedule 8 tasks", |b| {
        b.iter(|| build_schedule(black_box(&counts)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = standardization, forward_backward, schedule
}
criterion_main!(benches);
