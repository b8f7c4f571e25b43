use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use distill_core::data::{generate, Layout};
use distill_core::nn::{preset, Activation};
use distill_core::optim::AdamW;
use distill_core::objectives::{total_loss, DistillConfig};
use distill_core::{GenSpec, Model, Split, Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = Tensor::new(vec![n, n], (0..n * n).map(|i| (i % 7) as f64 - 3.0).collect()).unwrap();
        let b = Tensor::new(vec![n, n], (0..n * n).map(|i| (i % 5) as f64 - 2.0).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bencher, _| {
            bencher.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant(&a);
                let y = tape.constant(&b);
                black_box(tape.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn data() -> distill_core::Dataset {
    generate(&GenSpec {
        num_classes: 10,
        samples_per_class: 64,
        long_tail_exponent: 0.0,
        layout: Layout::Image,
        size: 12,
        modes_per_class: 3,
        subclass_spread: 0.3,
        noise: 0.3,
        class_separation: 1.0,
        label_noise: 0.0,
        val_fraction: 0.1,
        test_fraction: 0.1,
        seed: 7,
        sample_seed: None,
    })
    .unwrap()
}

fn train_step(c: &mut Criterion) {
    let ds = data();
    let (x, y) = ds.batches(Split::Train, 64, Some(1), 0).unwrap().next().unwrap();
    let flat = Tensor::new(vec![x.shape()[0], 144], x.data().to_vec()).unwrap();
    let mut group = c.benchmark_group("train_step");
    for (name, input) in [("mlp-s", &flat), ("conv-t", &x), ("teacher-l", &flat)] {
        let spec = preset(name, &input.shape()[1..], 10, Activation::Relu).unwrap();
        let mut model = Model::init_truncated_normal(&spec, 0.02, 0).unwrap();
        let teacher = model.forward(input).unwrap();
        let mut opt = AdamW::new(1e-4);
        let cfg = DistillConfig::default();
        group.bench_function(name, |bencher| {
            bencher.iter(|| {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let xv = tape.constant(input);
                let logits = model.forward_on(&mut tape, &bound, xv).unwrap();
                let loss = total_loss(&mut tape, logits, Some(&teacher), &y, &cfg).unwrap();
                let grads = tape.backward(loss).unwrap();
                model.zero_grad();
                model.accumulate_grads(&grads, &bound).unwrap();
                opt.step(model.params_mut(), 1e-4).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, train_step);
criterion_main!(benches);
