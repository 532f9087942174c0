use criterion::{criterion_group, criterion_main, Criterion};
use projnet_bench::{network, random_tensor};
use projnet_core::netbuild::{forward_pass, ForwardOptions};
use projnet_core::train::{dice_loss, DICE_EPS};
use projnet_core::Variant;
use std::hint::black_box;

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("network 16^3 batch 4");
    group.sample_size(20);
    for variant in [Variant::Proposed, Variant::ThreeDTwoD] {
        let (graph, params) = network(variant, 8, &[16, 16, 16]);
        let x = random_tensor(&[4, 1, 16, 16, 16], 1);
        let y = random_tensor(&[4, 16, 16], 2).map(|v| (v > 0.0) as u8 as f32);
        group.bench_function(format!("{variant} forward"), |b| {
            b.iter(|| {
                let pass = forward_pass(&graph, &params, x.clone(), ForwardOptions::default(), false, false).unwrap();
                black_box(pass.output().numel());
            })
        });
        group.bench_function(format!("{variant} forward_backward"), |b| {
            b.iter(|| {
                let mut pass = forward_pass(&graph, &params, x.clone(), ForwardOptions::default(), true, false).unwrap();
                let loss = dice_loss(&mut pass.tape, pass.output, &y, DICE_EPS).unwrap();
                pass.tape.backward(loss).unwrap();
                black_box(pass.tape.grad(pass.params[0]).is_some());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, training_step);
criterion_main!(benches);
