use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use projnet_bench::{random_mask, random_tensor};
use projnet_core::metrics::{hd95, wilcoxon_signed_rank};
use projnet_core::tensor::{ConvGeometry, Padding};
use projnet_core::Tape;
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3x3");
    for &(ch, n) in &[(8usize, 16usize), (16, 16), (8, 32)] {
        let x = random_tensor(&[2, ch, n, n, n], 1);
        let w = random_tensor(&[ch, ch, 3, 3, 3], 2);
        let geom = ConvGeometry::new(vec![3; 3], vec![1; 3], Padding::Same);
        let id = format!("c{ch}_n{n}");
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| {
                let mut tape = Tape::<f32>::new();
                let (xv, wv) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false));
                black_box(tape.conv(xv, wv, None, &geom).unwrap());
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| {
                let mut tape = Tape::<f32>::new();
                let (xv, wv) = (tape.leaf(x.clone(), true), tape.leaf(w.clone(), true));
                let y = tape.conv(xv, wv, None, &geom).unwrap();
                let s = tape.sum(y).unwrap();
                tape.backward(s).unwrap();
                black_box(tape.grad(wv).is_some());
            })
        });
    }
    group.finish();
}

fn pooling_and_norm(c: &mut Criterion) {
    let x = random_tensor(&[4, 8, 16, 16, 16], 3);
    let ones = random_tensor(&[8], 4).map(|_| 1.0);
    let zeros = ones.map(|_| 0.0);
    c.bench_function("avg_pool 1x1x4", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.leaf(x.clone(), false);
            black_box(tape.avg_pool(xv, &[1, 1, 4]).unwrap());
        })
    });
    c.bench_function("instance_norm forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.leaf(x.clone(), true);
            let (g, be) = (tape.leaf(ones.clone(), true), tape.leaf(zeros.clone(), true));
            let y = tape.instance_norm(xv, g, be, 1e-5).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap();
        })
    });
}

fn metrics(c: &mut Criterion) {
    let (a, b) = (random_mask(128, 128, 0.3, 5), random_mask(128, 128, 0.3, 6));
    c.bench_function("hd95 128x128", |bch| bch.iter(|| black_box(hd95(&a, &b, [0.1, 0.05]).unwrap())));
    let x: Vec<f64> = (0..20).map(|i| (i * 7 % 13) as f64).collect();
    let y: Vec<f64> = (0..20).map(|i| (i * 5 % 11) as f64 + 0.5).collect();
    c.bench_function("wilcoxon exact n=20", |bch| bch.iter(|| black_box(wilcoxon_signed_rank(&x, &y).unwrap())));
}

criterion_group!(benches, conv, pooling_and_norm, metrics);
criterion_main!(benches);
