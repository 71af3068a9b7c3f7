use std::hint::black_box;

use befd_bench::{attention_maps, random_f64, random_tensor, scored};
use befd_core::denoise::nonlocal_bruteforce;
use befd_core::metrics::{auc_from_pairs, auc_pairwise};
use befd_core::ops::conv::{conv2d_forward, conv_transpose2d_forward};
use befd_core::ops::nonlocal::nonlocal_means_dot_forward;
use befd_core::{AttentionMap, Mode, Network, NetworkVariant, Tape, UNetConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for &(ch, size) in &[(16usize, 64usize), (64, 16), (256, 4)] {
        let x = random_tensor(&[8, ch, size, size], 1);
        let w = random_tensor(&[ch, ch, 3, 3], 2);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{ch}ch_{size}px")), &(), |b, _| {
            b.iter(|| conv2d_forward(black_box(&x), black_box(&w), None, 1).unwrap())
        });
    }
    g.finish();
    let x = random_tensor(&[8, 64, 16, 16], 3);
    let w = random_tensor(&[64, 32, 2, 2], 4);
    c.bench_function("conv_transpose2d_64ch_16px", |b| b.iter(|| conv_transpose2d_forward(black_box(&x), &w, None).unwrap()));
}

fn nonlocal(c: &mut Criterion) {
    let mut g = c.benchmark_group("nonlocal_means");
    for &(ch, size) in &[(16usize, 8usize), (64, 8)] {
        let x = random_f64(&[1, ch, size, size], 5);
        g.bench_with_input(BenchmarkId::new("gram", format!("{ch}ch_{size}px")), &x, |b, x| {
            b.iter(|| nonlocal_means_dot_forward(black_box(x)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("direct", format!("{ch}ch_{size}px")), &x, |b, x| {
            b.iter(|| nonlocal_bruteforce(black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let cfg = UNetConfig::with_base_channels(16);
    let mut net = Network::<f32>::build(&cfg, NetworkVariant::BefdUnet, 0).unwrap();
    let x = random_tensor(&[8, 1, 64, 64], 6);
    let maps = attention_maps(8, 64, 64, 7);
    let refs: Vec<&AttentionMap> = maps.iter().collect();
    let mut g = c.benchmark_group("befd_unet_base16_64px_batch8");
    g.sample_size(10);
    g.bench_function("inference", |b| b.iter(|| net.predict_logits(black_box(&x), Some(&refs)).unwrap()));
    g.bench_function("train_step", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let input = tape.constant(x.clone());
            let (logits, _) = net.forward(&mut tape, input, Some(&refs), Mode::Train).unwrap();
            let loss = tape.reduce_mean(logits).unwrap();
            tape.backward(loss).unwrap();
        })
    });
    g.finish();
}

fn auc(c: &mut Criterion) {
    let s = scored(64 * 64 * 10, 0.1, 8);
    c.bench_function("auc_rank_40960px", |b| b.iter(|| auc_from_pairs(black_box(s.clone()))));
    let small = scored(2048, 0.1, 9);
    c.bench_function("auc_pairwise_2048px", |b| b.iter(|| auc_pairwise(black_box(&small))));
}

criterion_group!(benches, conv, nonlocal, network, auc);
criterion_main!(benches);
