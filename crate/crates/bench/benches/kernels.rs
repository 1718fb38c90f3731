use attnlipkit::graph::train;
use attnlipkit::{attention, calibrate_graph, softmax_rows, LipNormKind, Normalization, ScoreFunction, TrainConfig};
use attnlipkit_bench::{citation, gat, random_matrix, score_sets};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn dense(c: &mut Criterion) {
    let mut g = c.benchmark_group("dense");
    for n in [64, 256] {
        let (a, b) = (random_matrix(n, n, 0), random_matrix(n, n, 1));
        g.bench_with_input(BenchmarkId::new("matmul", n), &n, |bench, _| bench.iter(|| a.matmul(black_box(&b)).unwrap()));
        g.bench_with_input(BenchmarkId::new("softmax_rows", n), &n, |bench, _| bench.iter(|| softmax_rows(black_box(&a))));
    }
    let x = random_matrix(16, 128, 2);
    let q = random_matrix(16, 32, 3);
    for (name, f) in [
        ("attention_plain", ScoreFunction::Linear(q.clone())),
        ("attention_lipnorm", ScoreFunction::Linear(q.clone()).normalized(LipNormKind::Linear { alpha: 1.0 })),
    ] {
        g.bench_function(name, |bench| bench.iter(|| attention(black_box(&x), &f).unwrap()));
    }
    g.finish();
}

fn gat_training(c: &mut Criterion) {
    let graph = citation();
    let mut g = c.benchmark_group("gat");
    g.sample_size(20);
    for (label, norm) in [("none", Normalization::None), ("lip", Normalization::Lipschitz)] {
        let model = gat(&graph, 10, norm);
        g.bench_function(format!("forward_10_layers_{label}"), |bench| bench.iter(|| model.logits(black_box(&graph)).unwrap()));
        g.bench_function(format!("epoch_10_layers_{label}"), |bench| {
            bench.iter_batched(
                || model.clone(),
                |mut m| train(&mut m, &graph, &TrainConfig { epochs: 1, ..Default::default() }).unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn calibration(c: &mut Criterion) {
    let sets = score_sets(300, 12);
    c.bench_function("calibrate_300_nodes", |bench| bench.iter(|| calibrate_graph(black_box(&sets), 0.5).unwrap()));
}

criterion_group!(benches, dense, gat_training, calibration);
criterion_main!(benches);
