use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use voxsel_bench::{committee, corpus};
use voxsel_core::{dbscan, edit_counts, score_committee, wer, ClusterParams, Metric, NormalizeConfig};

fn bench_wer(c: &mut Criterion) {
    let cfg = NormalizeConfig::default();
    let reference = "the quick brown fox jumps over the lazy dog near the river bank today";
    let hyp = "a quick brown fox jumped over lazy dogs near the river bank to day";
    c.bench_function("wer/14_words", |b| b.iter(|| wer(black_box(hyp), black_box(reference), &cfg)));
    let long_ref: Vec<u32> = (0..200).map(|i| i % 37).collect();
    let long_hyp: Vec<u32> = (0..210).map(|i| (i * 7) % 37).collect();
    c.bench_function("edit_counts/200_tokens", |b| {
        b.iter(|| edit_counts(black_box(&long_hyp), black_box(&long_ref)))
    });
}

fn bench_dbscan(c: &mut Criterion) {
    let mut group = c.benchmark_group("dbscan");
    group.sample_size(10);
    for n in [250usize, 1000, 2000] {
        let data = corpus(vec![n / 4; 4], 32);
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let params = ClusterParams {
                eps: if metric == Metric::Euclidean { 8.0 } else { 0.1 },
                min_points: 5,
                metric,
            };
            group.bench_with_input(BenchmarkId::new(format!("{metric:?}"), n), &data.embeddings, |b, e| {
                b.iter(|| dbscan(e, &params).expect("valid params"))
            });
        }
    }
    group.finish();
}

fn bench_committee(c: &mut Criterion) {
    let cfg = NormalizeConfig::default();
    let data = corpus(vec![250; 4], 8);
    let artifacts = committee(&data, 20);
    let mut group = c.benchmark_group("score_committee/1000x20");
    group.sample_size(10);
    for workers in [1usize, 4] {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            b.iter(|| score_committee(artifacts.iter(), &cfg, w).expect("scoring succeeds"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_wer, bench_dbscan, bench_committee);
criterion_main!(benches);
