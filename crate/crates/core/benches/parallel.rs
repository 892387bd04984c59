//! Sequential (one-thread pool) against the default rayon pool for the
//! data-parallel hot paths: set-aggregator inference, block encoding and
//! k-means restarts.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbbv_core::aggregator::{Aggregator, AggregatorConfig, WeightedSet};
use sbbv_core::asmnorm::{SemanticTable, Vocabulary};
use sbbv_core::blockstore::BlockId;
use sbbv_core::encoder::{BcsdCorpus, Encoder, EncoderConfig};
use sbbv_core::phases::{kmeans_fit, FeatureKind, KMeansConfig};
use sbbv_core::tensor::Matrix;
use std::hint::black_box;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn random_sets(n: usize, size: usize, bbe: usize, rng: &mut ChaCha8Rng) -> Vec<WeightedSet> {
    (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..size).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            let mut data = Vec::with_capacity(size * (bbe + 1));
            for wi in &w {
                let wi = wi / total;
                data.extend((0..bbe).map(|_| wi * rng.gen_range(-1.0..1.0)));
                data.push(wi);
            }
            WeightedSet { elements: Matrix::from_vec(size, bbe + 1, data), blocks: (0..size as u64).map(BlockId).collect() }
        })
        .collect()
}

fn bench_aggregator(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let agg = Aggregator::new(AggregatorConfig::default(), 1).unwrap();
    let sets = random_sets(32, 64, agg.config.bbe_size, &mut rng);
    let mut g = c.benchmark_group("aggregator_infer_32x64");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| black_box(agg.infer_many(&sets).unwrap()))));
    }
    g.finish();
}

fn bench_encoder(c: &mut Criterion) {
    let corpus = BcsdCorpus::generate(32, 2, 3);
    let table = SemanticTable::builtin();
    let vocab = Vocabulary::build(corpus.normalized().iter(), table);
    let seqs: Vec<_> = corpus.encode(&vocab, table).into_iter().map(|g| g[0].clone()).collect();
    let enc = Encoder::for_vocab(EncoderConfig::default(), &vocab, 3).unwrap();
    let mut g = c.benchmark_group("encoder_encode_32");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| black_box(enc.encode_many(&seqs).unwrap()))));
    }
    g.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let points = Matrix::from_vec(400, 64, (0..400 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let cfg = KMeansConfig::new(8, 5);
    let mut g = c.benchmark_group("kmeans_400x64_k8");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| black_box(kmeans_fit(&points, &cfg, FeatureKind::Semantic).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_aggregator, bench_encoder, bench_kmeans);
criterion_main!(benches);
