use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use cdsnas::eval::{evaluate_retrieval, RetrievalIndex};
use cdsnas::model::Model;
use cdsnas::neck::NeckVariant;
use cdsnas::nn::ParamStore;
use cdsnas::search::{AlphaParams, SearchConfig, Searcher};
use cdsnas::space::{analyze, fixtures, SpaceKind};
use cdsnas::Tape;
use cdsnas_bench::{desk_batch, desk_cdnet, random_embeddings};

fn bench_depthwise_conv(c: &mut Criterion) {
    let (x, _) = random_embeddings(16 * 32, 16 * 8, 1, 1);
    let x = x.reshape(vec![16, 32, 16, 8]).unwrap();
    let (w, _) = random_embeddings(32, 9, 1, 2);
    let w = w.reshape(vec![32, 1, 3, 3]).unwrap();
    c.bench_function("depthwise_conv3x3_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.conv2d(xv, wv, 1, 1, 32).unwrap();
            let loss = tape.sum(y).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn bench_embed(c: &mut Criterion) {
    let batch = desk_batch(0);
    let d = desk_cdnet();
    let mut group = c.benchmark_group("embed_desk_cdnet");
    for variant in [NeckVariant::Bn, NeckVariant::Fbl] {
        let mut store = ParamStore::new();
        let model = Model::from_descriptor(&mut store, 0, &d, 4, variant, 2).unwrap();
        group.bench_function(BenchmarkId::from_parameter(variant), |b| {
            b.iter(|| black_box(model.embed(&store, &batch.images, 16).unwrap()))
        });
    }
    group.finish();
}

fn bench_search_step(c: &mut Criterion) {
    let batch = desk_batch(1);
    let template = desk_cdnet();
    let mut group = c.benchmark_group("search_step_topk");
    group.sample_size(10);
    for k in [1, 2, 4] {
        let mut store = ParamStore::<f32>::new();
        let model = Model::supernet(&mut store, 0, SpaceKind::Cds, &template, 4).unwrap();
        let cfg = SearchConfig {
            k,
            ..SearchConfig::default()
        };
        let mut s = Searcher::new(&model, store, AlphaParams::for_space(SpaceKind::Cds), cfg).unwrap();
        group.bench_function(BenchmarkId::from_parameter(k), |b| {
            b.iter(|| {
                s.w_step(&batch.images, &batch.labels, 0.01).unwrap();
                black_box(s.alpha_step(&batch.images, &batch.labels, 3e-4).unwrap().loss)
            })
        });
    }
    group.finish();
}

fn bench_retrieval(c: &mut Criterion) {
    let (emb, labels) = random_embeddings(768, 192, 8, 3);
    c.bench_function("retrieval_768x768", |b| {
        b.iter(|| {
            let idx = RetrievalIndex::all_vs_all(&emb, labels.clone()).unwrap();
            black_box(evaluate_retrieval(&idx).unwrap())
        })
    });
}

fn bench_analyze(c: &mut Criterion) {
    let d = fixtures::cdnet();
    c.bench_function("analyze_cdnet", |b| b.iter(|| black_box(analyze(&d))));
}

criterion_group!(
    benches,
    bench_depthwise_conv,
    bench_embed,
    bench_search_step,
    bench_retrieval,
    bench_analyze
);
criterion_main!(benches);
