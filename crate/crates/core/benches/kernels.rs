//! Single-threaded versus pooled execution of the hot paths.
//!
//! A pool of one thread takes the sequential code path, the same one a
//! build without the `parallel` feature uses.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mvdec::autodiff::Graph;
use mvdec::eval::{beam_search_many, BeamConfig};
use mvdec::model::{DecodeHooks, Dropout, Integration, ModelConfig, Seq2Seq, Strategy};
use mvdec::par;
use mvdec::rng::{seeded, Stream};
use mvdec::tasks::{batchify, generate, BatchOptions, TaskKind, TaskSpec};
use mvdec::{Precision, Tensor};

fn thread_counts() -> Vec<usize> {
    let many = std::thread::available_parallelism().map_or(1, |n| n.get());
    if many > 1 {
        vec![1, many]
    } else {
        vec![1]
    }
}

fn batched_matmul(c: &mut Criterion) {
    let mut rng = seeded(0, Stream::Probe);
    let a = Tensor::<f32>::normal(&[32, 64, 64], 1.0, &mut rng);
    let b = Tensor::<f32>::normal(&[32, 64, 64], 1.0, &mut rng);
    let mut group = c.benchmark_group("batched_matmul_32x64x64");
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{t}_threads")), &t, |bench, &t| {
            par::with_threads(t, || {
                bench.iter(|| {
                    let mut g = Graph::new();
                    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                    black_box(g.matmul_t(x, y, false, true).unwrap());
                })
            })
        });
    }
    group.finish();
}

fn model() -> Seq2Seq<f32> {
    let cfg = ModelConfig {
        num_layers: 2,
        d_model: 64,
        num_heads: 4,
        d_ff: 256,
        src_vocab: 16,
        tgt_vocab: 16,
        max_len: 32,
        strategy: Strategy::Gca,
        integration: Integration::Soft,
        dropout: 0.1,
        precision: Precision::F32,
    };
    Seq2Seq::init(cfg, 1).unwrap()
}

fn train_step(c: &mut Criterion) {
    let m = model();
    let pairs = generate(&TaskSpec {
        kind: TaskKind::Reverse,
        vocab_size: 16,
        min_len: 10,
        max_len: 20,
        seed: 3,
        samples: 32,
    })
    .unwrap();
    let batch = batchify(
        &pairs,
        &BatchOptions {
            batch_size: 32,
            max_tokens: None,
            max_len: 32,
            seed: 0,
        },
    )
    .unwrap()
    .remove(0);
    let mut group = c.benchmark_group("forward_backward_b32_d64");
    group.sample_size(20);
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{t}_threads")), &t, |bench, &t| {
            par::with_threads(t, || {
                let mut rng = seeded(1, Stream::Dropout);
                bench.iter(|| {
                    let mut g = Graph::new();
                    let p = m.bind(&mut g, true);
                    let mut drop = Dropout::new(0.1, &mut rng);
                    let fp = m.loss(&mut g, &p, &batch, &mut drop, &DecodeHooks::default(), 0.1).unwrap();
                    g.backward(fp.loss).unwrap();
                    black_box(p.grads(&g));
                })
            })
        });
    }
    group.finish();
}

fn beam_decoding(c: &mut Criterion) {
    let m = model();
    let srcs: Vec<Vec<usize>> = (0..16).map(|i| (0..12).map(|k| 3 + (i * 5 + k * 3) % 13).collect()).collect();
    let cfg = BeamConfig {
        beam_size: 4,
        length_penalty: 0.6,
        max_len: 16,
    };
    let mut group = c.benchmark_group("beam4_16_sentences");
    group.sample_size(10);
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{t}_threads")), &t, |bench, &t| {
            par::with_threads(t, || bench.iter(|| black_box(beam_search_many(&m, &srcs, &cfg).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, batched_matmul, train_step, beam_decoding);
criterion_main!(benches);
