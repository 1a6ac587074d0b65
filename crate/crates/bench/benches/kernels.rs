use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use imgst_core::corpus::{build_dataset, DatasetConfig, EOS};
use imgst_core::decode::{decode, random_table_lm, DecodeConfig};
use imgst_core::metrics::{corpus_bleu, EvalPair, Smoothing};
use imgst_core::model::{build_model, Example, ModelConfig, ParamGroup};
use imgst_core::numerics::{Graph, Segment, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [16, 64, 128] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.leaf_with(&a, true), g.leaf_with(&b, true));
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap();
                black_box(g.grad(x).unwrap()[0])
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (batch, len, d) = (8, 24, 64);
    let q = Tensor::randn(&[batch * len, d], 1.0, &mut rng);
    let segments: Vec<Segment> = (0..batch).map(|i| Segment::square(i * len, len)).collect();
    c.bench_function("causal_attention_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf_with(&q, true);
            let y = g.attention(x, x, x, 4, &segments, true).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(x).unwrap()[0])
        })
    });
}

fn bleu(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sentence = |len: usize| -> Vec<u32> { (0..len).map(|_| rng.random_range(0..40)).collect() };
    let pairs: Vec<EvalPair<u32>> = (0..1000)
        .map(|_| EvalPair::new(sentence(12), (0..5).map(|_| sentence(12)).collect()).unwrap())
        .collect();
    c.bench_function("corpus_bleu_1000x5", |bench| {
        bench.iter(|| black_box(corpus_bleu(&pairs, Smoothing::None).unwrap().score))
    });
}

fn beam(c: &mut Criterion) {
    let lm = random_table_lm(60, EOS, 3, 4.0);
    let mut group = c.benchmark_group("decode");
    for (name, config) in [
        ("greedy", DecodeConfig::greedy(20)),
        ("beam5", DecodeConfig::beam(5, 20)),
        ("diverse5x5", DecodeConfig::diverse(5, 5, 1.0, 20)),
    ] {
        group.bench_function(name, |bench| bench.iter(|| black_box(decode(&lm, &config).unwrap().len())));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let data = build_dataset(&DatasetConfig {
        n_train: 16,
        n_dev: 2,
        n_test: 2,
        ..DatasetConfig::default()
    })
    .unwrap();
    let config = ModelConfig {
        vocab_size: data.world.vocab.len(),
        d_audio: data.config.d_audio,
        ..ModelConfig::default()
    };
    let model = build_model(&config, 0).unwrap();
    let encoded: Vec<Tensor> = data
        .train
        .iter()
        .map(|it| model.encode(&it.utterances[0].audio.frames).unwrap())
        .collect();
    let examples: Vec<Example> = encoded
        .iter()
        .zip(&data.train)
        .map(|(e, it)| Example {
            encoded: e,
            target: &it.references[0],
        })
        .collect();
    c.bench_function("adapter_loss_and_gradient_batch16", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (loss, tracked) = model.loss_graph(&mut g, &examples, Some(ParamGroup::Adapter), Some(1)).unwrap();
            g.backward(loss).unwrap();
            black_box(tracked.len())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, attention, bleu, beam, train_step
}
criterion_main!(benches);
