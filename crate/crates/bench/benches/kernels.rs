use ade_bench::qa_fixture;
use ade_core::neuralcore::{attention_forward, Dense2D};
use ade_core::spanqa::{decode_span, masked_softmax, qa_forward, QaModel, SpanDistribution};
use ade_core::textproc::tokenize;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Dense2D {
    let data = (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Dense2D::from_vec(rows, cols, data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let a = random(n, n, &mut rng);
        let b = random(n, n, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)))
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 32;
    let (wq, wk, wv) = (random(d, d, &mut rng), random(d, d, &mut rng), random(d, d, &mut rng));
    let mut group = c.benchmark_group("attention_forward");
    for len in [16, 48, 96] {
        let x = random(len, d, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |bench, _| {
            bench.iter(|| attention_forward(black_box(&x), &wq, &wk, &wv).unwrap())
        });
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 96;
    let mask: Vec<bool> = (0..n).map(|i| i > 12).collect();
    let logits = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
    let start = masked_softmax(&logits(&mut rng), &mask);
    let end = masked_softmax(&logits(&mut rng), &mask);
    let dist = SpanDistribution { start, end, mask };
    c.bench_function("decode_span/96", |b| b.iter(|| decode_span(black_box(&dist), 10).unwrap()));
}

fn text(c: &mut Criterion) {
    let fx = qa_fixture(64, 4);
    c.bench_function("tokenize/64 sentences", |b| {
        b.iter(|| {
            for s in &fx.sentences {
                black_box(tokenize(&s.text));
            }
        })
    });
}

fn qa(c: &mut Criterion) {
    let fx = qa_fixture(16, 5);
    let model = QaModel::init(fx.vocab.len(), 32, 5);
    c.bench_function("qa_forward/16 sequences", |b| {
        b.iter(|| {
            for q in &fx.sequences {
                black_box(qa_forward(&model, q).unwrap());
            }
        })
    });
}

criterion_group!(benches, matmul, attention, decode, text, qa);
criterion_main!(benches);
