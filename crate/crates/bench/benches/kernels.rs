use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unlearn_lens::diagnostics::{fisher_diagonal, linear_cka, FisherLabels};
use unlearn_lens::linalg::{sym_top_eigs, Matrix};
use unlearn_lens::model::{Batch, ModelConfig, TinyLM};

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn batch(n_seqs: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<u32>> = (0..n_seqs)
        .map(|_| (0..16).map(|_| rng.gen_range(0..64)).collect())
        .collect();
    Batch::from_sequences(&seqs, 8).unwrap()
}

fn cka(c: &mut Criterion) {
    let mut g = c.benchmark_group("linear_cka");
    for n in [64, 256] {
        let x = random(n, 64, 1);
        let y = random(n, 64, 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| linear_cka(black_box(&x), black_box(&y)).unwrap())
        });
    }
    g.finish();
}

fn eigs(c: &mut Criterion) {
    let mut g = c.benchmark_group("sym_top_eigs");
    for d in [16, 64] {
        let x = random(256, d, 3);
        let s = x.matmul_tn(&x).unwrap().scaled(1.0 / 255.0);
        g.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| sym_top_eigs(black_box(&s), 2, 1e-10, 100_000).unwrap())
        });
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let m = TinyLM::new(ModelConfig::default(), 0).unwrap();
    let b32 = batch(32, 4);
    c.bench_function("forward_32seq", |b| b.iter(|| m.forward(black_box(&b32), false).unwrap()));
    c.bench_function("forward_backward_32seq", |b| {
        b.iter(|| m.loss_and_grads(black_box(&b32)).unwrap())
    });
    let probe = batch(16, 5);
    c.bench_function("fisher_diagonal_16seq", |b| {
        b.iter(|| fisher_diagonal(&m, black_box(&probe), FisherLabels::Empirical).unwrap())
    });
}

criterion_group!(benches, cka, eigs, model);
criterion_main!(benches);
