use asars::autodiff::{Graph, Tensor, Var};
use asars::model::{
    gru_step, naive_prefix_attention, triangle_attention, AttentionMask, Cell, CellWeights,
};
use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let v: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    Tensor::from_f64(rows, cols, &v).unwrap()
}

/// Fresh graph holding `tensors` as leaves, in order.
fn graph_with(tensors: &[Tensor<f32>]) -> (Graph<f32>, Vec<Var>) {
    let mut g = Graph::new();
    let vars = tensors.iter().map(|t| g.leaf(t.clone())).collect();
    (g, vars)
}

fn attention(c: &mut Criterion) {
    let d = 64;
    let mut group = c.benchmark_group("prefix_attention");
    for n in [8, 32, 64] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let inputs = [
            random(&mut rng, n, d),
            random(&mut rng, n, d),
            random(&mut rng, d, d),
            random(&mut rng, 1, d),
        ];
        group.bench_with_input(BenchmarkId::new("triangle", n), &n, |b, _| {
            b.iter_batched(
                || graph_with(&inputs),
                |(mut g, v)| {
                    triangle_attention(&mut g, v[0], v[1], v[2], v[3], AttentionMask::Prefix)
                        .unwrap()
                },
                BatchSize::SmallInput,
            )
        });
        group.bench_with_input(BenchmarkId::new("naive", n), &n, |b, _| {
            b.iter_batched(
                || graph_with(&inputs),
                |(mut g, v)| naive_prefix_attention(&mut g, v[0], v[1], v[2], v[3]).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn gru(c: &mut Criterion) {
    let (batch, d_in, d_h) = (64, 64, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tensors = vec![random(&mut rng, batch, d_in), random(&mut rng, batch, d_h)];
    tensors.extend((0..3).map(|_| random(&mut rng, d_in, d_h)));
    tensors.extend((0..3).map(|_| random(&mut rng, d_h, d_h)));
    tensors.extend((0..3).map(|_| random(&mut rng, 1, d_h)));
    let setup = || {
        let (g, v) = graph_with(&tensors);
        let w = CellWeights {
            cell: Cell::Gru,
            w: v[2..5].to_vec(),
            u: v[5..8].to_vec(),
            b: v[8..11].to_vec(),
        };
        (g, v[0], v[1], w)
    };
    c.bench_function("gru_step/forward", |b| {
        b.iter_batched(
            setup,
            |(mut g, x, h, w)| gru_step(&mut g, x, h, &w).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("gru_step/forward_backward", |b| {
        b.iter_batched(
            setup,
            |(mut g, x, h, w)| {
                let out = gru_step(&mut g, x, h, &w).unwrap();
                let loss = g.sum(out);
                g.backward(loss).unwrap();
                g
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, attention, gru);
criterion_main!(benches);
