use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dca_core::eval::pairwise_distances_with;
use dca_core::par::{map_range, Execution};
use dca_core::tensor::{matmul_with, Tensor};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

const PATHS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    // one metric-net layer on a 64-sample episode, and a wider batch
    for (n, k, m) in [(64, 1024, 512), (256, 512, 256)] {
        let a = random(&mut rng, n, k);
        let b = random(&mut rng, k, m);
        for (name, exec) in PATHS {
            group.bench_with_input(BenchmarkId::new(name, format!("{n}x{k}x{m}")), &exec, |bench, &exec| {
                bench.iter(|| matmul_with(exec, &a, &b).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_distances(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("pairwise_distances");
    for (nq, ng) in [(300, 100), (1000, 1000)] {
        let q = random(&mut rng, nq, 128);
        let g = random(&mut rng, ng, 128);
        for (name, exec) in PATHS {
            group.bench_with_input(BenchmarkId::new(name, format!("{nq}x{ng}")), &exec, |bench, &exec| {
                bench.iter(|| pairwise_distances_with(exec, &q, &g).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (nq, ng) = (1000, 1000);
    let dist = random(&mut rng, nq, ng);
    let mut group = c.benchmark_group("rank_rows");
    for (name, exec) in PATHS {
        group.bench_function(name, |bench| {
            bench.iter(|| {
                map_range(exec, nq, |q| {
                    let row = dist.row(q);
                    let mut order: Vec<usize> = (0..ng).collect();
                    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
                    order[0]
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_distances, bench_ranking);
criterion_main!(benches);
