use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use e2p_core::eval::{rouge, RougeVariant};
use e2p_core::{ByteTokenizer, Graph, LanguageModel, LmConfig, Projection, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16usize, 64, 256] {
        let a = Tensor::matrix(n, n, (0..n * n).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
        let b = Tensor::matrix(n, n, (0..n * n).map(|i| (i % 5) as f64 * 0.2).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.input(a.clone());
                let y = g.input(b.clone());
                let z = g.matmul(x, y).unwrap();
                black_box(g.value(z)[0]);
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let lm = LanguageModel::new(LmConfig::default()).unwrap().freeze();
    let tokens = ByteTokenizer.encode("<|user|>\nplay something\n<|eot_id|>\n<|model|>\nabcdabcd");
    c.bench_function("lm_forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let b = lm.bind(&mut g);
            let h0 = lm.input_rows(&mut g, &b, &tokens).unwrap();
            let out = lm.forward(&mut g, &b, h0, true).unwrap();
            black_box(g.value(out)[0]);
        })
    });
}

fn project(c: &mut Criterion) {
    let phi = Projection::new(16, 64, 64, 7).unwrap();
    let user: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
    c.bench_function("projection", |bench| bench.iter(|| black_box(phi.project(&user).unwrap())));
}

fn rouge_scores(c: &mut Criterion) {
    let cand = "the quick brown fox jumps over the lazy dog ".repeat(8);
    let refr = "a quick brown dog jumps over the lazy fox ".repeat(8);
    let mut group = c.benchmark_group("rouge");
    for v in RougeVariant::ALL {
        group.bench_function(v.to_string(), |bench| bench.iter(|| black_box(rouge(&cand, &refr, v))));
    }
    group.finish();
}

criterion_group!(benches, matmul, forward, project, rouge_scores);
criterion_main!(benches);
