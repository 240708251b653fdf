//! Parallel vs sequential execution of the hot kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srsqueeze::model::{ModelConfig, SRModel};
use srsqueeze::train::gradients;
use srsqueeze::{exec, Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[8, 16, 48, 48]);
    let w = random(&mut rng, &[16, 16, 3, 3]);
    let b = random(&mut rng, &[16]);
    let mut group = c.benchmark_group("conv2d_16x16_48px_b8");
    for (name, par) in modes() {
        group.bench_function(BenchmarkId::new("forward_backward", name), |bench| {
            exec::set_parallel(par);
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, wv, bv) = (
                    g.leaf(x.clone(), true),
                    g.param(w.clone()),
                    g.param(b.clone()),
                );
                let y = g.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
                let l = g.mean(y);
                g.backward(l).unwrap();
                g.grad(wv).unwrap().len()
            });
        });
    }
    group.finish();
    exec::set_parallel(true);
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = SRModel::build(ModelConfig::new(16, 2, 2, 2), 0).unwrap();
    let x = Tensor::from_fn(&[8, 3, 24, 24], |_| rng.random_range(0.0..1.0));
    let mut group = c.benchmark_group("model_16_2_2_b8");
    group.sample_size(20);
    for (name, par) in modes() {
        group.bench_function(BenchmarkId::new("predict", name), |bench| {
            exec::set_parallel(par);
            bench.iter(|| m.predict(&x).unwrap());
        });
        group.bench_function(BenchmarkId::new("gradients", name), |bench| {
            exec::set_parallel(par);
            bench.iter(|| {
                gradients(&m, &x, |g, out, _| Ok((g.mean(out), ())))
                    .unwrap()
                    .loss
            });
        });
    }
    group.finish();
    exec::set_parallel(true);
}

criterion_group!(benches, conv, model);
criterion_main!(benches);
