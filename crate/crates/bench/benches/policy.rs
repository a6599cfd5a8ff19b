use criterion::{criterion_group, criterion_main, Criterion};
use ilq_bench::{observations, policy};
use ilq_core::envs::EnvKind;
use ilq_core::kernels::DeployedPolicy;
use ilq_core::saliency::{saliency_map, SaliencyConfig};

fn forward(c: &mut Criterion) {
    let kind = EnvKind::GridDrive;
    let obs = observations(kind, 64);
    let fp = policy(kind, 64, None);
    let q = policy(kind, 64, Some(4));
    let deployed = DeployedPolicy::from_policy(&q).expect("quantized policy");
    let mut g = c.benchmark_group("forward-64");
    g.bench_function("fp", |b| b.iter(|| fp.mean_batch(&obs, 64).expect("shape")));
    g.bench_function("fake-quant-w4a4", |b| b.iter(|| q.mean_batch(&obs, 64).expect("shape")));
    g.bench_function("packed-w4a4", |b| b.iter(|| deployed.forward(&obs, 64).expect("shape")));
    g.finish();
}

fn saliency(c: &mut Criterion) {
    let kind = EnvKind::GridDrive;
    let obs = observations(kind, 1);
    let cfg = SaliencyConfig::default();
    let mut g = c.benchmark_group("saliency-map");
    g.sample_size(20);
    for (name, p) in [("fp", policy(kind, 64, None)), ("w4a4", policy(kind, 64, Some(4)))] {
        g.bench_function(name, |b| b.iter(|| saliency_map(&p, &obs, &cfg).expect("grid obs")));
    }
    g.finish();
}

criterion_group!(benches, forward, saliency);
criterion_main!(benches);
