use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ilq_bench::{floats, packed};
use ilq_core::kernels::{gemm_int, naive_gemm_f32};

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    g.sample_size(20);
    for n in [128usize, 256, 512] {
        g.throughput(Throughput::Elements((n * n * n) as u64));
        let (a, b) = (floats(n * n, 1), floats(n * n, 2));
        g.bench_with_input(BenchmarkId::new("f32-naive", n), &n, |bch, &n| {
            bch.iter(|| naive_gemm_f32(&a, &b, n, n, n))
        });
        for bits in [8u8, 4] {
            let (pa, pb) = (packed(n, n, bits, 3), packed(n, n, bits, 4));
            g.bench_with_input(BenchmarkId::new(format!("int{bits}"), n), &n, |bch, _| {
                bch.iter(|| gemm_int(&pa, &pb).expect("shapes agree"))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, gemm);
criterion_main!(benches);
