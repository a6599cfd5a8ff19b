use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{code_range, gemm_int, PackedMatrix, Scale};
use crate::error::{Error, Result};
use crate::parallel;

pub const WARMUP_REPS: usize = 5;
pub const MIN_REPS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub bits: u8,
    pub reps: usize,
    pub threads: usize,
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    pub fp32_median_ns: u64,
    pub fp32_p10_ns: u64,
    pub fp32_p90_ns: u64,
    /// `fp32_median_ns / median_ns`
    pub speedup: f64,
    /// Packed bytes of the `[k × n]` weight operand.
    pub packed_weight_bytes: usize,
    pub fp32_weight_bytes: usize,
    /// Packed inputs plus the `i32` output.
    pub bytes_moved: usize,
}

/// Plain `i-k-j` single-precision GEMM used as the float baseline.
pub fn naive_gemm_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            for (c, &b) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *c += a_ip * b;
            }
        }
    }
    c
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], q: f64) -> u64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn time(reps: usize, mut f: impl FnMut()) -> Vec<u64> {
    for _ in 0..WARMUP_REPS {
        f();
    }
    let mut t: Vec<u64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as u64
        })
        .collect();
    t.sort_unstable();
    t
}

/// Times the packed integer GEMM against [`naive_gemm_f32`] on the same
/// shapes and values. `seed` draws the operand codes.
pub fn bench(m: usize, n: usize, k: usize, bits: u8, reps: usize, seed: u64) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!("reps must be at least {MIN_REPS}, got {reps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = code_range(bits);
    let av: Vec<i32> = (0..m * k).map(|_| rng.random_range(lo..=hi)).collect();
    let bv: Vec<i32> = (0..k * n).map(|_| rng.random_range(lo..=hi)).collect();
    let a = PackedMatrix::pack(&av, m, k, bits, Scale::Tensor(1.0))?;
    let b = PackedMatrix::pack(&bv, k, n, bits, Scale::Tensor(1.0))?;
    let af: Vec<f32> = av.iter().map(|&v| v as f32).collect();
    let bf: Vec<f32> = bv.iter().map(|&v| v as f32).collect();

    let mut err = None;
    let int_t = time(reps, || {
        if let Err(e) = gemm_int(black_box(&a), black_box(&b)).map(black_box) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let fp_t = time(reps, || {
        black_box(naive_gemm_f32(black_box(&af), black_box(&bf), m, k, n));
    });

    let median = percentile(&int_t, 0.5);
    let fp_median = percentile(&fp_t, 0.5);
    Ok(BenchReport {
        m,
        n,
        k,
        bits,
        reps,
        threads: parallel::threads(),
        median_ns: median,
        p10_ns: percentile(&int_t, 0.1),
        p90_ns: percentile(&int_t, 0.9),
        fp32_median_ns: fp_median,
        fp32_p10_ns: percentile(&fp_t, 0.1),
        fp32_p90_ns: percentile(&fp_t, 0.9),
        speedup: fp_median as f64 / median.max(1) as f64,
        packed_weight_bytes: b.packed_bytes(),
        fp32_weight_bytes: b.fp32_bytes(),
        bytes_moved: a.packed_bytes() + b.packed_bytes() + 4 * m * n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_report_is_consistent() {
        let r = bench(16, 24, 40, 4, 30, 7).unwrap();
        assert!(r.p10_ns <= r.median_ns && r.median_ns <= r.p90_ns);
        assert!(r.fp32_p10_ns <= r.fp32_median_ns && r.fp32_median_ns <= r.fp32_p90_ns);
        assert_eq!(r.packed_weight_bytes * 8, r.fp32_weight_bytes);
        assert_eq!(r.bytes_moved, 16 * 40 / 2 + 40 * 24 / 2 + 4 * 16 * 24);
        assert!(bench(4, 4, 4, 8, 29, 7).is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<u64> = (1..=10).collect();
        assert_eq!(percentile(&v, 0.5), 5);
        assert_eq!(percentile(&v, 0.9), 9);
        assert_eq!(percentile(&v, 0.1), 1);
    }

    #[test]
    fn naive_float_hand_case() {
        assert_eq!(
            naive_gemm_f32(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2),
            vec![19.0, 22.0, 43.0, 50.0]
        );
    }
}
