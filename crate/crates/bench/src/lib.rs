//! Seeded inputs shared by the benchmarks.

use ilq_core::envs::EnvKind;
use ilq_core::kernels::{code_range, PackedMatrix, Scale};
use ilq_core::policy::GaussianPolicy;
use ilq_core::quant::{Method, QuantSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random in-range codes packed at `bits`.
pub fn packed(rows: usize, cols: usize, bits: u8, seed: u64) -> PackedMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = code_range(bits);
    let codes: Vec<i32> = (0..rows * cols).map(|_| rng.random_range(lo..=hi)).collect();
    PackedMatrix::pack(&codes, rows, cols, bits, Scale::Tensor(1.0)).expect("codes in range")
}

pub fn floats(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Reset observations of `n` seeded episodes.
pub fn observations(kind: EnvKind, n: usize) -> Vec<f32> {
    let mut env = kind.make();
    (0..n as u64)
        .flat_map(|s| env.reset(&mut ChaCha8Rng::seed_from_u64(s)))
        .collect()
}

/// A `[obs, h, h, act]` policy, fake-quantized at `bits` when given.
pub fn policy(kind: EnvKind, hidden: usize, bits: Option<u8>) -> GaussianPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p =
        GaussianPolicy::new(&[kind.obs_dim(), hidden, hidden, kind.action_dim()], -0.5, &mut rng).expect("valid dims");
    if let Some(b) = bits {
        let calib = observations(kind, 16);
        p.attach_quantizers(
            QuantSpec::weights(b, Method::Lsq),
            QuantSpec::activations(b, true, Method::Lsq),
            &calib,
        )
        .expect("calibration batch");
    }
    p
}
