use ilq_core::envs::{collect, read_jsonl, write_jsonl, EnvKind, Expert, Source};
use ilq_core::imitation::{build_qail_dataset, Dataset};
use ilq_core::policy::{decode, encode, load, save, GaussianPolicy};
use ilq_core::quant::{Method, QuantSpec};
use ilq_core::saliency::{saliency_map, SaliencyConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_policy(dims: &[usize], seed: u64, bits: Option<u8>) -> GaussianPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = GaussianPolicy::new(dims, -0.5, &mut rng).unwrap();
    if let Some(b) = bits {
        let calib: Vec<f32> = (0..8 * dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.attach_quantizers(
            QuantSpec::weights(b, Method::Lsq),
            QuantSpec::activations(b, true, Method::Lsq),
            &calib,
        )
        .unwrap();
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        seed in any::<u64>(),
        hidden in prop::collection::vec(1usize..24, 1..3),
        bits in prop::option::of(prop::sample::select(vec![2u8, 4, 8])),
    ) {
        let dims: Vec<usize> = std::iter::once(5).chain(hidden).chain(std::iter::once(2)).collect();
        let p = random_policy(&dims, seed, bits);
        let (back, packed) = decode(&encode(&p, &[]).unwrap()).unwrap();
        prop_assert!(packed.is_empty());
        prop_assert_eq!(&back, &p);
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("p.ckpt");
        save(&p, &path).unwrap();
        prop_assert_eq!(load(&path).unwrap(), p);
    }

    #[test]
    fn episodes_respect_length_and_return(seed in 0u64..10_000, long in any::<bool>()) {
        let kind = if long { EnvKind::GridDriveLong } else { EnvKind::GridDrive };
        let env = kind.make();
        let trajs = collect(&Expert, &env, 2, seed, true, Source::Expert).unwrap();
        for t in &trajs {
            prop_assert!(t.len() <= env.max_steps());
            prop_assert_eq!(t.ret, t.recomputed_return());
            prop_assert_eq!(t.collisions as usize, t.steps.iter().filter(|s| s.collision).count());
        }
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("d.jsonl");
        write_jsonl(&path, &trajs).unwrap();
        prop_assert_eq!(read_jsonl(&path).unwrap(), trajs);
    }

    #[test]
    fn saliency_is_finite_and_non_negative(seed in any::<u64>(), quantized in any::<bool>()) {
        let kind = EnvKind::GridDrive;
        let p = random_policy(&[kind.obs_dim(), 16, kind.action_dim()], seed, quantized.then_some(4));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = kind.make().reset(&mut rng);
        let map = saliency_map(&p, &obs, &SaliencyConfig::default()).unwrap();
        prop_assert!(map.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn union_keeps_every_row_of_both_sources() {
    let env = EnvKind::Cartpole.make();
    let expert = collect(&Expert, &env, 2, 0, true, Source::Expert).unwrap();
    let p = random_policy(&[4, 8, 1], 1, None);
    let fp = collect(&p, &env, 3, 100, true, Source::FpPolicy).unwrap();
    let de = Dataset::from_trajectories(EnvKind::Cartpole, &expert).unwrap();
    let df = Dataset::from_trajectories(EnvKind::Cartpole, &fp).unwrap();
    let u = build_qail_dataset(&de, &df).unwrap();
    assert_eq!(u.len(), de.len() + df.len());
    assert_eq!(u.count(Source::Expert), de.len());
    assert_eq!(u.count(Source::FpPolicy), df.len());
}

#[test]
fn union_rejects_mismatched_envs() {
    let cart = EnvKind::Cartpole.make();
    let grid = EnvKind::GridDrive.make();
    let a = Dataset::from_trajectories(
        EnvKind::Cartpole,
        &collect(&Expert, &cart, 1, 0, true, Source::Expert).unwrap(),
    )
    .unwrap();
    let b = Dataset::from_trajectories(
        EnvKind::GridDrive,
        &collect(&Expert, &grid, 1, 0, true, Source::Expert).unwrap(),
    )
    .unwrap();
    assert!(build_qail_dataset(&a, &b).is_err());
}
