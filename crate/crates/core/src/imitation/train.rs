use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_qail_dataset, calibration_indices, mean_saliencies, nearest_rank, qbc_loss_tape, total_loss_tape, wqbc_alpha,
    Dataset, LossWeights, Minibatches, QailConfig, TeacherOutputs,
};
use crate::envs::{collect, Env, Named, Source};
use crate::error::{Error, Result};
use crate::policy::{self, GaussianPolicy, PolicyMeta};
use crate::quant::{Method, QuantSpec};
use crate::tensor::{Adam, Tape, Tensor};

/// One row of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLog {
    pub step: usize,
    pub il_loss: f64,
    pub qbc_loss: f64,
    pub alpha_mean: f64,
    pub total_loss: f64,
    pub lr: f64,
}

/// Behavior cloning of the full-precision policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub init_log_std: f32,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            init_log_std: -0.5,
            lr: 1e-3,
            steps: 3000,
            batch_size: 256,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden layer widths must be positive and non-empty".into(),
            ));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("lr, batch_size and log_every must be positive".into()));
        }
        Ok(())
    }
}

/// State refreshed at the start of every epoch.
#[derive(Default)]
struct EpochState {
    /// Per dataset row.
    alpha: Option<Vec<f32>>,
    /// `[n × obs_dim]` states for on-policy QBC.
    qbc_states: Option<Vec<f32>>,
}

struct Fit<'a> {
    teacher: Option<&'a GaussianPolicy>,
    weights: LossWeights,
    lr: f32,
    steps: usize,
    batch_size: usize,
    seed: u64,
    log_every: usize,
    checkpoint_every: usize,
    ckpt: Option<&'a Path>,
}

fn save_if(p: &GaussianPolicy, ckpt: Option<&Path>) -> Result<()> {
    match ckpt {
        Some(path) => policy::save(p, path),
        None => Ok(()),
    }
}

fn fit(
    student: &mut GaussianPolicy,
    ds: &Dataset,
    f: &Fit,
    mut on_epoch: impl FnMut(&GaussianPolicy, usize) -> Result<EpochState>,
) -> Result<Vec<StepLog>> {
    let mut log = Vec::new();
    if f.steps == 0 {
        save_if(student, f.ckpt)?;
        return Ok(log);
    }
    let mut batches = Minibatches::new(ds.len(), f.batch_size, f.seed)?;
    let mut qbc_rng = ChaCha8Rng::seed_from_u64(f.seed ^ 0x9bc);
    let mut adam = Adam::new(f.lr);
    let mut state = EpochState::default();
    let (od, ad) = (student.obs_dim(), student.action_dim());
    for step in 0..f.steps {
        let (idx, fresh) = batches.next_batch();
        if fresh {
            state = on_epoch(student, batches.epoch())?;
        }
        let n = idx.len();
        let (obs, act) = ds.gather(&idx);
        let alpha: Option<Vec<f32>> = state.alpha.as_ref().map(|a| idx.iter().map(|&i| a[i]).collect());
        let mut tape = Tape::new();
        let nodes = student.register(&mut tape, true);
        let (total, il, qbc) = match (&state.qbc_states, f.teacher) {
            (Some(states), Some(teacher)) if f.weights.lambda != 0.0 => {
                let w = LossWeights {
                    lambda: 0.0,
                    ..f.weights
                };
                let l = total_loss_tape(&mut tape, student, &nodes, &obs, &act, n, None, None, w)?;
                let m = states.len() / od;
                let pick: Vec<usize> = (0..n.min(m)).map(|_| qbc_rng.random_range(0..m)).collect();
                let s: Vec<f32> = pick
                    .iter()
                    .flat_map(|&i| states[i * od..(i + 1) * od].iter().copied())
                    .collect();
                let t = TeacherOutputs::of(teacher, &s, pick.len())?;
                let x = tape.constant(Tensor::new(vec![pick.len(), od], s)?);
                let mu = student.mean_tape(&mut tape, &nodes, x)?;
                let q = qbc_loss_tape(&mut tape, &nodes, mu, &t, None)?;
                let scaled = tape.scale(q, f.weights.lambda);
                (tape.add(l.total, scaled)?, l.il, Some(q))
            }
            _ => {
                let teacher = match f.teacher {
                    Some(t) if f.weights.lambda != 0.0 => Some(TeacherOutputs::of(t, &obs, n)?),
                    _ => None,
                };
                let l = total_loss_tape(
                    &mut tape,
                    student,
                    &nodes,
                    &obs,
                    &act,
                    n,
                    teacher.as_ref(),
                    alpha.as_deref(),
                    f.weights,
                )?;
                (l.total, l.il, l.qbc)
            }
        };
        let total_v = tape.value(total).item();
        if !total_v.is_finite() {
            save_if(student, f.ckpt)?;
            return Err(Error::NonFinite(format!("training loss {total_v} at step {step}")));
        }
        if step % f.log_every == 0 || step + 1 == f.steps {
            log.push(StepLog {
                step,
                il_loss: tape.value(il).item() as f64,
                qbc_loss: qbc.map_or(0.0, |q| tape.value(q).item() as f64),
                alpha_mean: alpha
                    .as_ref()
                    .map_or(1.0, |a| a.iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64),
                total_loss: total_v as f64,
                lr: f.lr as f64,
            });
        }
        tape.backward(total)?;
        student.read_grads(&tape, &nodes)?;
        adam.step(&mut student.params_mut())?;
        student.clamp_steps();
        if f.checkpoint_every > 0 && (step + 1) % f.checkpoint_every == 0 {
            save_if(student, f.ckpt)?;
        }
        debug_assert_eq!(act.len(), n * ad);
    }
    save_if(student, f.ckpt)?;
    Ok(log)
}

/// Trains a full-precision policy by maximum likelihood on `ds`.
pub fn train_bc(ds: &Dataset, cfg: &BcConfig, ckpt: Option<&Path>) -> Result<(GaussianPolicy, Vec<StepLog>)> {
    cfg.validate()?;
    let dims: Vec<usize> = std::iter::once(ds.obs_dim())
        .chain(cfg.hidden.iter().copied())
        .chain(std::iter::once(ds.action_dim()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = GaussianPolicy::new(&dims, cfg.init_log_std, &mut rng)?;
    p.meta = PolicyMeta {
        env: ds.env.name().into(),
        seed: cfg.seed,
        provenance: "fp".into(),
    };
    if cfg.steps > 0 && ds.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    let f = Fit {
        teacher: None,
        weights: LossWeights { il: 1.0, lambda: 0.0 },
        lr: cfg.lr,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        log_every: cfg.log_every,
        checkpoint_every: cfg.checkpoint_every,
        ckpt,
    };
    let log = fit(&mut p, ds, &f, |_, _| Ok(EpochState::default()))?;
    Ok((p, log))
}

/// Observations of `episodes` deterministic rollouts of `p`.
pub fn calibration_obs(p: &GaussianPolicy, env: &Env, episodes: usize, seed: u64) -> Result<Vec<f32>> {
    let trajs = collect(p, env, episodes, seed, true, Source::Policy)?;
    Ok(trajs
        .iter()
        .flat_map(|t| t.steps.iter().flat_map(|s| s.obs.iter().copied()))
        .collect())
}

/// Copy of `fp` with quantizers attached: weight steps from the weights,
/// activation steps from min/max over a seeded rollout of `fp`.
pub fn quantize_from(
    fp: &GaussianPolicy,
    weight_spec: QuantSpec,
    act_spec: QuantSpec,
    env: &Env,
    episodes: usize,
    seed: u64,
) -> Result<GaussianPolicy> {
    if fp.is_quantized() {
        return Err(Error::Config("expected a full-precision policy".into()));
    }
    let calib = calibration_obs(fp, env, episodes, seed)?;
    let mut q = fp.clone();
    q.attach_quantizers(weight_spec, act_spec, &calib)?;
    Ok(q)
}

/// Round-to-nearest post-training quantization, no fine-tuning.
pub fn ptq_rtn(fp: &GaussianPolicy, bits: u8, env: &Env, calib_seed: u64) -> Result<GaussianPolicy> {
    let mut q = quantize_from(
        fp,
        QuantSpec::weights(bits, Method::Rtn),
        QuantSpec::activations(bits, true, Method::Rtn),
        env,
        5,
        calib_seed,
    )?;
    q.meta.provenance = format!("rtn-w{bits}a{bits}");
    Ok(q)
}

/// Result of a QAIL run.
#[derive(Debug, Clone)]
pub struct QailRun {
    pub policy: GaussianPolicy,
    pub log: Vec<StepLog>,
    pub dataset_len: usize,
    /// Threshold and boosted-state count of every wQBC calibration.
    pub calibrations: Vec<(f64, usize)>,
}

/// Fine-tunes a quantized copy of `fp` on `D_E ∪ D_FP`.
pub fn train_qail(
    fp: &GaussianPolicy,
    d_expert: &Dataset,
    env: &Env,
    cfg: &QailConfig,
    ckpt: Option<&Path>,
) -> Result<QailRun> {
    cfg.validate()?;
    if d_expert.env != env.kind {
        return Err(Error::Config(format!(
            "{} dataset for a {} run",
            d_expert.env, env.kind
        )));
    }
    if fp.is_quantized() {
        return Err(Error::Config("the teacher must be full precision".into()));
    }
    let d_fp = if cfg.fp_episodes > 0 {
        let teacher = Named(fp, "fp".to_string());
        let trajs = collect(
            &teacher,
            env,
            cfg.fp_episodes,
            cfg.fp_seed,
            cfg.fp_deterministic,
            Source::FpPolicy,
        )?;
        Dataset::from_trajectories(env.kind, &trajs)?
    } else {
        Dataset::empty(env.kind)
    };
    train_qail_with(fp, d_expert, &d_fp, env, cfg, ckpt)
}

/// [`train_qail`] with a previously collected `D_FP`; `cfg.fp_episodes`,
/// `fp_seed` and `fp_deterministic` are ignored.
pub fn train_qail_with(
    fp: &GaussianPolicy,
    d_expert: &Dataset,
    d_fp: &Dataset,
    env: &Env,
    cfg: &QailConfig,
    ckpt: Option<&Path>,
) -> Result<QailRun> {
    cfg.validate()?;
    if d_expert.env != env.kind {
        return Err(Error::Config(format!(
            "{} dataset for a {} run",
            d_expert.env, env.kind
        )));
    }
    if fp.is_quantized() {
        return Err(Error::Config("the teacher must be full precision".into()));
    }
    let ds = build_qail_dataset(d_expert, d_fp)?;
    if cfg.steps > 0 && ds.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }

    let mut weight_spec = QuantSpec::weights(cfg.bits, cfg.method);
    weight_spec.granularity = cfg.weight_granularity;
    let act_spec = QuantSpec::activations(cfg.bits, true, cfg.method);
    let mut student = quantize_from(fp, weight_spec, act_spec, env, cfg.calib_episodes, cfg.calib_seed)?;
    let tag = match (cfg.lambda, cfg.wqbc_enabled, cfg.il_weight) {
        (_, _, 0.0) => "qbc-only",
        (0.0, _, _) => "qail",
        (_, true, _) => "qail-wqbc",
        _ => "qail-qbc",
    };
    student.meta.provenance = format!("{tag}-w{0}a{0}", cfg.bits);

    let calib_idx = if cfg.wqbc_enabled && cfg.steps > 0 && cfg.lambda != 0.0 {
        Some(calibration_indices(ds.len(), cfg.calib_fraction, cfg.seed ^ 0xca1b)?)
    } else {
        None
    };
    let mut calibrations = Vec::new();
    let f = Fit {
        teacher: Some(fp),
        weights: LossWeights {
            il: cfg.il_weight,
            lambda: cfg.lambda,
        },
        lr: cfg.lr,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        log_every: cfg.log_every,
        checkpoint_every: cfg.checkpoint_every,
        ckpt,
    };
    let log = fit(&mut student, &ds, &f, |q, epoch| {
        let mut st = EpochState::default();
        if let Some(idx) = &calib_idx {
            let scores = mean_saliencies(q, &ds, idx, &cfg.saliency)?;
            let t = match cfg.threshold {
                Some(t) => t,
                None => nearest_rank(&scores, cfg.calib_quantile)?,
            };
            let mut alpha = vec![1.0f32; ds.len()];
            let mut boosted = 0;
            for (&i, &s) in idx.iter().zip(&scores) {
                let a = wqbc_alpha(s, t, cfg.beta as f64)?;
                boosted += (a > 1.0) as usize;
                alpha[i] = a as f32;
            }
            calibrations.push((t, boosted));
            st.alpha = Some(alpha);
        }
        if cfg.on_policy_qbc && cfg.lambda != 0.0 {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64 * 1000);
            let trajs = collect(q, env, cfg.on_policy_episodes.max(1), seed, false, Source::Policy)?;
            let states: Vec<f32> = trajs
                .iter()
                .flat_map(|t| t.steps.iter().flat_map(|s| s.obs.iter().copied()))
                .collect();
            if !states.is_empty() {
                st.qbc_states = Some(states);
            }
        }
        Ok(st)
    })?;
    Ok(QailRun {
        policy: student,
        log,
        dataset_len: ds.len(),
        calibrations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{evaluate, EnvKind, Expert};

    fn expert_ds(env: &Env, n: usize) -> Dataset {
        let trajs = collect(&Expert, env, n, 0, true, Source::Expert).unwrap();
        Dataset::from_trajectories(env.kind, &trajs).unwrap()
    }

    fn small_fp(ds: &Dataset) -> GaussianPolicy {
        let cfg = BcConfig {
            hidden: vec![16],
            steps: 200,
            batch_size: 64,
            ..Default::default()
        };
        train_bc(ds, &cfg, None).unwrap().0
    }

    #[test]
    fn bc_reduces_the_loss_and_is_deterministic() {
        let env = EnvKind::Cartpole.make();
        let ds = expert_ds(&env, 3);
        let cfg = BcConfig {
            hidden: vec![16],
            steps: 150,
            batch_size: 64,
            log_every: 1,
            ..Default::default()
        };
        let (p, log) = train_bc(&ds, &cfg, None).unwrap();
        assert_eq!(log.len(), 150);
        assert!(log.iter().all(|r| r.total_loss.is_finite()));
        assert!(log.last().unwrap().il_loss < log[0].il_loss);
        let (q, _) = train_bc(&ds, &cfg, None).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn zero_steps_saves_the_initial_policy() {
        let env = EnvKind::Cartpole.make();
        let ds = expert_ds(&env, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fp.ilq");
        let cfg = BcConfig {
            steps: 0,
            ..Default::default()
        };
        let (p, log) = train_bc(&ds, &cfg, Some(&path)).unwrap();
        assert!(log.is_empty());
        assert_eq!(policy::load(&path).unwrap(), p);
    }

    #[test]
    fn ptq_weights_lie_on_the_grid() {
        let env = EnvKind::Cartpole.make();
        let fp = small_fp(&expert_ds(&env, 2));
        let q = ptq_rtn(&fp, 4, &env, 7).unwrap();
        let quant = q.quant.as_ref().unwrap();
        for (l, lq) in quant.iter().enumerate() {
            let s = lq.weight.steps()[0];
            for w in q.effective_weights(l) {
                let k = w / s;
                assert_eq!(k, k.round());
                assert!((-8.0..=7.0).contains(&k));
            }
        }
        assert!(ptq_rtn(&q, 4, &env, 7).is_err());
    }

    #[test]
    fn zero_step_qail_equals_ptq_init_and_keeps_teacher() {
        let env = EnvKind::Cartpole.make();
        let ds = expert_ds(&env, 2);
        let fp = small_fp(&ds);
        let before = fp.clone();
        let cfg = QailConfig {
            bits: 8,
            steps: 0,
            fp_episodes: 1,
            ..Default::default()
        };
        let run = train_qail(&fp, &ds, &env, &cfg, None).unwrap();
        let mut init = fp.clone();
        let mut w = QuantSpec::weights(8, Method::Lsq);
        w.granularity = crate::quant::Granularity::PerTensor;
        init.attach_quantizers(
            w,
            QuantSpec::activations(8, true, Method::Lsq),
            &calibration_obs(&fp, &env, cfg.calib_episodes, cfg.calib_seed).unwrap(),
        )
        .unwrap();
        assert_eq!(run.policy.mlp, init.mlp);
        assert_eq!(run.policy.quant, init.quant);
        let a = evaluate(&run.policy, &env, 3, 1, true).unwrap();
        let b = evaluate(&init, &env, 3, 1, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(fp, before);
    }

    #[test]
    fn qail_is_deterministic_and_finite() {
        let env = EnvKind::Cartpole.make();
        let ds = expert_ds(&env, 2);
        let fp = small_fp(&ds);
        let cfg = QailConfig {
            steps: 40,
            batch_size: 64,
            fp_episodes: 2,
            log_every: 1,
            ..Default::default()
        };
        let a = train_qail(&fp, &ds, &env, &cfg, None).unwrap();
        let b = train_qail(&fp, &ds, &env, &cfg, None).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 40);
        assert!(a.log.iter().all(|r| r.total_loss.is_finite() && r.qbc_loss >= 0.0));
        assert!(a.dataset_len > ds.len());
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_last_good() {
        let env = EnvKind::Cartpole.make();
        let mut ds = expert_ds(&env, 1);
        let fp = small_fp(&ds);
        ds.actions[5] = f32::INFINITY;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ilq");
        let cfg = QailConfig {
            steps: 10,
            batch_size: 1000,
            fp_episodes: 0,
            ..Default::default()
        };
        let err = train_qail(&fp, &ds, &env, &cfg, Some(&path)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        let kept = policy::load(&path).unwrap();
        assert!(kept.is_quantized());
        assert!(kept
            .mlp
            .layers
            .iter()
            .all(|l| l.weight.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn wqbc_boosts_the_nearest_rank_top_fifth() {
        let env = EnvKind::GridDrive.make();
        let ds = expert_ds(&env, 1);
        let fp = {
            let cfg = BcConfig {
                hidden: vec![8],
                steps: 30,
                batch_size: 32,
                ..Default::default()
            };
            train_bc(&ds, &cfg, None).unwrap().0
        };
        let cfg = QailConfig {
            steps: 3,
            batch_size: ds.len() / 2,
            fp_episodes: 0,
            wqbc_enabled: true,
            ..Default::default()
        };
        let run = train_qail(&fp, &ds, &env, &cfg, None).unwrap();
        let k = (0.1 * ds.len() as f64).ceil() as usize;
        assert_eq!(run.calibrations.len(), 2);
        for &(_, boosted) in &run.calibrations {
            assert!(boosted <= k - (0.8 * k as f64).ceil() as usize);
        }
        assert!(run.log.iter().any(|r| r.alpha_mean >= 1.0));
    }

    #[test]
    fn on_policy_mode_runs() {
        let env = EnvKind::Cartpole.make();
        let ds = expert_ds(&env, 1);
        let fp = small_fp(&ds);
        let cfg = QailConfig {
            steps: 5,
            batch_size: 64,
            fp_episodes: 0,
            on_policy_qbc: true,
            on_policy_episodes: 1,
            ..Default::default()
        };
        let run = train_qail(&fp, &ds, &env, &cfg, None).unwrap();
        assert!(run.log.iter().all(|r| r.qbc_loss.is_finite()));
    }
}
