//! PPO on a fake-quantized actor, optionally pulled toward the
//! full-precision teacher by the QBC term.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{collect, Env, Source, Trajectory};
use crate::error::{Error, Result};
use crate::imitation::{qbc_loss_tape, quantize_from, TeacherOutputs};
use crate::policy::{self, GaussianPolicy, Mlp, HALF_LN_2PI};
use crate::quant::{Granularity, Method, QuantSpec};
use crate::tensor::{Adam, NodeId, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QarlConfig {
    pub bits: u8,
    pub method: Method,
    pub weight_granularity: Granularity,
    /// QBC weight; `0` is plain PPO on the quantized actor.
    pub lambda: f32,
    pub lr: f32,
    pub critic_lr: f32,
    pub critic_hidden: Vec<usize>,
    pub iterations: usize,
    pub episodes_per_iter: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f32,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f32,
    pub entropy_coef: f32,
    pub calib_episodes: usize,
    pub calib_seed: u64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for QarlConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            method: Method::Lsq,
            weight_granularity: Granularity::PerTensor,
            lambda: 1.0,
            lr: 3e-4,
            critic_lr: 1e-3,
            critic_hidden: vec![256, 256],
            iterations: 20,
            episodes_per_iter: 8,
            epochs: 4,
            minibatch: 256,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            calib_episodes: 5,
            calib_seed: 90_000,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl QarlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.episodes_per_iter == 0 || self.epochs == 0 || self.minibatch == 0 {
            return bad("episodes_per_iter, epochs and minibatch must be positive");
        }
        if !(self.lr > 0.0 && self.critic_lr > 0.0) || self.critic_hidden.contains(&0) {
            return bad("learning rates and critic widths must be positive");
        }
        Ok(())
    }
}

/// One iteration of on-policy experience.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperienceBuffer {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// `[n × obs_dim]`
    pub obs: Vec<f32>,
    /// `[n × action_dim]`
    pub actions: Vec<f32>,
    /// `log π_old(a|s)` recorded at collection time.
    pub logp_old: Vec<f32>,
    pub rewards: Vec<f32>,
    pub values: Vec<f32>,
    pub dones: Vec<bool>,
}

impl ExperienceBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Fills the buffer from finished episodes in episode order.
    pub fn from_trajectories(trajs: &[Trajectory], actor: &GaussianPolicy, critic: &Critic) -> Result<Self> {
        let mut b = Self {
            obs_dim: actor.obs_dim(),
            action_dim: actor.action_dim(),
            ..Default::default()
        };
        for t in trajs {
            let n = t.steps.len();
            for (i, s) in t.steps.iter().enumerate() {
                b.obs.extend_from_slice(&s.obs);
                b.actions.extend_from_slice(&s.action);
                b.rewards.push(s.reward);
                // a truncated final step is treated as terminal
                b.dones.push(s.done || i + 1 == n);
            }
        }
        let n = b.len();
        let mu = actor.mean_batch(&b.obs, n)?;
        let ls = actor.log_std.data();
        b.logp_old = (0..n)
            .map(|i| {
                let a = b.action_dim;
                policy::gaussian_log_prob(&mu[i * a..(i + 1) * a], ls, &b.actions[i * a..(i + 1) * a])
            })
            .collect();
        b.values = critic.values(&b.obs, n);
        Ok(b)
    }
}

/// State-value network, trained only by its own regression loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub mlp: Mlp,
}

impl Critic {
    pub fn new(obs_dim: usize, hidden: &[usize], rng: &mut impl rand::Rng) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(obs_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        Ok(Self {
            mlp: Mlp::new(&dims, 1.0, rng)?,
        })
    }

    pub fn values(&self, obs: &[f32], n: usize) -> Vec<f32> {
        self.mlp.forward(obs, n)
    }
}

/// Raw GAE advantages and bootstrapped returns:
/// `δ_t = r_t + γ·v_{t+1}·(1 − done_t) − v_t`, `Â_t = δ_t + γλ·(1 − done_t)·Â_{t+1}`,
/// `R_t = Â_t + v_t`.
pub fn gae_advantages(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Contract("advantages of an empty buffer".into()));
    }
    if values.len() != n || dones.len() != n {
        return Err(Error::shape("gae", &[n], &[values.len(), dones.len()]));
    }
    let mut adv = vec![0.0f64; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n { values[t + 1] as f64 } else { 0.0 };
        let delta = rewards[t] as f64 + gamma * next_v * live - values[t] as f64;
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, &v)| a + v as f64).collect();
    Ok((adv, ret))
}

/// Zero mean, unit variance; a constant vector becomes all zeros.
pub fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    x.iter()
        .map(|v| if sd > 1e-12 { (v - mean) / sd } else { 0.0 })
        .collect()
}

/// Per-sample clipped surrogate `min(r·Â, clip(r, 1−ε, 1+ε)·Â)`.
pub fn ppo_objective(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// `−mean(min(r·Â, clip(r)·Â))` with `r = exp(logπ_new − logπ_old)`.
pub fn ppo_clip_loss(logp_new: &[f64], logp_old: &[f64], adv: &[f64], eps: f64) -> Result<f64> {
    if logp_new.len() != logp_old.len() || adv.len() != logp_new.len() || adv.is_empty() {
        return Err(Error::shape(
            "ppo_clip_loss",
            &[logp_old.len()],
            &[logp_new.len(), adv.len()],
        ));
    }
    let mut sum = 0.0;
    for ((n, o), a) in logp_new.iter().zip(logp_old).zip(adv) {
        let r = (n - o).exp();
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("probability ratio {r}")));
        }
        sum += ppo_objective(r, *a, eps);
    }
    Ok(-sum / adv.len() as f64)
}

/// Recorded form of [`ppo_clip_loss`] over `[n]` nodes.
pub fn ppo_clip_loss_tape(
    tape: &mut Tape,
    logp_new: NodeId,
    logp_old: &[f32],
    adv: &[f32],
    eps: f32,
) -> Result<NodeId> {
    let n = logp_old.len();
    let old = tape.constant(Tensor::new(vec![n], logp_old.to_vec())?);
    let a = tape.constant(Tensor::new(vec![n], adv.to_vec())?);
    let d = tape.sub(logp_new, old)?;
    let r = tape.exp(d);
    let s1 = tape.mul(r, a)?;
    let rc = tape.clamp(r, 1.0 - eps, 1.0 + eps);
    let s2 = tape.mul(rc, a)?;
    let m = tape.minimum(s1, s2)?;
    let mean = tape.mean(m);
    Ok(tape.neg(mean))
}

/// `ppo + λ·qbc`.
pub fn qarl_total_loss(tape: &mut Tape, ppo: NodeId, qbc: Option<NodeId>, lambda: f32) -> Result<NodeId> {
    match qbc {
        Some(q) if lambda != 0.0 => {
            let s = tape.scale(q, lambda);
            tape.add(ppo, s)
        }
        _ => Ok(ppo),
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterLog {
    pub iter: usize,
    pub mean_return: f64,
    pub ppo_loss: f64,
    pub qbc_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct QarlRun {
    pub policy: GaussianPolicy,
    pub critic: Critic,
    pub log: Vec<IterLog>,
}

fn entropy(log_std: &[f32]) -> f64 {
    log_std.iter().map(|&l| l as f64 + 0.5 + HALF_LN_2PI as f64).sum()
}

/// PPO fine-tuning of a quantized copy of `fp`.
pub fn train_qarl(fp: &GaussianPolicy, env: &Env, cfg: &QarlConfig, ckpt: Option<&Path>) -> Result<QarlRun> {
    cfg.validate()?;
    if fp.is_quantized() {
        return Err(Error::Config("the teacher must be full precision".into()));
    }
    let mut w = QuantSpec::weights(cfg.bits, cfg.method);
    w.granularity = cfg.weight_granularity;
    let a = QuantSpec::activations(cfg.bits, true, cfg.method);
    let mut actor = quantize_from(fp, w, a, env, cfg.calib_episodes, cfg.calib_seed)?;
    let tag = if cfg.lambda == 0.0 { "qarl" } else { "qarl-qbc" };
    actor.meta.provenance = format!("{tag}-w{0}a{0}", cfg.bits);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut critic = Critic::new(actor.obs_dim(), &cfg.critic_hidden, &mut rng)?;
    let mut actor_opt = Adam::new(cfg.lr);
    let mut critic_opt = Adam::new(cfg.critic_lr);
    let mut log = Vec::with_capacity(cfg.iterations);
    let (od, ad) = (actor.obs_dim(), actor.action_dim());

    for iter in 0..cfg.iterations {
        let base = cfg
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add((iter * cfg.episodes_per_iter) as u64);
        let trajs = collect(&actor, env, cfg.episodes_per_iter, base, false, Source::Policy)?;
        let mean_return = trajs.iter().map(|t| t.ret).sum::<f64>() / trajs.len() as f64;
        let buf = ExperienceBuffer::from_trajectories(&trajs, &actor, &critic)?;
        if buf.is_empty() {
            return Err(Error::Contract("iteration collected no steps".into()));
        }
        let (adv, ret) = gae_advantages(&buf.rewards, &buf.values, &buf.dones, cfg.gamma, cfg.gae_lambda)?;
        let adv = normalize(&adv);
        let n = buf.len();
        let mut order: Vec<usize> = (0..n).collect();
        let (mut ppo_sum, mut qbc_sum, mut v_sum, mut count) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch) {
                let m = chunk.len();
                let mut obs = Vec::with_capacity(m * od);
                let mut act = Vec::with_capacity(m * ad);
                for &i in chunk {
                    obs.extend_from_slice(&buf.obs[i * od..(i + 1) * od]);
                    act.extend_from_slice(&buf.actions[i * ad..(i + 1) * ad]);
                }
                let old: Vec<f32> = chunk.iter().map(|&i| buf.logp_old[i]).collect();
                let a: Vec<f32> = chunk.iter().map(|&i| adv[i] as f32).collect();
                let target: Vec<f32> = chunk.iter().map(|&i| ret[i] as f32).collect();

                let mut tape = Tape::new();
                let nodes = actor.register(&mut tape, true);
                let x = tape.constant(Tensor::new(vec![m, od], obs.clone())?);
                let y = tape.constant(Tensor::new(vec![m, ad], act)?);
                let mu = actor.mean_tape(&mut tape, &nodes, x)?;
                let lp = actor.log_prob_tape(&mut tape, &nodes, mu, y)?;
                let ppo = ppo_clip_loss_tape(&mut tape, lp, &old, &a, cfg.clip)?;
                let qbc = if cfg.lambda != 0.0 {
                    let t = TeacherOutputs::of(fp, &obs, m)?;
                    Some(qbc_loss_tape(&mut tape, &nodes, mu, &t, None)?)
                } else {
                    None
                };
                let mut total = qarl_total_loss(&mut tape, ppo, qbc, cfg.lambda)?;
                if cfg.entropy_coef != 0.0 {
                    // entropy depends on log σ only
                    let s = tape.sum(nodes.log_std);
                    let bonus = tape.scale(s, -cfg.entropy_coef);
                    total = tape.add(total, bonus)?;
                }
                let tv = tape.value(total).item();
                if !tv.is_finite() {
                    if let Some(p) = ckpt {
                        policy::save(&actor, p)?;
                    }
                    return Err(Error::NonFinite(format!("QARL loss {tv} at iteration {iter}")));
                }
                ppo_sum += tape.value(ppo).item() as f64;
                qbc_sum += qbc.map_or(0.0, |q| tape.value(q).item() as f64);
                tape.backward(total)?;
                actor.read_grads(&tape, &nodes)?;
                actor_opt.step(&mut actor.params_mut())?;
                actor.clamp_steps();

                let mut ct = Tape::new();
                let cn = critic.mlp.register(&mut ct, true);
                let cx = ct.constant(Tensor::new(vec![m, od], obs)?);
                let v = critic.mlp.forward_tape(&mut ct, &cn, cx)?;
                let tgt = ct.constant(Tensor::new(vec![m, 1], target)?);
                let d = ct.sub(v, tgt)?;
                let d2 = ct.square(d);
                let mse = ct.mean(d2);
                let vl = ct.scale(mse, cfg.value_coef);
                v_sum += ct.value(mse).item() as f64;
                ct.backward(vl)?;
                critic.mlp.read_grads(&ct, &cn)?;
                critic_opt.step(&mut critic.mlp.params_mut())?;
                count += 1;
            }
        }
        let c = count.max(1) as f64;
        log.push(IterLog {
            iter,
            mean_return,
            ppo_loss: ppo_sum / c,
            qbc_loss: qbc_sum / c,
            value_loss: v_sum / c,
            entropy: entropy(actor.log_std.data()),
        });
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            if let Some(p) = ckpt {
                policy::save(&actor, p)?;
            }
        }
    }
    if let Some(p) = ckpt {
        policy::save(&actor, p)?;
    }
    Ok(QarlRun {
        policy: actor,
        critic,
        log,
    })
}
