//! Behavior cloning through a fake-quantized policy (QAIL), with an output
//! matching term toward the frozen full-precision teacher (QBC) and its
//! saliency-weighted form (wQBC).

mod train;

pub use train::{
    calibration_obs, ptq_rtn, quantize_from, train_bc, train_qail, train_qail_with, BcConfig, QailRun, StepLog,
};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, Source, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{GaussianPolicy, PolicyNodes};
use crate::quant::{Granularity, Method};
use crate::saliency::{self, SaliencyConfig};
use crate::tensor::{NodeId, Tape, Tensor};

/// Flat `(obs, action)` pairs with their source tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvKind,
    /// `[len × obs_dim]`
    pub obs: Vec<f32>,
    /// `[len × action_dim]`
    pub actions: Vec<f32>,
    pub sources: Vec<Source>,
    /// Policy ids and seeds the pairs came from.
    pub provenance: Vec<String>,
}

impl Dataset {
    pub fn empty(env: EnvKind) -> Self {
        Self {
            env,
            obs: Vec::new(),
            actions: Vec::new(),
            sources: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn from_trajectories(env: EnvKind, trajs: &[Trajectory]) -> Result<Self> {
        let mut ds = Self::empty(env);
        let (od, ad) = (env.obs_dim(), env.action_dim());
        for t in trajs {
            if t.env != env {
                return Err(Error::Config(format!("trajectory from {} in a {} dataset", t.env, env)));
            }
            for (i, s) in t.steps.iter().enumerate() {
                if s.obs.len() != od || s.action.len() != ad {
                    return Err(Error::Contract(format!(
                        "episode seed {} step {i}: pair dims ({}, {}) for a ({od}, {ad}) env",
                        t.seed,
                        s.obs.len(),
                        s.action.len()
                    )));
                }
                ds.obs.extend_from_slice(&s.obs);
                ds.actions.extend_from_slice(&s.action);
                ds.sources.push(t.source);
            }
            ds.provenance.push(format!("{}@{}", t.policy_id, t.seed));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.env.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.env.action_dim()
    }

    pub fn obs_row(&self, i: usize) -> &[f32] {
        let d = self.obs_dim();
        &self.obs[i * d..(i + 1) * d]
    }

    pub fn count(&self, source: Source) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }

    /// Observations and actions of the given rows, stacked.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let (od, ad) = (self.obs_dim(), self.action_dim());
        let mut obs = Vec::with_capacity(idx.len() * od);
        let mut act = Vec::with_capacity(idx.len() * ad);
        for &i in idx {
            obs.extend_from_slice(&self.obs[i * od..(i + 1) * od]);
            act.extend_from_slice(&self.actions[i * ad..(i + 1) * ad]);
        }
        (obs, act)
    }
}

/// `D_QAIL = D_E ∪ D_FP`, expert block first.
pub fn build_qail_dataset(d_expert: &Dataset, d_fp: &Dataset) -> Result<Dataset> {
    if d_expert.env != d_fp.env {
        return Err(Error::Config(format!(
            "cannot union {} and {} datasets",
            d_expert.env, d_fp.env
        )));
    }
    let mut out = d_expert.clone();
    out.obs.extend_from_slice(&d_fp.obs);
    out.actions.extend_from_slice(&d_fp.actions);
    out.sources.extend_from_slice(&d_fp.sources);
    out.provenance.extend_from_slice(&d_fp.provenance);
    Ok(out)
}

/// Endless stream of uniformly shuffled minibatches. Each epoch is a fresh
/// permutation; a trailing partial batch is dropped unless the whole
/// dataset is smaller than one batch.
#[derive(Debug, Clone)]
pub struct Minibatches {
    perm: Vec<usize>,
    pos: usize,
    batch: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl Minibatches {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::Contract("minibatches need a non-empty dataset and batch".into()));
        }
        Ok(Self {
            perm: (0..len).collect(),
            pos: usize::MAX,
            batch: batch.min(len),
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Epochs started so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Next batch of row indices and whether it opens a new epoch.
    pub fn next_batch(&mut self) -> (Vec<usize>, bool) {
        let fresh = self.pos == usize::MAX || self.pos + self.batch > self.perm.len();
        if fresh {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let b = self.perm[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        (b, fresh)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QailConfig {
    /// QBC weight.
    pub lambda: f32,
    /// wQBC boost for high-saliency states.
    pub beta: f32,
    pub bits: u8,
    pub method: Method,
    pub weight_granularity: Granularity,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub wqbc_enabled: bool,
    /// Fixed wQBC threshold; recalibrated every epoch when absent.
    pub threshold: Option<f64>,
    /// Weight of the imitation term; `0` trains on QBC alone.
    pub il_weight: f32,
    pub calib_fraction: f64,
    pub calib_quantile: f64,
    /// Size of `D_FP` in episodes.
    pub fp_episodes: usize,
    pub fp_seed: u64,
    pub fp_deterministic: bool,
    /// Episodes of the activation range calibration rollout.
    pub calib_episodes: usize,
    pub calib_seed: u64,
    /// QBC on states visited by the quantized policy instead of `D_QAIL`.
    pub on_policy_qbc: bool,
    pub on_policy_episodes: usize,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub saliency: SaliencyConfig,
}

impl Default for QailConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 2.0,
            bits: 4,
            method: Method::Lsq,
            weight_granularity: Granularity::PerTensor,
            lr: 3e-4,
            steps: 2000,
            batch_size: 256,
            wqbc_enabled: false,
            threshold: None,
            il_weight: 1.0,
            calib_fraction: 0.1,
            calib_quantile: 0.8,
            fp_episodes: 40,
            fp_seed: 50_000,
            fp_deterministic: true,
            calib_episodes: 5,
            calib_seed: 90_000,
            on_policy_qbc: false,
            on_policy_episodes: 5,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
            saliency: SaliencyConfig::default(),
        }
    }
}

impl QailConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.il_weight >= 0.0 && self.il_weight.is_finite()) {
            return bad(format!("il_weight must be finite and >= 0, got {}", self.il_weight));
        }
        if self.wqbc_enabled && !(self.beta > 1.0) {
            return bad(format!("beta must exceed 1 when wQBC is enabled, got {}", self.beta));
        }
        if self.wqbc_enabled && self.on_policy_qbc {
            return bad("wQBC weights dataset states and cannot be combined with on-policy QBC".into());
        }
        if !(2..=8).contains(&self.bits) {
            return bad(format!("bits must be in 2..=8, got {}", self.bits));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.log_every == 0 {
            return bad("lr, batch_size and log_every must be positive".into());
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction <= 1.0)
            || !(self.calib_quantile > 0.0 && self.calib_quantile <= 1.0)
        {
            return bad("calibration fraction and quantile must lie in (0, 1]".into());
        }
        if self.calib_episodes == 0 {
            return bad("calib_episodes must be at least 1".into());
        }
        Ok(())
    }
}

/// Loss weights of one objective: `il_weight·L_IL + λ·L_QBC`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub il: f32,
    pub lambda: f32,
}

/// Scalar handles of the recorded objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub il: NodeId,
    pub qbc: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub il: f32,
    pub qbc: f32,
    pub total: f32,
}

/// Frozen teacher outputs for a batch: `μ` rows and the shared `log σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    pub mu: Vec<f32>,
    pub log_std: Vec<f32>,
}

impl TeacherOutputs {
    pub fn of(teacher: &GaussianPolicy, obs: &[f32], n: usize) -> Result<Self> {
        Ok(Self {
            mu: teacher.mean_batch(obs, n)?,
            log_std: teacher.log_std.data().to_vec(),
        })
    }
}

fn check_pair(q: &GaussianPolicy, fp: &GaussianPolicy) -> Result<()> {
    if (q.obs_dim(), q.action_dim()) != (fp.obs_dim(), fp.action_dim()) {
        return Err(Error::shape(
            "qbc policies",
            &[fp.obs_dim(), fp.action_dim()],
            &[q.obs_dim(), q.action_dim()],
        ));
    }
    Ok(())
}

/// `−mean log π(a|s)` over the batch.
pub fn il_loss_tape(
    tape: &mut Tape,
    policy: &GaussianPolicy,
    nodes: &PolicyNodes,
    mu: NodeId,
    actions: NodeId,
) -> Result<NodeId> {
    let lp = policy.log_prob_tape(tape, nodes, mu, actions)?;
    let m = tape.mean(lp);
    Ok(tape.neg(m))
}

/// `(1/n) Σ_s α_s ‖out_q(s) − out_fp(s)‖²` with `out = μ ++ log σ`. The
/// teacher enters only as constants.
pub fn qbc_loss_tape(
    tape: &mut Tape,
    nodes: &PolicyNodes,
    mu_q: NodeId,
    teacher: &TeacherOutputs,
    alpha: Option<&[f32]>,
) -> Result<NodeId> {
    let (n, a) = tape.value(mu_q).dims2()?;
    if teacher.mu.len() != n * a || teacher.log_std.len() != a {
        return Err(Error::shape(
            "qbc teacher",
            &[n, a],
            &[teacher.mu.len() / a.max(1), teacher.log_std.len()],
        ));
    }
    let mu_fp = tape.constant(Tensor::new(vec![n, a], teacher.mu.clone())?);
    let d = tape.sub(mu_q, mu_fp)?;
    let d2 = tape.square(d);
    let per_state = tape.sum_rows(d2)?;
    let ls_fp = tape.constant(Tensor::new(vec![1, a], teacher.log_std.clone())?);
    let dl = tape.sub(nodes.log_std, ls_fp)?;
    let dl2 = tape.square(dl);
    let ls_term = tape.sum(dl2);
    let (mu_term, alpha_mean) = match alpha {
        Some(al) => {
            if al.len() != n {
                return Err(Error::shape("qbc alpha", &[n], &[al.len()]));
            }
            let w = tape.constant(Tensor::new(vec![n], al.to_vec())?);
            let weighted = tape.mul(per_state, w)?;
            let mean_alpha = al.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            (tape.mean(weighted), mean_alpha as f32)
        }
        None => (tape.mean(per_state), 1.0),
    };
    let ls_term = tape.scale(ls_term, alpha_mean);
    tape.add(mu_term, ls_term)
}

/// `il·L_IL + λ·L_QBC` on one batch. QBC is skipped entirely when `λ = 0`
/// so the total then equals the weighted imitation term exactly.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_tape(
    tape: &mut Tape,
    student: &GaussianPolicy,
    nodes: &PolicyNodes,
    obs: &[f32],
    actions: &[f32],
    n: usize,
    teacher: Option<&TeacherOutputs>,
    alpha: Option<&[f32]>,
    w: LossWeights,
) -> Result<LossNodes> {
    if n == 0 {
        return Err(Error::Contract("loss needs a non-empty batch".into()));
    }
    let (od, ad) = (student.obs_dim(), student.action_dim());
    let x = tape.constant(Tensor::new(vec![n, od], obs.to_vec())?);
    let a = tape.constant(Tensor::new(vec![n, ad], actions.to_vec())?);
    let mu = student.mean_tape(tape, nodes, x)?;
    let il = il_loss_tape(tape, student, nodes, mu, a)?;
    let mut total = if w.il == 1.0 { il } else { tape.scale(il, w.il) };
    let mut qbc = None;
    if w.lambda != 0.0 {
        let t = teacher.ok_or_else(|| Error::Contract("QBC needs teacher outputs".into()))?;
        let q = qbc_loss_tape(tape, nodes, mu, t, alpha)?;
        let scaled = tape.scale(q, w.lambda);
        total = tape.add(total, scaled)?;
        qbc = Some(q);
    }
    Ok(LossNodes { total, il, qbc })
}

fn batch_len(policy: &GaussianPolicy, obs: &[f32]) -> Result<usize> {
    let d = policy.obs_dim();
    if obs.is_empty() {
        return Err(Error::Contract("loss needs a non-empty batch".into()));
    }
    if !obs.len().is_multiple_of(d) {
        return Err(Error::shape("batch", &[d], &[obs.len()]));
    }
    Ok(obs.len() / d)
}

/// Value of `−(1/|B|) Σ log π(a|s)`.
pub fn il_loss(policy: &GaussianPolicy, obs: &[f32], actions: &[f32]) -> Result<f32> {
    let n = batch_len(policy, obs)?;
    if actions.len() != n * policy.action_dim() {
        return Err(Error::shape(
            "il_loss actions",
            &[n, policy.action_dim()],
            &[actions.len()],
        ));
    }
    let mut tape = Tape::new();
    let nodes = policy.register(&mut tape, false);
    let x = tape.constant(Tensor::new(vec![n, policy.obs_dim()], obs.to_vec())?);
    let a = tape.constant(Tensor::new(vec![n, policy.action_dim()], actions.to_vec())?);
    let mu = policy.mean_tape(&mut tape, &nodes, x)?;
    let l = il_loss_tape(&mut tape, policy, &nodes, mu, a)?;
    Ok(tape.value(l).item())
}

/// Value of the unweighted QBC discrepancy over the given states.
pub fn qbc_loss(q: &GaussianPolicy, fp: &GaussianPolicy, obs: &[f32]) -> Result<f32> {
    check_pair(q, fp)?;
    let n = batch_len(q, obs)?;
    let mut tape = Tape::new();
    let nodes = q.register(&mut tape, false);
    let x = tape.constant(Tensor::new(vec![n, q.obs_dim()], obs.to_vec())?);
    let mu = q.mean_tape(&mut tape, &nodes, x)?;
    let l = qbc_loss_tape(&mut tape, &nodes, mu, &TeacherOutputs::of(fp, obs, n)?, None)?;
    Ok(tape.value(l).item())
}

/// Values of both terms and the weighted total on one batch.
pub fn total_loss(
    q: &GaussianPolicy,
    fp: &GaussianPolicy,
    obs: &[f32],
    actions: &[f32],
    alpha: Option<&[f32]>,
    w: LossWeights,
) -> Result<LossValues> {
    check_pair(q, fp)?;
    let n = batch_len(q, obs)?;
    let teacher = TeacherOutputs::of(fp, obs, n)?;
    let mut tape = Tape::new();
    let nodes = q.register(&mut tape, false);
    let l = total_loss_tape(&mut tape, q, &nodes, obs, actions, n, Some(&teacher), alpha, w)?;
    Ok(LossValues {
        il: tape.value(l.il).item(),
        qbc: l.qbc.map_or(0.0, |q| tape.value(q).item()),
        total: tape.value(l.total).item(),
    })
}

/// `β` when the state's mean saliency is strictly above `T`, else 1.
pub fn wqbc_alpha(mean_saliency: f64, threshold: f64, beta: f64) -> Result<f64> {
    if !(beta > 1.0) {
        return Err(Error::Config(format!("beta must exceed 1, got {beta}")));
    }
    Ok(if mean_saliency > threshold { beta } else { 1.0 })
}

/// Nearest-rank quantile: the `⌈q·n⌉`-th smallest value.
pub fn nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("quantile of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// States used for threshold calibration and their mean saliencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Dataset rows, in sampling order.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub threshold: f64,
}

impl Calibration {
    /// Number of calibration states strictly above the threshold.
    pub fn boosted(&self) -> usize {
        self.scores.iter().filter(|&&s| s > self.threshold).count()
    }
}

pub const MIN_CALIBRATION_STATES: usize = 10;

/// Seeded sample of `⌈fraction·len⌉` rows without replacement.
pub fn calibration_indices(len: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let k = (fraction * len as f64).ceil() as usize;
    if k < MIN_CALIBRATION_STATES || k > len {
        return Err(Error::Contract(format!(
            "calibration sample of {k} states from {len}; need at least {MIN_CALIBRATION_STATES}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, len, k).into_vec())
}

/// Threshold from precomputed mean saliencies.
pub fn threshold_from_scores(indices: Vec<usize>, scores: Vec<f64>, quantile: f64) -> Result<Calibration> {
    let threshold = nearest_rank(&scores, quantile)?;
    Ok(Calibration {
        indices,
        scores,
        threshold,
    })
}

/// `T` = nearest-rank `quantile` of the quantized policy's mean saliency
/// over a seeded `fraction` of the dataset.
pub fn calibrate_threshold(
    policy: &GaussianPolicy,
    ds: &Dataset,
    fraction: f64,
    quantile: f64,
    seed: u64,
    cfg: &SaliencyConfig,
) -> Result<Calibration> {
    let indices = calibration_indices(ds.len(), fraction, seed)?;
    let scores = mean_saliencies(policy, ds, &indices, cfg)?;
    threshold_from_scores(indices, scores, quantile)
}

pub(crate) fn mean_saliencies(
    policy: &GaussianPolicy,
    ds: &Dataset,
    indices: &[usize],
    cfg: &SaliencyConfig,
) -> Result<Vec<f64>> {
    if !ds.env.has_grid() {
        return Err(Error::Config(format!(
            "{} observations carry no grid for saliency",
            ds.env
        )));
    }
    crate::parallel::install(|| {
        use rayon::prelude::*;
        let chunks: Vec<Vec<f64>> = indices
            .par_chunks(64)
            .map(|chunk| {
                let obs: Vec<f32> = chunk.iter().flat_map(|&i| ds.obs_row(i).iter().copied()).collect();
                let maps = saliency::saliency_maps(policy, &obs, chunk.len(), cfg)?;
                Ok(maps.iter().map(|m| saliency::mean_saliency(m)).collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    })
}
