//! Toy control environments, scripted experts, rollouts and metrics.

pub mod cartpole;
pub mod grid_drive;

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cartpole::{CartpoleBalanceEnv, CartpoleConfig};
pub use grid_drive::{GridDriveConfig, GridDriveEnv, GRID, GRID_CELLS};

use crate::error::{Error, Result};
use crate::parallel;
use crate::policy::GaussianPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Cartpole,
    GridDrive,
    GridDriveLong,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Cartpole, EnvKind::GridDrive, EnvKind::GridDriveLong];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Cartpole => "cartpole",
            EnvKind::GridDrive => "grid-drive",
            EnvKind::GridDriveLong => "grid-drive-long",
        }
    }

    pub fn make(self) -> Env {
        let sim = match self {
            EnvKind::Cartpole => Sim::Cartpole(CartpoleBalanceEnv::new(CartpoleConfig::default())),
            EnvKind::GridDrive => Sim::GridDrive(GridDriveEnv::new(GridDriveConfig::default())),
            EnvKind::GridDriveLong => Sim::GridDrive(GridDriveEnv::new(GridDriveConfig::long())),
        };
        Env { kind: self, sim }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::Cartpole => CartpoleBalanceEnv::OBS_DIM,
            _ => GridDriveEnv::OBS_DIM,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::Cartpole => CartpoleBalanceEnv::ACTION_DIM,
            _ => GridDriveEnv::ACTION_DIM,
        }
    }

    /// Whether observations start with a 16×16 grid.
    pub fn has_grid(self) -> bool {
        self != EnvKind::Cartpole
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown env {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sim {
    Cartpole(CartpoleBalanceEnv),
    GridDrive(GridDriveEnv),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub reward: f32,
    pub done: bool,
    pub success: bool,
    pub collision: bool,
}

/// An environment instance. Cheap to clone; each episode works on a copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    pub kind: EnvKind,
    pub sim: Sim,
}

impl Env {
    pub fn obs_dim(&self) -> usize {
        self.kind.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.kind.action_dim()
    }

    pub fn max_steps(&self) -> usize {
        match &self.sim {
            Sim::Cartpole(e) => e.cfg.max_steps,
            Sim::GridDrive(e) => e.cfg.max_steps,
        }
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match &mut self.sim {
            Sim::Cartpole(e) => e.reset(rng),
            Sim::GridDrive(e) => e.reset(rng),
        }
        self.observe()
    }

    pub fn observe(&self) -> Vec<f32> {
        match &self.sim {
            Sim::Cartpole(e) => e.observe(),
            Sim::GridDrive(e) => e.observe(),
        }
    }

    pub fn state(&self) -> Vec<f32> {
        match &self.sim {
            Sim::Cartpole(e) => e.state.iter().map(|&v| v as f32).collect(),
            Sim::GridDrive(e) => e.state(),
        }
    }

    pub fn step(&mut self, action: &[f32]) -> StepInfo {
        match &mut self.sim {
            Sim::Cartpole(e) => {
                let (reward, done, success) = e.step(action);
                StepInfo {
                    reward,
                    done,
                    success,
                    collision: false,
                }
            }
            Sim::GridDrive(e) => {
                let (reward, done, success, collision) = e.step(action);
                StepInfo {
                    reward,
                    done,
                    success,
                    collision,
                }
            }
        }
    }

    pub fn expert_action(&self) -> Vec<f32> {
        match &self.sim {
            Sim::Cartpole(e) => e.expert_action(),
            Sim::GridDrive(e) => e.expert_action(),
        }
    }
}

/// Anything that maps observations to actions inside a rollout.
pub trait Controller: Sync {
    fn id(&self) -> String;

    fn act(&self, env: &Env, obs: &[f32], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f32>>;

    fn obs_dim(&self) -> Option<usize> {
        None
    }
}

/// The privileged scripted controller of each environment.
#[derive(Debug, Clone, Copy, Default)]
pub struct Expert;

impl Controller for Expert {
    fn id(&self) -> String {
        "expert".into()
    }

    fn act(&self, env: &Env, _: &[f32], _: bool, _: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        Ok(env.expert_action())
    }
}

impl Controller for GaussianPolicy {
    fn id(&self) -> String {
        if self.meta.provenance.is_empty() {
            "policy".into()
        } else {
            self.meta.provenance.clone()
        }
    }

    fn act(&self, _: &Env, obs: &[f32], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        self.sample(obs, deterministic, rng)
    }

    fn obs_dim(&self) -> Option<usize> {
        Some(GaussianPolicy::obs_dim(self))
    }
}

/// Wraps a controller under a different id.
pub struct Named<'a, C: ?Sized>(pub &'a C, pub String);

impl<C: Controller + ?Sized> Controller for Named<'_, C> {
    fn id(&self) -> String {
        self.1.clone()
    }

    fn act(&self, env: &Env, obs: &[f32], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        self.0.act(env, obs, deterministic, rng)
    }

    fn obs_dim(&self) -> Option<usize> {
        self.0.obs_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Expert,
    FpPolicy,
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    /// Simulator state before the action.
    pub state: Vec<f32>,
    pub obs: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub done: bool,
    pub collision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub seed: u64,
    pub env: EnvKind,
    pub policy_id: String,
    pub source: Source,
    pub steps: Vec<Step>,
    #[serde(rename = "return")]
    pub ret: f64,
    pub success: bool,
    pub collisions: u32,
    /// Simulator state after the last step.
    pub final_state: Vec<f32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn recomputed_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward as f64).sum()
    }
}

/// Runs one episode. The episode RNG is seeded with `seed` and drives both
/// the reset and any action sampling.
pub fn rollout(
    ctrl: &(impl Controller + ?Sized),
    env: &Env,
    seed: u64,
    max_steps: usize,
    deterministic: bool,
    source: Source,
) -> Result<Trajectory> {
    if let Some(d) = ctrl.obs_dim() {
        if d != env.obs_dim() {
            return Err(Error::shape("rollout", &[d], &[env.obs_dim()]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = env.clone();
    let mut obs = env.reset(&mut rng);
    let mut steps = Vec::new();
    let mut ret = 0.0f64;
    let mut success = false;
    let mut collisions = 0;
    let limit = max_steps.min(env.max_steps());
    for _ in 0..limit {
        let state = env.state();
        let action = ctrl.act(&env, &obs, deterministic, &mut rng)?;
        if action.len() != env.action_dim() {
            return Err(Error::shape("rollout action", &[env.action_dim()], &[action.len()]));
        }
        let info = env.step(&action);
        ret += info.reward as f64;
        collisions += info.collision as u32;
        success = info.success;
        steps.push(Step {
            state,
            obs,
            action,
            reward: info.reward,
            done: info.done,
            collision: info.collision,
        });
        if info.done {
            break;
        }
        obs = env.observe();
    }
    Ok(Trajectory {
        seed,
        env: env.kind,
        policy_id: ctrl.id(),
        source,
        steps,
        ret,
        success,
        collisions,
        final_state: env.state(),
    })
}

/// Episodes `base_seed + i` for `i < n`, run in parallel, returned in index
/// order.
pub fn collect(
    ctrl: &(impl Controller + ?Sized),
    env: &Env,
    n: usize,
    base_seed: u64,
    deterministic: bool,
    source: Source,
) -> Result<Vec<Trajectory>> {
    let max = env.max_steps();
    parallel::install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| rollout(ctrl, env, base_seed + i as u64, max, deterministic, source))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub avg_return: f64,
    pub return_std: f64,
    pub success_rate: f64,
    pub collisions_per_episode: f64,
    pub episodes: usize,
}

impl Metrics {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::Contract("metrics need at least one episode".into()));
        }
        let n = trajs.len() as f64;
        let mean = trajs.iter().map(|t| t.ret).sum::<f64>() / n;
        let var = trajs.iter().map(|t| (t.ret - mean).powi(2)).sum::<f64>() / n;
        let successes = trajs.iter().filter(|t| t.success).count();
        let collisions: u64 = trajs.iter().map(|t| t.collisions as u64).sum();
        Ok(Self {
            avg_return: mean,
            return_std: var.sqrt(),
            success_rate: successes as f64 / n,
            collisions_per_episode: collisions as f64 / n,
            episodes: trajs.len(),
        })
    }
}

pub fn evaluate(
    ctrl: &(impl Controller + ?Sized),
    env: &Env,
    n_episodes: usize,
    base_seed: u64,
    deterministic: bool,
) -> Result<Metrics> {
    if n_episodes == 0 {
        return Err(Error::Contract("n_episodes must be at least 1".into()));
    }
    Metrics::from_trajectories(&collect(
        ctrl,
        env,
        n_episodes,
        base_seed,
        deterministic,
        Source::Policy,
    )?)
}

pub fn write_jsonl(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::json("trajectory", e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_horizon_is_empty() {
        let env = EnvKind::Cartpole.make();
        let t = rollout(&Expert, &env, 0, 0, true, Source::Expert).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.ret, 0.0);
    }

    #[test]
    fn same_seed_same_bytes() {
        for kind in [EnvKind::Cartpole, EnvKind::GridDrive] {
            let env = kind.make();
            let p = GaussianPolicy::new(
                &[kind.obs_dim(), 16, kind.action_dim()],
                -0.5,
                &mut ChaCha8Rng::seed_from_u64(1),
            )
            .unwrap();
            let a = rollout(&p, &env, 11, 200, false, Source::Policy).unwrap();
            let b = rollout(&p, &env, 11, 200, false, Source::Policy).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn expert_survives_cartpole() {
        let env = EnvKind::Cartpole.make();
        let trajs = collect(&Expert, &env, 100, 0, true, Source::Expert).unwrap();
        let m = Metrics::from_trajectories(&trajs).unwrap();
        assert!(m.success_rate >= 0.95, "{m:?}");
        assert_eq!(m.avg_return, 500.0);
    }

    #[test]
    fn expert_succeeds_on_grid_drive() {
        for kind in [EnvKind::GridDrive, EnvKind::GridDriveLong] {
            let m = evaluate(&Expert, &kind.make(), 100, 0, true).unwrap();
            assert!(m.success_rate >= 0.95, "{kind}: {m:?}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = GaussianPolicy::new(&[3, 4, 1], 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(rollout(&p, &EnvKind::Cartpole.make(), 0, 10, true, Source::Policy).is_err());
    }

    #[test]
    fn metrics_arithmetic() {
        let env = EnvKind::Cartpole.make();
        let t = rollout(&Expert, &env, 0, 10, true, Source::Expert).unwrap();
        let m = Metrics::from_trajectories(std::slice::from_ref(&t)).unwrap();
        assert!(m.success_rate == 0.0 || m.success_rate == 1.0);
        assert_eq!(m.avg_return, t.ret);
        assert_eq!(m.return_std, 0.0);
        assert!(evaluate(&Expert, &env, 0, 0, true).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let trajs = collect(&Expert, &EnvKind::GridDrive.make(), 3, 5, true, Source::Expert).unwrap();
        write_jsonl(&path, &trajs).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), trajs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn env_names_parse() {
        for k in EnvKind::ALL {
            assert_eq!(k.name().parse::<EnvKind>().unwrap(), k);
        }
        assert!("carla".parse::<EnvKind>().is_err());
    }

    proptest! {
        #[test]
        fn f32_survives_json(bits in any::<u32>()) {
            let v = f32::from_bits(bits);
            prop_assume!(v.is_finite());
            let back: f32 = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}
