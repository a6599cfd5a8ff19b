//! One function per subcommand. Each resolves its config (defaults, then
//! the `--config` file, then flags), writes it to the output directory, runs
//! and writes machine-readable results next to it.

use std::path::{Path, PathBuf};

use ilq_core::envs::{self, collect, evaluate, read_jsonl, Controller, EnvKind, Expert, Metrics, Named, Source};
use ilq_core::imitation::{ptq_rtn, train_bc, train_qail, train_qail_with, BcConfig, Dataset, QailConfig};
use ilq_core::kernels::{self, export_packed, DeployedLayer, DeployedPolicy};
use ilq_core::policy::{self, GaussianPolicy};
use ilq_core::qarl::{train_qarl, QarlConfig};
use ilq_core::saliency::{attdiv_batch, saliency_maps, SaliencyConfig, SaliencyMap};
use ilq_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::args::{self, Command, Common};
use crate::experiments::{self, Settings};
use crate::output::{load_config, prepare, say, table, write_json, write_jsonl};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const PACKED_FILE: &str = "packed.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "log.jsonl";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::CollectExpert(a) => collect_expert(&a),
        Command::TrainFp(a) => train_fp(&a),
        Command::CollectFp(a) => collect_fp(&a),
        Command::Quantize(a) => quantize(&a),
        Command::Qail(a) => qail(&a),
        Command::Qarl(a) => qarl(&a),
        Command::Eval(a) => eval(&a),
        Command::Saliency(a) => saliency(&a),
        Command::Attdiv(a) => attdiv(&a),
        Command::Bench(a) => bench(&a),
        Command::Reproduce(a) => reproduce(&a),
    }
}

/// Evaluation protocol used after training commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub episodes: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 20,
            seed: 777_000,
            deterministic: true,
        }
    }
}

impl EvalSettings {
    pub fn run(&self, ctrl: &(impl Controller + ?Sized), env: &envs::Env) -> Result<Metrics> {
        evaluate(ctrl, env, self.episodes, self.seed, self.deterministic)
    }
}

fn required(v: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    v.clone()
        .ok_or_else(|| Error::Config(format!("missing {what}: pass it as a flag or in the config file")))
}

fn config<T: for<'de> Deserialize<'de> + Default>(c: &Common) -> Result<T> {
    load_config(c.config.as_deref())
}

pub fn policy_env(p: &GaussianPolicy) -> Result<EnvKind> {
    p.meta
        .env
        .parse()
        .map_err(|_| Error::Config(format!("checkpoint does not name a known env (found {:?})", p.meta.env)))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let trajs = read_jsonl(path)?;
    let env = trajs
        .first()
        .map(|t| t.env)
        .ok_or_else(|| Error::Config(format!("{}: dataset is empty", path.display())))?;
    Dataset::from_trajectories(env, &trajs)
}

fn metrics_row(name: &str, m: &Metrics) -> Vec<String> {
    vec![
        name.to_string(),
        format!("{:.2}", m.avg_return),
        format!("{:.2}", m.return_std),
        format!("{:.3}", m.success_rate),
        format!("{:.3}", m.collisions_per_episode),
        m.episodes.to_string(),
    ]
}

const METRIC_HEADERS: [&str; 6] = [
    "policy",
    "avg_return",
    "return_std",
    "success",
    "collisions",
    "episodes",
];

fn print_metrics(c: &Common, rows: &[(String, Metrics)]) {
    let rows: Vec<Vec<String>> = rows.iter().map(|(n, m)| metrics_row(n, m)).collect();
    say!(c, "{}", table(&METRIC_HEADERS, &rows));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectExpertConfig {
    pub env: EnvKind,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for CollectExpertConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Cartpole,
            episodes: 20,
            seed: 0,
        }
    }
}

fn collect_expert(a: &args::CollectExpertArgs) -> Result<()> {
    let mut cfg: CollectExpertConfig = config(&a.common)?;
    cfg.env = a.env.unwrap_or(cfg.env);
    cfg.episodes = a.episodes.unwrap_or(cfg.episodes);
    cfg.seed = a.common.seed.unwrap_or(cfg.seed);
    let out = &a.common.out;
    prepare(out, "collect-expert", &cfg)?;
    let env = cfg.env.make();
    let trajs = collect(&Expert, &env, cfg.episodes, cfg.seed, true, Source::Expert)?;
    envs::write_jsonl(out.join(DATASET_FILE), &trajs)?;
    if trajs.is_empty() {
        say!(a.common, "collected 0 episodes");
        return Ok(());
    }
    let m = Metrics::from_trajectories(&trajs)?;
    write_json(&out.join(METRICS_FILE), &m)?;
    print_metrics(&a.common, &[("expert".into(), m)]);
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFpConfig {
    pub dataset: Option<PathBuf>,
    pub bc: BcConfig,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpReport {
    pub fp: Metrics,
    pub expert: Metrics,
    /// `fp.avg_return / expert.avg_return`
    pub return_ratio: f64,
}

fn train_fp(a: &args::TrainFpArgs) -> Result<()> {
    let mut cfg: TrainFpConfig = config(&a.common)?;
    cfg.dataset = a.dataset.clone().or(cfg.dataset);
    cfg.bc.steps = a.steps.unwrap_or(cfg.bc.steps);
    cfg.bc.seed = a.common.seed.unwrap_or(cfg.bc.seed);
    let out = &a.common.out;
    prepare(out, "train-fp", &cfg)?;
    let ds = load_dataset(&required(&cfg.dataset, "dataset")?)?;
    let (fp, log) = train_bc(&ds, &cfg.bc, Some(&out.join(POLICY_FILE)))?;
    write_jsonl(&out.join(LOG_FILE), &log)?;
    let env = ds.env.make();
    let report = FpReport {
        fp: cfg.eval.run(&fp, &env)?,
        expert: cfg.eval.run(&Expert, &env)?,
        return_ratio: 0.0,
    };
    let report = FpReport {
        return_ratio: report.fp.avg_return / report.expert.avg_return,
        ..report
    };
    write_json(&out.join(METRICS_FILE), &report)?;
    print_metrics(
        &a.common,
        &[
            ("expert".into(), report.expert.clone()),
            ("fp".into(), report.fp.clone()),
        ],
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectFpConfig {
    pub policy: Option<PathBuf>,
    pub episodes: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for CollectFpConfig {
    fn default() -> Self {
        Self {
            policy: None,
            episodes: 40,
            seed: 50_000,
            deterministic: true,
        }
    }
}

fn collect_fp(a: &args::CollectFpArgs) -> Result<()> {
    let mut cfg: CollectFpConfig = config(&a.common)?;
    cfg.policy = a.policy.clone().or(cfg.policy);
    cfg.episodes = a.episodes.unwrap_or(cfg.episodes);
    cfg.seed = a.common.seed.unwrap_or(cfg.seed);
    cfg.deterministic &= !a.stochastic;
    let out = &a.common.out;
    prepare(out, "collect-fp", &cfg)?;
    let fp = policy::load(required(&cfg.policy, "policy")?)?;
    let env = policy_env(&fp)?.make();
    let named = Named(&fp, "fp".into());
    let trajs = collect(
        &named,
        &env,
        cfg.episodes,
        cfg.seed,
        cfg.deterministic,
        Source::FpPolicy,
    )?;
    envs::write_jsonl(out.join(DATASET_FILE), &trajs)?;
    if trajs.is_empty() {
        say!(a.common, "collected 0 episodes");
        return Ok(());
    }
    let m = Metrics::from_trajectories(&trajs)?;
    write_json(&out.join(METRICS_FILE), &m)?;
    print_metrics(&a.common, &[("fp".into(), m)]);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeConfig {
    pub policy: Option<PathBuf>,
    pub bits: u8,
    pub calib_seed: u64,
    pub eval: EvalSettings,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self {
            policy: None,
            bits: 4,
            calib_seed: 90_000,
            eval: EvalSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub metrics: Metrics,
    /// Hidden layers only; the output layer stays in `f32`.
    pub packed_weight_bytes: usize,
    pub fp32_weight_bytes: usize,
}

fn quantize(a: &args::QuantizeArgs) -> Result<()> {
    let mut cfg: QuantizeConfig = config(&a.common)?;
    cfg.policy = a.policy.clone().or(cfg.policy);
    cfg.bits = a.bits.unwrap_or(cfg.bits);
    cfg.calib_seed = a.common.seed.unwrap_or(cfg.calib_seed);
    let out = &a.common.out;
    prepare(out, "quantize", &cfg)?;
    let fp = policy::load(required(&cfg.policy, "policy")?)?;
    let env = policy_env(&fp)?.make();
    let q = ptq_rtn(&fp, cfg.bits, &env, cfg.calib_seed)?;
    policy::save(&q, out.join(POLICY_FILE))?;
    export_packed(&q, out.join(PACKED_FILE))?;
    let deployed = DeployedPolicy::from_policy(&q)?;
    let (packed_weight_bytes, fp32_weight_bytes) = deployed
        .layers
        .iter()
        .filter_map(|l| match l {
            DeployedLayer::Quantized { weights, .. } => Some((weights.packed_bytes(), weights.fp32_bytes())),
            DeployedLayer::Float { .. } => None,
        })
        .fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
    let report = QuantizeReport {
        metrics: cfg.eval.run(&q, &env)?,
        packed_weight_bytes,
        fp32_weight_bytes,
    };
    write_json(&out.join(METRICS_FILE), &report)?;
    print_metrics(&a.common, &[(q.id(), report.metrics.clone())]);
    say!(
        a.common,
        "hidden-layer weights: {} bytes packed, {} bytes as f32",
        report.packed_weight_bytes,
        report.fp32_weight_bytes
    );
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QailCmdConfig {
    /// Full-precision teacher.
    pub policy: Option<PathBuf>,
    /// Expert dataset.
    pub dataset: Option<PathBuf>,
    /// Rollouts of the teacher; collected per `qail.fp_*` when absent.
    pub fp_dataset: Option<PathBuf>,
    pub qail: QailConfig,
    pub eval: EvalSettings,
}

fn qail(a: &args::QailArgs) -> Result<()> {
    let mut cfg: QailCmdConfig = config(&a.common)?;
    cfg.policy = a.policy.clone().or(cfg.policy);
    cfg.dataset = a.dataset.clone().or(cfg.dataset);
    cfg.fp_dataset = a.fp_dataset.clone().or(cfg.fp_dataset);
    let q = &mut cfg.qail;
    q.bits = a.bits.unwrap_or(q.bits);
    q.lambda = a.lambda.map(|l| l as f32).unwrap_or(q.lambda);
    q.wqbc_enabled |= a.wqbc;
    q.steps = a.steps.unwrap_or(q.steps);
    q.seed = a.common.seed.unwrap_or(q.seed);
    q.validate()?;
    let out = &a.common.out;
    prepare(out, "qail", &cfg)?;
    let fp = policy::load(required(&cfg.policy, "policy")?)?;
    let ds = load_dataset(&required(&cfg.dataset, "dataset")?)?;
    let env = policy_env(&fp)?;
    if env != ds.env {
        return Err(Error::Config(format!(
            "policy was trained on {env}, dataset is {}",
            ds.env
        )));
    }
    let env = env.make();
    let ckpt = out.join(POLICY_FILE);
    let run = match &cfg.fp_dataset {
        Some(path) => train_qail_with(&fp, &ds, &load_dataset(path)?, &env, &cfg.qail, Some(&ckpt))?,
        None => train_qail(&fp, &ds, &env, &cfg.qail, Some(&ckpt))?,
    };
    write_jsonl(&out.join(LOG_FILE), &run.log)?;
    let m = cfg.eval.run(&run.policy, &env)?;
    write_json(&out.join(METRICS_FILE), &m)?;
    print_metrics(&a.common, &[(run.policy.id(), m)]);
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QarlCmdConfig {
    pub policy: Option<PathBuf>,
    pub qarl: QarlConfig,
    pub eval: EvalSettings,
}

fn qarl(a: &args::QarlArgs) -> Result<()> {
    let mut cfg: QarlCmdConfig = config(&a.common)?;
    cfg.policy = a.policy.clone().or(cfg.policy);
    let q = &mut cfg.qarl;
    q.bits = a.bits.unwrap_or(q.bits);
    q.lambda = a.lambda.map(|l| l as f32).unwrap_or(q.lambda);
    q.iterations = a.iterations.unwrap_or(q.iterations);
    q.seed = a.common.seed.unwrap_or(q.seed);
    q.validate()?;
    let out = &a.common.out;
    prepare(out, "qarl", &cfg)?;
    let fp = policy::load(required(&cfg.policy, "policy")?)?;
    let env = policy_env(&fp)?.make();
    let run = train_qarl(&fp, &env, &cfg.qarl, Some(&out.join(POLICY_FILE)))?;
    write_jsonl(&out.join(LOG_FILE), &run.log)?;
    let m = cfg.eval.run(&run.policy, &env)?;
    write_json(&out.join(METRICS_FILE), &m)?;
    print_metrics(&a.common, &[(run.policy.id(), m)]);
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub policies: Vec<PathBuf>,
    pub expert: bool,
    pub env: Option<EnvKind>,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub metrics: Metrics,
}

fn eval(a: &args::EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = config(&a.common)?;
    if !a.policies.is_empty() {
        cfg.policies = a.policies.clone();
    }
    cfg.expert |= a.expert;
    cfg.env = a.env.or(cfg.env);
    cfg.eval.episodes = a.episodes.unwrap_or(cfg.eval.episodes);
    cfg.eval.seed = a.common.seed.unwrap_or(cfg.eval.seed);
    let out = &a.common.out;
    prepare(out, "eval", &cfg)?;
    let policies = cfg
        .policies
        .iter()
        .map(|p| Ok((p.clone(), policy::load(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut env = cfg.env;
    for (path, p) in &policies {
        let e = policy_env(p)?;
        match env {
            Some(k) if k != e => {
                return Err(Error::Config(format!(
                    "{} was trained on {e}, expected {k}",
                    path.display()
                )));
            }
            _ => env = Some(e),
        }
    }
    let env = env
        .ok_or_else(|| Error::Config("nothing to evaluate: pass --policy or --expert with --env".into()))?
        .make();
    let mut rows = Vec::new();
    if cfg.expert {
        rows.push(EvalRow {
            name: "expert".into(),
            metrics: cfg.eval.run(&Expert, &env)?,
        });
    }
    for (_, p) in &policies {
        rows.push(EvalRow {
            name: p.id(),
            metrics: cfg.eval.run(p, &env)?,
        });
    }
    write_json(&out.join(METRICS_FILE), &rows)?;
    print_metrics(
        &a.common,
        &rows
            .iter()
            .map(|r| (r.name.clone(), r.metrics.clone()))
            .collect::<Vec<_>>(),
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyCmdConfig {
    pub policy: Option<PathBuf>,
    pub states: usize,
    pub seed: u64,
    pub saliency: SaliencyConfig,
}

impl Default for SaliencyCmdConfig {
    fn default() -> Self {
        Self {
            policy: None,
            states: 8,
            seed: 0,
            saliency: SaliencyConfig::default(),
        }
    }
}

fn saliency(a: &args::SaliencyArgs) -> Result<()> {
    let mut cfg: SaliencyCmdConfig = config(&a.common)?;
    cfg.policy = a.policy.clone().or(cfg.policy);
    cfg.states = a.states.unwrap_or(cfg.states);
    cfg.seed = a.common.seed.unwrap_or(cfg.seed);
    let out = &a.common.out;
    prepare(out, "saliency", &cfg)?;
    let p = policy::load(required(&cfg.policy, "policy")?)?;
    let env = policy_env(&p)?.make();
    let (obs, ids) = experiments::probe_states(&env, cfg.states, cfg.seed)?;
    let maps: Vec<SaliencyMap> = saliency_maps(&p, &obs, cfg.states, &cfg.saliency)?
        .into_iter()
        .zip(ids)
        .map(|(values, observation_id)| SaliencyMap {
            values,
            policy_id: p.id(),
            observation_id,
        })
        .collect();
    write_jsonl(&out.join("saliency.jsonl"), &maps)?;
    let rows: Vec<Vec<String>> = maps
        .iter()
        .map(|m| {
            let max = m.values.iter().copied().fold(0.0, f64::max);
            vec![
                m.observation_id.clone(),
                format!("{:.3e}", m.mean()),
                format!("{max:.3e}"),
            ]
        })
        .collect();
    say!(a.common, "{}", table(&["state", "mean", "max"], &rows));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttdivConfig {
    pub policy: Option<PathBuf>,
    pub fp: Option<PathBuf>,
    pub states: usize,
    pub seed: u64,
    pub saliency: SaliencyConfig,
}

impl Default for AttdivConfig {
    fn default() -> Self {
        Self {
            policy: None,
            fp: None,
            states: 50,
            seed: 0,
            saliency: SaliencyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttdivReport {
    pub policy_id: String,
    pub fp_id: String,
    pub mean: f64,
    pub per_state: Vec<f64>,
}

fn attdiv(a: &args::AttdivArgs) -> Result<()> {
    let mut cfg: AttdivConfig = config(&a.common)?;
    cfg.policy = a.policy.clone().or(cfg.policy);
    cfg.fp = a.fp.clone().or(cfg.fp);
    cfg.states = a.states.unwrap_or(cfg.states);
    cfg.seed = a.common.seed.unwrap_or(cfg.seed);
    let out = &a.common.out;
    prepare(out, "attdiv", &cfg)?;
    let q = policy::load(required(&cfg.policy, "policy")?)?;
    let fp = policy::load(required(&cfg.fp, "fp")?)?;
    let env = policy_env(&fp)?;
    if policy_env(&q)? != env {
        return Err(Error::Config("policies were trained on different envs".into()));
    }
    let (obs, _) = experiments::probe_states(&env.make(), cfg.states, cfg.seed)?;
    let per_state = attdiv_batch(&q, &fp, &obs, cfg.states, &cfg.saliency)?;
    let report = AttdivReport {
        policy_id: q.id(),
        fp_id: fp.id(),
        mean: per_state.iter().sum::<f64>() / per_state.len().max(1) as f64,
        per_state,
    };
    write_json(&out.join(METRICS_FILE), &report)?;
    say!(
        a.common,
        "{}",
        table(
            &["policy", "reference", "states", "mean_attdiv"],
            &[vec![
                report.policy_id.clone(),
                report.fp_id.clone(),
                report.per_state.len().to_string(),
                format!("{:.6}", report.mean),
            ]],
        )
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub bits: u8,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            m: 1024,
            n: 1024,
            k: 1024,
            bits: 8,
            reps: kernels::MIN_REPS,
            seed: 0,
        }
    }
}

fn bench(a: &args::BenchArgs) -> Result<()> {
    let mut cfg: BenchConfig = config(&a.common)?;
    cfg.m = a.m.unwrap_or(cfg.m);
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.k = a.k.unwrap_or(cfg.k);
    cfg.bits = a.bits.unwrap_or(cfg.bits);
    cfg.reps = a.reps.unwrap_or(cfg.reps);
    cfg.seed = a.common.seed.unwrap_or(cfg.seed);
    let out = &a.common.out;
    prepare(out, "bench", &cfg)?;
    let r = kernels::bench(cfg.m, cfg.n, cfg.k, cfg.bits, cfg.reps, cfg.seed)?;
    write_json(&out.join(METRICS_FILE), &r)?;
    let ms = |ns: u64| format!("{:.3}", ns as f64 / 1e6);
    say!(
        a.common,
        "{}",
        table(
            &["kernel", "median_ms", "p10_ms", "p90_ms"],
            &[
                vec![
                    format!("w{0}a{0} packed", r.bits),
                    ms(r.median_ns),
                    ms(r.p10_ns),
                    ms(r.p90_ns)
                ],
                vec![
                    "fp32 naive".into(),
                    ms(r.fp32_median_ns),
                    ms(r.fp32_p10_ns),
                    ms(r.fp32_p90_ns)
                ],
            ],
        )
    );
    say!(
        a.common,
        "speedup {:.2}x, weights {} bytes packed vs {} bytes f32, {} threads",
        r.speedup,
        r.packed_weight_bytes,
        r.fp32_weight_bytes,
        r.threads
    );
    Ok(())
}

fn reproduce(a: &args::ReproduceArgs) -> Result<()> {
    let mut cfg: Settings = config(&a.common)?;
    if let Some(s) = a.common.seed {
        cfg.base_seed = s;
    }
    let out = &a.common.out;
    prepare(out, "reproduce", &cfg)?;
    let report = experiments::run(&cfg, &a.only, out, |c| say!(a.common, "{}", c.line()))?;
    write_json(&out.join("report.json"), &report)?;
    let passed = report.iter().filter(|c| c.pass).count();
    say!(a.common, "{passed}/{} criteria passed", report.len());
    Ok(())
}
