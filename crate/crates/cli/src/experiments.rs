//! The acceptance experiments behind `ilq reproduce`: kernel speed, the
//! cartpole return trend, the wQBC mechanism, saliency divergence, QARL and
//! end-to-end determinism.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ilq_core::envs::{collect, read_jsonl, rollout, write_jsonl, Env, EnvKind, Expert, Source};
use ilq_core::imitation::{
    calibrate_threshold, nearest_rank, ptq_rtn, train_bc, train_qail, wqbc_alpha, BcConfig, Dataset, QailConfig,
};
use ilq_core::kernels;
use ilq_core::policy::{self, GaussianPolicy};
use ilq_core::qarl::{ppo_objective, train_qarl, QarlConfig};
use ilq_core::saliency::attdiv_batch;
use ilq_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::Cli;
use crate::commands::{self, BenchConfig, EvalSettings, METRICS_FILE};

/// One environment's data and training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Task {
    pub expert_episodes: usize,
    pub bc: BcConfig,
    pub qail: QailConfig,
}

impl Default for Task {
    fn default() -> Self {
        Self {
            expert_episodes: 20,
            bc: BcConfig {
                hidden: vec![64, 64],
                ..BcConfig::default()
            },
            qail: QailConfig {
                fp_episodes: 20,
                ..QailConfig::default()
            },
        }
    }
}

/// Budget of the small pipeline run twice by the determinism check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub expert_episodes: usize,
    pub fp_episodes: usize,
    pub bc_steps: usize,
    pub qail_steps: usize,
    pub eval_episodes: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            expert_episodes: 4,
            fp_episodes: 4,
            bc_steps: 300,
            qail_steps: 200,
            eval_episodes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    /// Added to every per-run seed.
    pub base_seed: u64,
    pub seeds: usize,
    pub bits: u8,
    pub eval: EvalSettings,
    pub cartpole: Task,
    pub grid: Task,
    pub grid_long: Task,
    pub qarl: QarlConfig,
    pub attdiv_states: usize,
    pub probe_seed: u64,
    pub bench: BenchConfig,
    pub pipeline: PipelineSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            base_seed: 0,
            seeds: 5,
            bits: 4,
            eval: EvalSettings::default(),
            cartpole: Task::default(),
            grid: Task {
                expert_episodes: 40,
                qail: QailConfig {
                    fp_episodes: 40,
                    ..QailConfig::default()
                },
                ..Task::default()
            },
            grid_long: Task {
                expert_episodes: 20,
                qail: QailConfig {
                    fp_episodes: 20,
                    steps: 1500,
                    ..QailConfig::default()
                },
                ..Task::default()
            },
            qarl: QarlConfig {
                iterations: 10,
                episodes_per_iter: 4,
                ..QarlConfig::default()
            },
            attdiv_states: 50,
            probe_seed: 5_000,
            bench: BenchConfig::default(),
            pipeline: PipelineSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// Soft checks are reported but do not decide the criterion.
    pub hard: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub id: u8,
    pub title: String,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub seconds: f64,
    pub data: serde_json::Value,
}

impl CriterionReport {
    pub fn new(id: u8, title: &str, checks: Vec<Check>, data: serde_json::Value, started: Instant) -> Self {
        Self {
            id,
            title: title.into(),
            pass: checks.iter().filter(|c| c.hard).all(|c| c.pass),
            checks,
            seconds: started.elapsed().as_secs_f64(),
            data,
        }
    }

    /// `criterion 6 (…): PASS [a ok, b FAIL, c soft-ok] 12.3s`
    pub fn line(&self) -> String {
        let checks: Vec<String> = self
            .checks
            .iter()
            .map(|c| {
                let verdict = match (c.pass, c.hard) {
                    (true, true) => "ok",
                    (false, true) => "FAIL",
                    (true, false) => "soft-ok",
                    (false, false) => "soft-miss",
                };
                format!("{} {verdict}", c.name)
            })
            .collect();
        format!(
            "criterion {} ({}): {} [{}] {:.1}s",
            self.id,
            self.title,
            if self.pass { "PASS" } else { "FAIL" },
            checks.join(", "),
            self.seconds
        )
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Adds a hard wall-clock check.
    pub fn with_budget(mut self, seconds: f64) -> Self {
        self.checks
            .push(check(&format!("runtime < {seconds}s"), self.seconds < seconds));
        self.pass = self.checks.iter().filter(|c| c.hard).all(|c| c.pass);
        self
    }
}

pub fn check(name: &str, pass: bool) -> Check {
    Check {
        name: name.into(),
        pass,
        hard: true,
    }
}

pub fn soft(name: &str, pass: bool) -> Check {
    Check {
        name: name.into(),
        pass,
        hard: false,
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// `n` mid-episode observations of seeded expert rollouts, with ids.
pub fn probe_states(env: &Env, n: usize, seed: u64) -> Result<(Vec<f32>, Vec<String>)> {
    let mut obs = Vec::with_capacity(n * env.obs_dim());
    let mut ids = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let t = rollout(&Expert, env, seed + i, env.max_steps(), true, Source::Expert)?;
        let k = t.len() / 2;
        let step = t
            .steps
            .get(k)
            .ok_or_else(|| Error::Contract(format!("probe rollout {} is empty", seed + i)))?;
        obs.extend_from_slice(&step.obs);
        ids.push(format!("seed{}-t{k}", seed + i));
    }
    Ok((obs, ids))
}

/// A trained teacher with the expert data it was cloned from.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub seed: u64,
    pub fp: GaussianPolicy,
    pub data: Dataset,
}

impl Settings {
    fn seed(&self, i: usize) -> u64 {
        self.base_seed + i as u64
    }

    fn eval_at(&self, seed: u64) -> EvalSettings {
        EvalSettings {
            seed: self.eval.seed + 1000 * seed,
            ..self.eval.clone()
        }
    }

    fn qail_cfg(&self, task: &Task, seed: u64, lambda: f32, wqbc: bool) -> QailConfig {
        QailConfig {
            bits: self.bits,
            lambda,
            wqbc_enabled: wqbc,
            seed,
            fp_seed: task.qail.fp_seed + 1000 * seed,
            ..task.qail.clone()
        }
    }

    pub fn teacher(&self, task: &Task, env: &Env, seed: u64) -> Result<Teacher> {
        let trajs = collect(&Expert, env, task.expert_episodes, 1000 * seed, true, Source::Expert)?;
        let data = Dataset::from_trajectories(env.kind, &trajs)?;
        let bc = BcConfig {
            seed,
            ..task.bc.clone()
        };
        let (fp, _) = train_bc(&data, &bc, None)?;
        Ok(Teacher { seed, fp, data })
    }
}

/// Trained teachers shared between criteria.
#[derive(Debug, Default)]
pub struct Lab {
    cartpole: Vec<Teacher>,
}

impl Lab {
    pub fn cartpole(&mut self, s: &Settings) -> Result<&[Teacher]> {
        if self.cartpole.is_empty() {
            let env = EnvKind::Cartpole.make();
            self.cartpole = (0..s.seeds)
                .map(|i| s.teacher(&s.cartpole, &env, s.seed(i)))
                .collect::<Result<_>>()?;
        }
        Ok(&self.cartpole)
    }
}

/// W8A8 speedup at the configured shape and the 4-bit storage ratio.
pub fn kernel_speed(s: &Settings) -> Result<CriterionReport> {
    let t = Instant::now();
    let b = &s.bench;
    let r8 = kernels::bench(b.m, b.n, b.k, 8, b.reps, b.seed)?;
    let r4 = kernels::bench(b.m, b.n, b.k, 4, b.reps, b.seed)?;
    let checks = vec![
        check("w8a8 speedup >= 1.5", r8.speedup >= 1.5),
        check(
            "4-bit bytes = fp32/8",
            r4.packed_weight_bytes * 8 == r4.fp32_weight_bytes,
        ),
    ];
    let data = json!({ "w8a8": r8, "w4a4": r4 });
    Ok(CriterionReport::new(5, "packed kernel speed", checks, data, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub seed: u64,
    pub fp: f64,
    pub rtn: f64,
    pub qail: f64,
    pub qail_qbc: f64,
}

/// Cartpole average return of FP, RTN, QAIL and QAIL+QBC at `bits`.
pub fn cartpole_trend(s: &Settings, lab: &mut Lab) -> Result<CriterionReport> {
    let t = Instant::now();
    let env = EnvKind::Cartpole.make();
    let task = s.cartpole.clone();
    let mut rows = Vec::new();
    for teacher in lab.cartpole(s)? {
        let seed = teacher.seed;
        let ev = s.eval_at(seed);
        let rtn = ptq_rtn(&teacher.fp, s.bits, &env, task.qail.calib_seed)?;
        let qail = train_qail(
            &teacher.fp,
            &teacher.data,
            &env,
            &s.qail_cfg(&task, seed, 0.0, false),
            None,
        )?;
        let qbc = train_qail(
            &teacher.fp,
            &teacher.data,
            &env,
            &s.qail_cfg(&task, seed, task.qail.lambda, false),
            None,
        )?;
        rows.push(TrendRow {
            seed,
            fp: ev.run(&teacher.fp, &env)?.avg_return,
            rtn: ev.run(&rtn, &env)?.avg_return,
            qail: ev.run(&qail.policy, &env)?.avg_return,
            qail_qbc: ev.run(&qbc.policy, &env)?.avg_return,
        });
    }
    let col = |f: fn(&TrendRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
    let (fp, rtn, qail, qbc) = (col(|r| r.fp), col(|r| r.rtn), col(|r| r.qail), col(|r| r.qail_qbc));
    let checks = vec![
        check("qail+qbc >= qail >= rtn", qbc >= qail && qail >= rtn),
        check("qail+qbc >= 95% fp", qbc >= 0.95 * fp),
        check("rtn <= 80% fp", rtn <= 0.8 * fp),
    ];
    let data = json!({
        "bits": s.bits,
        "median": { "fp": fp, "rtn": rtn, "qail": qail, "qail_qbc": qbc },
        "seeds": rows,
    });
    Ok(CriterionReport::new(6, "cartpole return trend", checks, data, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WqbcRow {
    pub seed: u64,
    pub fp: f64,
    pub qail_qbc: f64,
    pub qail_wqbc: f64,
    pub dataset_len: usize,
    /// `(threshold, boosted)` of every calibration during training.
    pub calibrations: Vec<(f64, usize)>,
}

/// Exact top-20% boosting, then QBC against wQBC on the long grid-drive
/// variant.
pub fn wqbc_mechanism(s: &Settings) -> Result<CriterionReport> {
    let t = Instant::now();
    let env = EnvKind::GridDriveLong.make();
    let task = &s.grid_long;
    let mut rows = Vec::new();
    let mut exact = None;
    for i in 0..s.seeds {
        let seed = s.seed(i);
        let teacher = s.teacher(task, &env, seed)?;
        let ev = s.eval_at(seed);
        let qbc = train_qail(
            &teacher.fp,
            &teacher.data,
            &env,
            &s.qail_cfg(task, seed, task.qail.lambda, false),
            None,
        )?;
        let wcfg = s.qail_cfg(task, seed, task.qail.lambda, true);
        let wqbc = train_qail(&teacher.fp, &teacher.data, &env, &wcfg, None)?;
        if exact.is_none() {
            exact = Some(boost_check(&qbc.policy, &teacher.data, &wcfg)?);
        }
        rows.push(WqbcRow {
            seed,
            fp: ev.run(&teacher.fp, &env)?.success_rate,
            qail_qbc: ev.run(&qbc.policy, &env)?.success_rate,
            qail_wqbc: ev.run(&wqbc.policy, &env)?.success_rate,
            dataset_len: wqbc.dataset_len,
            calibrations: wqbc.calibrations,
        });
    }
    let exact = exact.ok_or_else(|| Error::Config("wQBC check needs at least one seed".into()))?;
    let wins = rows.iter().filter(|r| r.qail_wqbc >= r.qail_qbc).count();
    let q = task.qail.calib_quantile;
    let within = rows.iter().all(|r| {
        let n = (task.qail.calib_fraction * r.dataset_len as f64).ceil() as usize;
        let bound = n - (q * n as f64).ceil() as usize;
        !r.calibrations.is_empty() && r.calibrations.iter().all(|&(_, b)| b <= bound)
    });
    let checks = vec![
        check("boosted = nearest-rank top 20%", exact.matches),
        check("training boost rate <= 20%", within),
        soft("wqbc >= qbc in >= 3 of 5 seeds", wins * 5 >= 3 * rows.len()),
    ];
    let data = json!({
        "boost": exact,
        "wins": wins,
        "median": {
            "fp": median(&rows.iter().map(|r| r.fp).collect::<Vec<_>>()),
            "qail_qbc": median(&rows.iter().map(|r| r.qail_qbc).collect::<Vec<_>>()),
            "qail_wqbc": median(&rows.iter().map(|r| r.qail_wqbc).collect::<Vec<_>>()),
        },
        "seeds": rows,
    });
    Ok(CriterionReport::new(7, "wQBC mechanism", checks, data, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostCheck {
    pub calibration_states: usize,
    pub threshold: f64,
    pub boosted: usize,
    pub expected_boosted: usize,
    pub matches: bool,
}

/// Recomputes the calibration by sorting and compares state by state.
fn boost_check(policy: &GaussianPolicy, data: &Dataset, cfg: &QailConfig) -> Result<BoostCheck> {
    let cal = calibrate_threshold(
        policy,
        data,
        cfg.calib_fraction,
        cfg.calib_quantile,
        cfg.seed,
        &cfg.saliency,
    )?;
    let n = cal.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cal.scores[a].total_cmp(&cal.scores[b]));
    let rank = (cfg.calib_quantile * n as f64).ceil() as usize;
    let threshold = cal.scores[order[rank - 1]];
    let mut expected: Vec<usize> = order[rank..]
        .iter()
        .copied()
        .filter(|&i| cal.scores[i] > threshold)
        .collect();
    expected.sort_unstable();
    let mut boosted = Vec::new();
    for (i, &sc) in cal.scores.iter().enumerate() {
        if wqbc_alpha(sc, cal.threshold, cfg.beta as f64)? == cfg.beta as f64 {
            boosted.push(i);
        }
    }
    let matches = threshold == cal.threshold
        && threshold == nearest_rank(&cal.scores, cfg.calib_quantile)?
        && boosted == expected
        && boosted.len() == n - rank;
    Ok(BoostCheck {
        calibration_states: n,
        threshold: cal.threshold,
        boosted: boosted.len(),
        expected_boosted: n - rank,
        matches,
    })
}

/// Mean saliency divergence from the teacher of RTN and QAIL+QBC students.
pub fn attdiv_comparison(s: &Settings) -> Result<CriterionReport> {
    let t = Instant::now();
    let env = EnvKind::GridDrive.make();
    let task = &s.grid;
    let seed = s.seed(0);
    let teacher = s.teacher(task, &env, seed)?;
    let rtn = ptq_rtn(&teacher.fp, s.bits, &env, task.qail.calib_seed)?;
    let qbc = train_qail(
        &teacher.fp,
        &teacher.data,
        &env,
        &s.qail_cfg(task, seed, task.qail.lambda, false),
        None,
    )?;
    let (obs, _) = probe_states(&env, s.attdiv_states, s.probe_seed)?;
    let n = s.attdiv_states;
    let sal = &task.qail.saliency;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let rtn_div = mean(attdiv_batch(&rtn, &teacher.fp, &obs, n, sal)?);
    let qbc_div = mean(attdiv_batch(&qbc.policy, &teacher.fp, &obs, n, sal)?);
    let self_fp = attdiv_batch(&teacher.fp, &teacher.fp, &obs, n, sal)?;
    let self_q = attdiv_batch(&qbc.policy, &qbc.policy, &obs, n, sal)?;
    let ev = s.eval_at(seed);
    let checks = vec![
        check("qail+qbc < rtn", qbc_div < rtn_div),
        check("attdiv(p, p) = 0", self_fp.iter().chain(&self_q).all(|&v| v == 0.0)),
    ];
    let data = json!({
        "states": n,
        "rtn": rtn_div,
        "qail_qbc": qbc_div,
        "success": {
            "fp": ev.run(&teacher.fp, &env)?.success_rate,
            "rtn": ev.run(&rtn, &env)?.success_rate,
            "qail_qbc": ev.run(&qbc.policy, &env)?.success_rate,
        },
    });
    Ok(CriterionReport::new(8, "saliency divergence", checks, data, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QarlRow {
    pub seed: u64,
    pub fp: f64,
    pub qarl: f64,
    pub qarl_qbc: f64,
}

/// Quantized PPO with and without the QBC term, plus the clip cases.
pub fn qarl_comparison(s: &Settings, lab: &mut Lab) -> Result<CriterionReport> {
    let t = Instant::now();
    let env = EnvKind::Cartpole.make();
    let mut rows = Vec::new();
    for teacher in lab.cartpole(s)? {
        let seed = teacher.seed;
        let ev = s.eval_at(seed);
        let cfg = |lambda: f32| QarlConfig {
            bits: s.bits,
            lambda,
            seed,
            ..s.qarl.clone()
        };
        let plain = train_qarl(&teacher.fp, &env, &cfg(0.0), None)?;
        let qbc = train_qarl(&teacher.fp, &env, &cfg(s.qarl.lambda), None)?;
        rows.push(QarlRow {
            seed,
            fp: ev.run(&teacher.fp, &env)?.avg_return,
            qarl: ev.run(&plain.policy, &env)?.avg_return,
            qarl_qbc: ev.run(&qbc.policy, &env)?.avg_return,
        });
    }
    let qarl = median(&rows.iter().map(|r| r.qarl).collect::<Vec<_>>());
    let qbc = median(&rows.iter().map(|r| r.qarl_qbc).collect::<Vec<_>>());
    let clip_hi = ppo_objective(1.5, 1.0, 0.2);
    let clip_lo = ppo_objective(0.5, -1.0, 0.2);
    let checks = vec![
        check("qarl+qbc >= qarl", qbc >= qarl),
        check("clip cases", clip_hi == 1.2 && clip_lo == -0.8),
    ];
    let data = json!({
        "median": { "qarl": qarl, "qarl_qbc": qbc },
        "clip": { "r1.5_a1": clip_hi, "r0.5_a-1": clip_lo },
        "seeds": rows,
    });
    Ok(CriterionReport::new(9, "QARL with QBC", checks, data, t))
}

fn cli(args: &[String]) -> Result<()> {
    use clap::Parser;
    let cli = Cli::try_parse_from(std::iter::once("ilq".to_string()).chain(args.iter().cloned()))
        .map_err(|e| Error::Config(e.to_string()))?;
    commands::run(cli.command)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// collect-expert → train-fp → collect-fp → qail → eval under `dir`.
pub fn pipeline(s: &Settings, dir: &Path) -> Result<()> {
    let p = &s.pipeline;
    let seed = s.seed(0).to_string();
    let d = |name: &str| dir.join(name).display().to_string();
    let cfg_path = dir.join("qail-config.json");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let small = json!({
        "qail": { "steps": p.qail_steps, "batch_size": 64, "bits": s.bits },
        "eval": { "episodes": p.eval_episodes },
    });
    fs::write(&cfg_path, small.to_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let fp_cfg = dir.join("fp-config.json");
    let fp = json!({
        "bc": { "hidden": [32, 32], "steps": p.bc_steps, "batch_size": 64 },
        "eval": { "episodes": p.eval_episodes },
    });
    fs::write(&fp_cfg, fp.to_string()).map_err(|e| Error::io(&fp_cfg, e))?;
    let args = |v: &[&str]| v.iter().chain(&["--quiet"]).map(|s| s.to_string()).collect::<Vec<_>>();
    let ep = p.expert_episodes.to_string();
    let fe = p.fp_episodes.to_string();
    let evn = p.eval_episodes.to_string();
    cli(&args(&[
        "collect-expert",
        "--env",
        "cartpole",
        "--episodes",
        &ep,
        "--seed",
        &seed,
        "--out",
        &d("expert"),
    ]))?;
    cli(&args(&[
        "train-fp",
        "--dataset",
        &d("expert/dataset.jsonl"),
        "--config",
        &fp_cfg.display().to_string(),
        "--seed",
        &seed,
        "--out",
        &d("fp"),
    ]))?;
    cli(&args(&[
        "collect-fp",
        "--policy",
        &d("fp/policy.ckpt"),
        "--episodes",
        &fe,
        "--seed",
        &seed,
        "--out",
        &d("fp-data"),
    ]))?;
    cli(&args(&[
        "qail",
        "--policy",
        &d("fp/policy.ckpt"),
        "--dataset",
        &d("expert/dataset.jsonl"),
        "--fp-dataset",
        &d("fp-data/dataset.jsonl"),
        "--config",
        &cfg_path.display().to_string(),
        "--seed",
        &seed,
        "--out",
        &d("qail"),
    ]))?;
    cli(&args(&[
        "eval",
        "--policy",
        &d("fp/policy.ckpt"),
        "--policy",
        &d("qail/policy.ckpt"),
        "--episodes",
        &evn,
        "--seed",
        &seed,
        "--out",
        &d("eval"),
    ]))
}

/// Two same-seed pipeline runs, then checkpoint and dataset round trips.
pub fn determinism(s: &Settings, out: &Path) -> Result<CriterionReport> {
    let t = Instant::now();
    let (a, b) = (out.join("run-a"), out.join("run-b"));
    for d in [&a, &b] {
        if d.exists() {
            fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        pipeline(s, d)?;
    }
    let stages = ["expert", "fp", "fp-data", "qail", "eval"];
    let mut identical = true;
    for st in stages {
        identical &= read(&a.join(st).join(METRICS_FILE))? == read(&b.join(st).join(METRICS_FILE))?;
    }
    let ckpt = a.join("qail").join(commands::POLICY_FILE);
    let bytes = read(&ckpt)?;
    let (p, packed) = policy::decode(&bytes)?;
    let ckpt_ok = policy::encode(&p, &packed)? == bytes && policy::load(&ckpt)? == p;
    let data_path = a.join("expert").join(commands::DATASET_FILE);
    let trajs = read_jsonl(&data_path)?;
    let copy = out.join("dataset-copy.jsonl");
    write_jsonl(&copy, &trajs)?;
    let data_ok = read(&copy)? == read(&data_path)? && read_jsonl(&copy)? == trajs;
    let checks = vec![
        check("metrics byte-identical", identical),
        check("checkpoint round trip", ckpt_ok),
        check("dataset round trip", data_ok),
    ];
    let data = json!({ "eval": serde_json::from_slice::<serde_json::Value>(&read(&a.join("eval").join(METRICS_FILE))?)
        .map_err(|e| Error::json("eval metrics", e))? });
    Ok(CriterionReport::new(10, "determinism and persistence", checks, data, t))
}

/// Runs the selected criteria (all when `only` is empty) in order,
/// reporting each as it finishes.
pub fn run(
    s: &Settings,
    only: &[u8],
    out: &Path,
    mut on_done: impl FnMut(&CriterionReport),
) -> Result<Vec<CriterionReport>> {
    let want = |id: u8| only.is_empty() || only.contains(&id);
    let mut lab = Lab::default();
    let mut reports = Vec::new();
    let mut push = |r: CriterionReport| {
        on_done(&r);
        reports.push(r);
    };
    if want(5) {
        push(kernel_speed(s)?);
    }
    if want(6) {
        push(cartpole_trend(s, &mut lab)?);
    }
    if want(7) {
        push(wqbc_mechanism(s)?);
    }
    if want(8) {
        push(attdiv_comparison(s)?);
    }
    if want(9) {
        push(qarl_comparison(s, &mut lab)?);
    }
    if want(10) {
        push(determinism(s, &out.join("determinism"))?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even_and_order() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn report_line_marks_soft_checks() {
        let r = CriterionReport::new(
            7,
            "x",
            vec![check("a", true), soft("b", false)],
            json!({}),
            Instant::now(),
        );
        assert!(r.pass);
        assert!(
            r.line().starts_with("criterion 7 (x): PASS [a ok, b soft-miss]"),
            "{}",
            r.line()
        );
        let r = CriterionReport::new(6, "y", vec![check("a", false)], json!({}), Instant::now());
        assert!(!r.pass);
    }

    #[test]
    fn probe_states_are_seeded() {
        let env = EnvKind::GridDrive.make();
        let (a, ids) = probe_states(&env, 3, 11).unwrap();
        let (b, _) = probe_states(&env, 3, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * env.obs_dim());
        assert_eq!(ids.len(), 3);
        assert!(ids[0].starts_with("seed11-t"));
    }

    #[test]
    fn settings_reject_unknown_fields() {
        assert!(serde_json::from_str::<Settings>(r#"{"seeds": 2}"#).is_ok());
        assert!(serde_json::from_str::<Settings>(r#"{"sedes": 2}"#).is_err());
    }
}
