use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BehaviorKind, ExperimentConfig};
use super::eval::{evaluate_policy, PolicyEval};
use crate::env::{self, physics, Action, Cell, RainRegion, TaskSpec};
use crate::error::{Error, Result};
use crate::meta::{meta_test, meta_train, TaskSet};
use crate::nn::{forward, MlpSpec, ParamVector};
use crate::offline::{collect_dataset, from_replay, train_offline, Behavior, LossKind, OfflineDataset, TrainSplit};
use crate::rl::{train_dqn, ReplayBuffer};
use crate::util::{derive_seed, write_atomic};

/// The four learners compared throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "cql-maml")]
    CqlMaml,
    #[serde(rename = "cql")]
    Cql,
    #[serde(rename = "dqn")]
    Dqn,
    #[serde(rename = "dqn-maml")]
    DqnMaml,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::CqlMaml, Algorithm::Cql, Algorithm::Dqn, Algorithm::DqnMaml];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::CqlMaml => "cql-maml",
            Algorithm::Cql => "cql",
            Algorithm::Dqn => "dqn",
            Algorithm::DqnMaml => "dqn-maml",
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Algorithm::CqlMaml | Algorithm::Cql => LossKind::Cql,
            Algorithm::Dqn | Algorithm::DqnMaml => LossKind::Dqn,
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Algorithm::CqlMaml | Algorithm::DqnMaml)
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub algorithm: String,
    pub task_id: String,
    pub epoch: usize,
    pub mean_eval_reward: f64,
    pub mean_aoi: f64,
    pub mean_power_w: f64,
    pub outage_count: f64,
    pub wall_clock_s: f64,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "run_id",
    "algorithm",
    "task_id",
    "epoch",
    "mean_eval_reward",
    "mean_aoi",
    "mean_power_w",
    "outage_count",
    "wall_clock_s",
];

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(METRICS_COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::format(path, format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Per-epoch evaluations of one learner on one task under one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub algorithm: Algorithm,
    /// Sweep label such as `shots=100`; empty for plain runs.
    pub setting: String,
    pub seed: usize,
    pub task_id: String,
    /// Index `e` holds the evaluation after `e` epochs.
    pub evals: Vec<PolicyEval>,
    pub wall_clock_s: Vec<f64>,
    pub params: ParamVector<f64>,
}

impl Curve {
    pub fn run_id(&self) -> String {
        if self.setting.is_empty() {
            format!("{}/seed{}", self.algorithm.name(), self.seed)
        } else {
            format!("{}/{}/seed{}", self.algorithm.name(), self.setting, self.seed)
        }
    }

    pub fn records(&self) -> Vec<MetricsRecord> {
        let id = self.run_id();
        self.evals
            .iter()
            .zip(&self.wall_clock_s)
            .enumerate()
            .map(|(epoch, (e, &t))| MetricsRecord {
                run_id: id.clone(),
                algorithm: self.algorithm.name().to_string(),
                task_id: self.task_id.clone(),
                epoch,
                mean_eval_reward: e.mean_reward,
                mean_aoi: e.mean_aoi,
                mean_power_w: e.mean_power_w,
                outage_count: e.mean_outages,
                wall_clock_s: t,
            })
            .collect()
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over seeds of `metric` at every epoch, for curves matching `algorithm` and `setting`.
pub fn median_curve(curves: &[Curve], algorithm: Algorithm, setting: &str, metric: impl Fn(&PolicyEval) -> f64) -> Vec<f64> {
    let sel: Vec<&Curve> = curves
        .iter()
        .filter(|c| c.algorithm == algorithm && c.setting == setting)
        .collect();
    let Some(len) = sel.iter().map(|c| c.evals.len()).min() else {
        return Vec::new();
    };
    (0..len)
        .map(|e| median(&mut sel.iter().map(|c| metric(&c.evals[e])).collect::<Vec<_>>()))
        .collect()
}

/// `n` log-uniform trade-offs over `[min, max]`, skipping anything within 1% of `held_out`.
pub fn meta_lambdas(n: usize, min: f64, max: f64, held_out: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let grid = |m: usize| -> Vec<f64> {
        if m == 1 {
            return vec![(min * max).sqrt()];
        }
        (0..m)
            .map(|i| (min.ln() + (max.ln() - min.ln()) * i as f64 / (m - 1) as f64).exp())
            .collect()
    };
    let far = |l: &f64| (l - held_out).abs() > 0.01 * held_out;
    let g = grid(n);
    if g.iter().all(far) {
        return g;
    }
    let mut g = grid(n + 1);
    g.retain(far);
    g.truncate(n);
    g
}

pub fn lambda_task_id(prefix: &str, lambda: f64) -> String {
    format!("{prefix}-lambda-{lambda:.2}")
}

struct BehaviorRun {
    buffer: ReplayBuffer,
    params: ParamVector<f64>,
    spec: MlpSpec,
    id: String,
}

/// Collects offline datasets once per task and behavior, keyed by task id.
pub struct DataBank {
    cfg: ExperimentConfig,
    behaviors: HashMap<String, BehaviorRun>,
    datasets: HashMap<(String, usize), OfflineDataset>,
}

impl DataBank {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            behaviors: HashMap::new(),
            datasets: HashMap::new(),
        }
    }

    /// Dataset of `size` transitions for `task`, deterministic in the root seed and task id.
    pub fn dataset(&mut self, task: &TaskSpec, size: usize) -> Result<OfflineDataset> {
        let key = (task.task_id.clone(), size);
        if let Some(d) = self.datasets.get(&key) {
            if d.header.task_fingerprint != task.fingerprint() {
                return Err(Error::Config(format!("two different tasks share the id {:?}", task.task_id)));
            }
            return Ok(d.clone());
        }
        let root = self.cfg.root_seed;
        let split_seed = derive_seed(root, &format!("split/{}/{size}", task.task_id));
        let ds = match self.cfg.behavior {
            BehaviorKind::Random => collect_dataset(
                task,
                &Behavior::Random,
                size,
                self.cfg.split_ratio,
                derive_seed(root, &format!("random/{}", task.task_id)),
            )?,
            BehaviorKind::Dqn => {
                if !self.behaviors.contains_key(&task.task_id) {
                    let spec = self.cfg.mlp_spec(derive_seed(root, &format!("behavior-init/{}", task.task_id)))?;
                    let dcfg = self.cfg.dqn_config(task)?;
                    let run = train_dqn(task, &spec, &dcfg, derive_seed(root, &format!("behavior/{}", task.task_id)))?;
                    let after = dcfg.export_after_episode.unwrap_or(dcfg.episodes);
                    self.behaviors.insert(
                        task.task_id.clone(),
                        BehaviorRun {
                            buffer: run.buffer,
                            params: run.params,
                            spec,
                            id: format!("dqn-after-episode-{after}"),
                        },
                    );
                }
                let b = &self.behaviors[&task.task_id];
                from_replay(
                    task,
                    &b.buffer,
                    &b.id,
                    size,
                    self.cfg.split_ratio,
                    split_seed,
                    Some((&b.params, &b.spec, 0.05)),
                )?
            }
        };
        self.datasets.insert(key, ds.clone());
        Ok(ds)
    }

    /// The online behavior agent of a task, if one was trained.
    pub fn behavior_policy(&self, task_id: &str) -> Option<(&ParamVector<f64>, &MlpSpec)> {
        self.behaviors.get(task_id).map(|b| (&b.params, &b.spec))
    }
}

pub fn eval_seeds(cfg: &ExperimentConfig, seed: usize) -> Vec<u64> {
    (0..cfg.eval_episodes)
        .map(|i| derive_seed(cfg.root_seed, &format!("eval/{seed}/{i}")))
        .collect()
}

pub fn init_seed(cfg: &ExperimentConfig, seed: usize) -> u64 {
    derive_seed(cfg.root_seed, &format!("init/{seed}"))
}

pub fn meta_test_tasks(cfg: &ExperimentConfig, n: usize) -> Result<Vec<TaskSpec>> {
    meta_lambdas(n, cfg.lambda_min, cfg.lambda_max, cfg.test_lambda)
        .into_iter()
        .map(|l| cfg.task(l, lambda_task_id("meta", l)))
        .collect()
}

pub fn test_task(cfg: &ExperimentConfig) -> Result<TaskSpec> {
    cfg.task(cfg.test_lambda, lambda_task_id("test", cfg.test_lambda))
}

/// Meta-train an initialization for run `seed` (no logging rollouts).
pub fn meta_initialization(
    cfg: &ExperimentConfig,
    tasks: &[OfflineDataset],
    spec: &MlpSpec,
    loss: LossKind,
    seed: usize,
) -> Result<ParamVector<f64>> {
    let set = TaskSet::new("lambda-log-uniform", tasks.to_vec())?;
    let mcfg = cfg.meta_config(loss, derive_seed(cfg.root_seed, &format!("meta/{seed}")));
    Ok(meta_train(&set, spec, &mcfg, &mut |_, _| Ok(()))?.init)
}

/// Adapt `init` on the support split of `ds` with `algorithm`'s loss, evaluating every epoch.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_curve(
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    setting: &str,
    seed: usize,
    init: &ParamVector<f64>,
    spec: &MlpSpec,
    ds: &OfflineDataset,
    epochs: usize,
) -> Result<Curve> {
    let task = ds.task().clone();
    let seeds = eval_seeds(cfg, seed);
    let start = Instant::now();
    let ocfg = cfg.offline_config(algorithm.loss());
    let batch_seed = derive_seed(cfg.root_seed, &format!("adapt/{}/{setting}/{seed}", task.task_id));
    let mut hook = |_: usize, p: &ParamVector<f64>| -> Result<(PolicyEval, f64)> {
        Ok((evaluate_policy(p, spec, &task, &seeds, None)?, start.elapsed().as_secs_f64()))
    };
    let run = meta_test(init, ds, spec, epochs, &ocfg, batch_seed, &mut hook)?;
    let (evals, wall_clock_s) = run.evals.into_iter().unzip();
    Ok(Curve {
        algorithm,
        setting: setting.to_string(),
        seed,
        task_id: task.task_id.clone(),
        evals,
        wall_clock_s,
        params: run.params,
    })
}

/// Curves for every requested algorithm and seed on one held-out dataset.
pub fn compare_algorithms(
    cfg: &ExperimentConfig,
    algorithms: &[Algorithm],
    setting: &str,
    meta_tasks: &[OfflineDataset],
    test: &OfflineDataset,
    epochs: usize,
) -> Result<Vec<Curve>> {
    let mut out = Vec::new();
    for seed in 0..cfg.seeds {
        let spec = cfg.mlp_spec(init_seed(cfg, seed))?;
        let random = spec.init_params::<f64>();
        for &alg in algorithms {
            let init = if alg.is_meta() && !meta_tasks.is_empty() {
                meta_initialization(cfg, meta_tasks, &spec, alg.loss(), seed)?
            } else {
                random.clone()
            };
            out.push(adaptation_curve(cfg, alg, setting, seed, &init, &spec, test, epochs)?);
        }
    }
    Ok(out)
}

fn emit(cfg: &ExperimentConfig, dir: &Path, curves: &[Curve]) -> Result<()> {
    let records: Vec<MetricsRecord> = curves.iter().flat_map(Curve::records).collect();
    write_metrics(&dir.join("metrics.csv"), &records)?;
    cfg.save(&dir.join("resolved.toml"))
}

/// All four learners on the held-out task from shared datasets.
pub fn run_convergence_experiment(cfg: &ExperimentConfig, bank: &mut DataBank, out: Option<&Path>) -> Result<Vec<Curve>> {
    let metas = meta_test_tasks(cfg, cfg.num_meta_tasks)?
        .iter()
        .map(|t| bank.dataset(t, cfg.dataset_size))
        .collect::<Result<Vec<_>>>()?;
    let test = bank.dataset(&test_task(cfg)?, cfg.dataset_size)?;
    let curves = compare_algorithms(cfg, &Algorithm::ALL, "", &metas, &test, cfg.adaptation_epochs)?;
    if let Some(dir) = out {
        emit(cfg, dir, &curves)?;
    }
    Ok(curves)
}

/// CQL and CQL-MAML for every dataset size in `shots_sweep`.
pub fn run_shots_ablation(cfg: &ExperimentConfig, bank: &mut DataBank, out: Option<&Path>) -> Result<Vec<Curve>> {
    let mut curves = Vec::new();
    for &size in &cfg.shots_sweep {
        let metas = meta_test_tasks(cfg, cfg.num_meta_tasks)?
            .iter()
            .map(|t| bank.dataset(t, size))
            .collect::<Result<Vec<_>>>()?;
        let test = bank.dataset(&test_task(cfg)?, size)?;
        let setting = format!("shots={size}");
        curves.extend(compare_algorithms(
            cfg,
            &[Algorithm::CqlMaml, Algorithm::Cql],
            &setting,
            &metas,
            &test,
            cfg.adaptation_epochs,
        )?);
    }
    if let Some(dir) = out {
        emit(cfg, dir, &curves)?;
    }
    Ok(curves)
}

/// CQL-MAML meta-trained on each task count in `tasks_sweep`; 0 tasks is plain CQL.
pub fn run_tasks_ablation(cfg: &ExperimentConfig, bank: &mut DataBank, out: Option<&Path>) -> Result<Vec<Curve>> {
    let test = bank.dataset(&test_task(cfg)?, cfg.dataset_size)?;
    let mut curves = Vec::new();
    for &n in &cfg.tasks_sweep {
        let metas = meta_test_tasks(cfg, n)?
            .iter()
            .map(|t| bank.dataset(t, cfg.dataset_size))
            .collect::<Result<Vec<_>>>()?;
        let setting = format!("tasks={n}");
        let alg = if n == 0 { Algorithm::Cql } else { Algorithm::CqlMaml };
        curves.extend(compare_algorithms(cfg, &[alg], &setting, &metas, &test, cfg.adaptation_epochs)?);
    }
    if let Some(dir) = out {
        emit(cfg, dir, &curves)?;
    }
    Ok(curves)
}

/// Cell minimizing the total transmit power without rain.
pub fn power_hotspot(task: &TaskSpec) -> Cell {
    let l = task.env.grid_side_cells;
    let mut best = (f64::INFINITY, Cell::new(0, 0));
    for y in 0..l {
        for x in 0..l {
            let c = Cell::new(x, y);
            let p = physics::total_power(c, &task.env, None);
            if p < best.0 {
                best = (p, c);
            }
        }
    }
    best.1
}

/// Rain tasks at the held-out trade-off, each rectangle covering the rain-free
/// power optimum at a seeded offset.
pub fn rain_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskSpec>> {
    let base = test_task(cfg)?;
    let hot = power_hotspot(&base);
    let l = cfg.grid_side_cells;
    let (w, h) = (cfg.rain_width, cfg.rain_height);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.root_seed, "rain-placement"));
    let x_lo = hot.x.saturating_sub(w - 1);
    let x_hi = hot.x.min(l - w);
    let y_lo = hot.y.saturating_sub(h - 1);
    let y_hi = hot.y.min(l - h);
    let mut placements: Vec<Cell> = (y_lo..=y_hi).flat_map(|y| (x_lo..=x_hi).map(move |x| Cell::new(x, y))).collect();
    let mut out = Vec::with_capacity(cfg.rain_tasks);
    for i in 0..cfg.rain_tasks {
        if placements.is_empty() {
            placements = (y_lo..=y_hi).flat_map(|y| (x_lo..=x_hi).map(move |x| Cell::new(x, y))).collect();
        }
        let corner = placements.swap_remove(rng.gen_range(0..placements.len()));
        let rain = RainRegion::new(corner, Cell::new(corner.x + w - 1, corner.y + h - 1), cfg.rainfall_mm_per_h)?
            .with_path_km(cfg.rain_path_km);
        let mut t = base.clone().with_rain(rain)?;
        t.task_id = format!("rain-{i}-at-{}-{}", corner.x, corner.y);
        out.push(t);
    }
    Ok(out)
}

/// One step of a dumped greedy trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub serve: usize,
    pub reward: f64,
    pub in_rain: bool,
}

/// Greedy rollout of `params` from `reset(task, seed)`, positions after each move.
pub fn greedy_trajectory(params: &ParamVector<f64>, spec: &MlpSpec, task: &TaskSpec, seed: u64) -> Result<Vec<TrajectoryStep>> {
    let mut state = env::reset(task, seed);
    let mut out = Vec::with_capacity(task.env.episode_length);
    loop {
        let q = forward(params, spec, &env::encode_state(&state, &task.env))?;
        let a = Action::decode(crate::nn::argmax(&q), task.env.num_devices)?;
        let o = env::step(&state, &a, task)?;
        out.push(TrajectoryStep {
            t: state.step_index,
            x: o.next_state.uav.x,
            y: o.next_state.uav.y,
            serve: a.serve,
            reward: o.reward,
            in_rain: o.info.in_rain,
        });
        let done = o.done;
        state = o.next_state;
        if done {
            return Ok(out);
        }
    }
}

pub fn trajectory_jsonl(steps: &[TrajectoryStep]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in steps {
        serde_json::to_writer(&mut out, s).expect("trajectory serializes");
        out.push(b'\n');
    }
    out
}

pub struct ResilienceResult {
    pub curves: Vec<Curve>,
    /// `(algorithm, task_id, steps)` of seed 0's final greedy policies.
    pub trajectories: Vec<(Algorithm, String, Vec<TrajectoryStep>)>,
}

/// Meta-train without rain, then adapt CQL-MAML and CQL on each rain task.
pub fn run_resilience_experiment(cfg: &ExperimentConfig, bank: &mut DataBank, out: Option<&Path>) -> Result<ResilienceResult> {
    let metas = meta_test_tasks(cfg, cfg.num_meta_tasks)?
        .iter()
        .map(|t| bank.dataset(t, cfg.dataset_size))
        .collect::<Result<Vec<_>>>()?;
    let rains = rain_tasks(cfg)?
        .iter()
        .map(|t| bank.dataset(t, cfg.dataset_size))
        .collect::<Result<Vec<_>>>()?;
    let mut curves = Vec::new();
    let mut trajectories = Vec::new();
    for seed in 0..cfg.seeds {
        let spec = cfg.mlp_spec(init_seed(cfg, seed))?;
        let meta = meta_initialization(cfg, &metas, &spec, LossKind::Cql, seed)?;
        let random = spec.init_params::<f64>();
        for ds in &rains {
            for (alg, init) in [(Algorithm::CqlMaml, &meta), (Algorithm::Cql, &random)] {
                let c = adaptation_curve(cfg, alg, "rain", seed, init, &spec, ds, cfg.resilience_epochs)?;
                if seed == 0 {
                    let steps = greedy_trajectory(&c.params, &spec, ds.task(), eval_seeds(cfg, 0)[0])?;
                    trajectories.push((alg, ds.task().task_id.clone(), steps));
                }
                curves.push(c);
            }
        }
    }
    if let Some(dir) = out {
        emit(cfg, dir, &curves)?;
        for (alg, task_id, steps) in &trajectories {
            write_atomic(
                &dir.join(format!("trajectories/{}-{task_id}.jsonl", alg.name())),
                &trajectory_jsonl(steps),
            )?;
        }
        let tasks: Vec<&TaskSpec> = rains.iter().map(|d| d.task()).collect();
        write_atomic(
            &dir.join("rain_tasks.json"),
            &serde_json::to_vec_pretty(&tasks).map_err(|e| Error::Config(e.to_string()))?,
        )?;
    }
    Ok(ResilienceResult { curves, trajectories })
}

/// Per-seed mean over tasks of `metric` at `epoch` for one algorithm.
pub fn per_seed_task_mean(curves: &[Curve], algorithm: Algorithm, epoch: usize, metric: impl Fn(&PolicyEval) -> f64) -> Vec<f64> {
    let mut by_seed: HashMap<usize, (f64, usize)> = HashMap::new();
    for c in curves.iter().filter(|c| c.algorithm == algorithm) {
        let e = by_seed.entry(c.seed).or_default();
        e.0 += metric(&c.evals[epoch]);
        e.1 += 1;
    }
    let mut seeds: Vec<_> = by_seed.into_iter().collect();
    seeds.sort_by_key(|(s, _)| *s);
    seeds.into_iter().map(|(_, (sum, n))| sum / n as f64).collect()
}

/// Offline training from a random init on the held-out task's `cql_split`.
pub fn train_cql_run(cfg: &ExperimentConfig, ds: &OfflineDataset, seed: usize) -> Result<Curve> {
    let spec = cfg.mlp_spec(init_seed(cfg, seed))?;
    let task = ds.task().clone();
    let seeds = eval_seeds(cfg, seed);
    let start = Instant::now();
    let ocfg = cfg.offline_config(LossKind::Cql);
    let mut hook = |_: usize, p: &ParamVector<f64>| -> Result<(PolicyEval, f64)> {
        Ok((evaluate_policy(p, &spec, &task, &seeds, None)?, start.elapsed().as_secs_f64()))
    };
    let run = train_offline(
        ds,
        &spec.init_params(),
        &spec,
        &ocfg,
        derive_seed(cfg.root_seed, &format!("train-cql/{seed}")),
        &mut hook,
    )?;
    let (evals, wall_clock_s) = run.evals.into_iter().unzip();
    Ok(Curve {
        algorithm: Algorithm::Cql,
        setting: match ocfg.split {
            TrainSplit::Full => "full".into(),
            TrainSplit::Support => "support".into(),
            TrainSplit::Query => "query".into(),
        },
        seed,
        task_id: task.task_id,
        evals,
        wall_clock_s,
        params: run.params,
    })
}
