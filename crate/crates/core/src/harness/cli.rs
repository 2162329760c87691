//! Command-line front end.
//!
//! Every subcommand takes a config file plus `--set key=value` overrides and
//! writes into its own directory under `output_dir`. Exit status is 0 on
//! success, [`EXIT_CONFIG`] for anything the user can fix in the inputs and
//! [`EXIT_RUNTIME`] for failures during a run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::config::ExperimentConfig;
use super::eval::evaluate_policy;
use super::experiments::{
    adaptation_curve, eval_seeds, init_seed, meta_test_tasks, rain_tasks, run_convergence_experiment,
    run_resilience_experiment, run_shots_ablation, run_tasks_ablation, test_task, train_cql_run, write_metrics,
    Algorithm, Curve, DataBank, MetricsRecord,
};
use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::meta::{meta_train, TaskSet};
use crate::nn::io::{load_params, save_params};
use crate::nn::{MlpSpec, ParamVector};
use crate::offline::{LossKind, OfflineDataset};
use crate::util::{derive_seed, write_atomic};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "uavmeta", version, about = "Offline meta-RL for UAV trajectory and AoI scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config; keys it leaves out come from its profile
    config: PathBuf,
    /// Override one config key, e.g. `--set seeds=3` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect offline datasets for the meta-training tasks, the held-out task and the rain tasks
    Collect(Common),
    /// Train CQL from a random init on the held-out task, one run per seed
    TrainCql(Common),
    /// Meta-train a CQL-MAML initialization and save it
    MetaTrain(Common),
    /// Adapt a saved initialization to the held-out task
    MetaTest {
        #[command(flatten)]
        common: Common,
        /// Initialization checkpoint (defaults to `init_path`)
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Meta-train without rain, then adapt CQL-MAML and CQL on rain tasks
    Resilience(Common),
    /// Greedy evaluation of a saved Q-network
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Parameter checkpoint (defaults to `params_path`)
        #[arg(long)]
        params: Option<PathBuf>,
        /// Trade-off to evaluate under (defaults to `test_lambda`)
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// All four learners on the held-out task
    Convergence(Common),
    /// CQL and CQL-MAML across dataset sizes
    Shots(Common),
    /// CQL-MAML across meta-task counts
    Tasks(Common),
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

trait OrRuntime<T> {
    fn rt(self) -> Outcome<T>;
}

impl<T> OrRuntime<T> for Result<T> {
    fn rt(self) -> Outcome<T> {
        self.map_err(Failure::runtime)
    }
}

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn load(common: &Common) -> Outcome<ExperimentConfig> {
    ExperimentConfig::load(&common.config, &common.set).map_err(|e| match e {
        Error::Config(m) => Failure::Config(m),
        other => Failure::Config(other.to_string()),
    })
}

fn dispatch(command: Command) -> Outcome<()> {
    match command {
        Command::Collect(c) => collect(&load(&c)?),
        Command::TrainCql(c) => train_cql_cmd(&load(&c)?),
        Command::MetaTrain(c) => meta_train_cmd(&load(&c)?),
        Command::MetaTest { common, init } => {
            let cfg = load(&common)?;
            let path = init.unwrap_or_else(|| cfg.init_path());
            meta_test_cmd(&cfg, &path)
        }
        Command::Resilience(c) => {
            let cfg = load(&c)?;
            let dir = stage_dir(&cfg, "resilience")?;
            let res = run_resilience_experiment(&cfg, &mut DataBank::new(&cfg), Some(&dir)).rt()?;
            save_curves(&cfg, &dir, &res.curves)
        }
        Command::Evaluate { common, params, lambda } => {
            let cfg = load(&common)?;
            let path = params
                .or_else(|| cfg.params_path.clone())
                .ok_or_else(|| Failure::Config("evaluate needs --params or params_path in the config".into()))?;
            evaluate_cmd(&cfg, &path, lambda)
        }
        Command::Convergence(c) => {
            let cfg = load(&c)?;
            let dir = stage_dir(&cfg, "convergence")?;
            let curves = run_convergence_experiment(&cfg, &mut DataBank::new(&cfg), Some(&dir)).rt()?;
            save_curves(&cfg, &dir, &curves)
        }
        Command::Shots(c) => {
            let cfg = load(&c)?;
            let dir = stage_dir(&cfg, "shots")?;
            let curves = run_shots_ablation(&cfg, &mut DataBank::new(&cfg), Some(&dir)).rt()?;
            save_curves(&cfg, &dir, &curves)
        }
        Command::Tasks(c) => {
            let cfg = load(&c)?;
            let dir = stage_dir(&cfg, "tasks")?;
            let curves = run_tasks_ablation(&cfg, &mut DataBank::new(&cfg), Some(&dir)).rt()?;
            save_curves(&cfg, &dir, &curves)
        }
    }
}

fn stage_dir(cfg: &ExperimentConfig, name: &str) -> Outcome<PathBuf> {
    let dir = cfg.output_dir.join(name);
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn dataset_path(cfg: &ExperimentConfig, task: &TaskSpec, size: usize) -> PathBuf {
    cfg.dataset_dir().join(format!("{}-n{size}.jsonl", task.task_id))
}

/// `curve`'s final parameters, relative to a stage directory.
pub fn checkpoint_path(dir: &Path, curve: &Curve) -> PathBuf {
    dir.join("checkpoints").join(curve.run_id()).join(format!("{}.bin", curve.task_id))
}

/// Reuse a dataset already on disk for this task, otherwise collect and save it.
fn dataset(cfg: &ExperimentConfig, bank: &mut DataBank, task: &TaskSpec, size: usize) -> Outcome<OfflineDataset> {
    let path = dataset_path(cfg, task, size);
    if path.exists() {
        let ds = OfflineDataset::load(&path, Some(task)).map_err(|e| Failure::Config(e.to_string()))?;
        if ds.header.split_ratio != cfg.split_ratio {
            return Err(Failure::Config(format!(
                "{} was collected with split_ratio {}, config says {}; delete it to recollect",
                path.display(),
                ds.header.split_ratio,
                cfg.split_ratio
            )));
        }
        return Ok(ds);
    }
    let ds = bank.dataset(task, size).rt()?;
    ds.save(&path).rt()?;
    Ok(ds)
}

fn meta_datasets(cfg: &ExperimentConfig, bank: &mut DataBank) -> Outcome<Vec<OfflineDataset>> {
    meta_test_tasks(cfg, cfg.num_meta_tasks)
        .rt()?
        .iter()
        .map(|t| dataset(cfg, bank, t, cfg.dataset_size))
        .collect()
}

fn collect(cfg: &ExperimentConfig) -> Outcome<()> {
    let mut bank = DataBank::new(cfg);
    let mut tasks = meta_test_tasks(cfg, cfg.num_meta_tasks).rt()?;
    tasks.push(test_task(cfg).rt()?);
    tasks.extend(rain_tasks(cfg).rt()?);
    for t in &tasks {
        let ds = dataset(cfg, &mut bank, t, cfg.dataset_size)?;
        println!("{} ({} transitions)", dataset_path(cfg, t, ds.len()).display(), ds.len());
    }
    cfg.save(&cfg.dataset_dir().join("resolved.toml")).rt()
}

fn provenance(cfg: &ExperimentConfig, extra: serde_json::Value) -> String {
    json!({ "root_seed": cfg.root_seed, "profile": cfg.profile, "run": extra }).to_string()
}

fn save_curves(cfg: &ExperimentConfig, dir: &Path, curves: &[Curve]) -> Outcome<()> {
    for c in curves {
        let spec = cfg.mlp_spec(init_seed(cfg, c.seed)).rt()?;
        let prov = provenance(
            cfg,
            json!({
                "run_id": c.run_id(),
                "algorithm": c.algorithm.name(),
                "task_id": c.task_id,
                "seed": c.seed,
                "epoch": c.evals.len().saturating_sub(1),
            }),
        );
        save_params(&checkpoint_path(dir, c), &c.params, &spec, &prov).rt()?;
    }
    Ok(())
}

fn emit(cfg: &ExperimentConfig, dir: &Path, curves: &[Curve]) -> Outcome<()> {
    let records: Vec<MetricsRecord> = curves.iter().flat_map(Curve::records).collect();
    write_metrics(&dir.join("metrics.csv"), &records).rt()?;
    cfg.save(&dir.join("resolved.toml")).rt()?;
    save_curves(cfg, dir, curves)
}

fn train_cql_cmd(cfg: &ExperimentConfig) -> Outcome<()> {
    let mut bank = DataBank::new(cfg);
    let ds = dataset(cfg, &mut bank, &test_task(cfg).rt()?, cfg.dataset_size)?;
    let dir = stage_dir(cfg, "train-cql")?;
    let curves = (0..cfg.seeds).map(|s| train_cql_run(cfg, &ds, s)).collect::<Result<Vec<_>>>().rt()?;
    emit(cfg, &dir, &curves)
}

fn meta_train_cmd(cfg: &ExperimentConfig) -> Outcome<()> {
    let mut bank = DataBank::new(cfg);
    let metas = meta_datasets(cfg, &mut bank)?;
    let set = TaskSet::new("lambda-log-uniform", metas).rt()?;
    let spec = cfg.mlp_spec(init_seed(cfg, 0)).rt()?;
    let mcfg = cfg.meta_config(LossKind::Cql, derive_seed(cfg.root_seed, "meta/0"));
    let dir = stage_dir(cfg, "meta-train")?;
    let seeds = eval_seeds(cfg, 0);
    let start = std::time::Instant::now();
    let mut records = Vec::new();
    let mut hook = |epoch: usize, p: &ParamVector<f64>| -> Result<()> {
        for ds in &set.tasks {
            let e = evaluate_policy(p, &spec, ds.task(), &seeds, None)?;
            records.push(MetricsRecord {
                run_id: "cql-maml/meta-train/seed0".into(),
                algorithm: Algorithm::CqlMaml.name().into(),
                task_id: ds.task().task_id.clone(),
                epoch,
                mean_eval_reward: e.mean_reward,
                mean_aoi: e.mean_aoi,
                mean_power_w: e.mean_power_w,
                outage_count: e.mean_outages,
                wall_clock_s: start.elapsed().as_secs_f64(),
            });
        }
        Ok(())
    };
    let run = meta_train(&set, &spec, &mcfg, &mut hook).rt()?;
    write_metrics(&dir.join("metrics.csv"), &records).rt()?;

    let mut losses = csv::Writer::from_writer(Vec::new());
    losses.write_record(["epoch", "meta_loss", "mean_task_loss"]).map_err(|e| Failure::runtime(e.into()))?;
    for (i, (m, t)) in run.meta_losses.iter().zip(&run.mean_task_losses).enumerate() {
        losses
            .write_record([(i + 1).to_string(), m.to_string(), t.to_string()])
            .map_err(|e| Failure::runtime(e.into()))?;
    }
    let bytes = losses.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;
    write_atomic(&dir.join("meta_loss.csv"), &bytes).rt()?;

    let prov = provenance(
        cfg,
        json!({
            "kind": "meta-init",
            "meta_config": mcfg,
            "meta_config_fingerprint": mcfg.fingerprint(),
            "task_set_fingerprint": set.fingerprint(),
        }),
    );
    let init_path = cfg.init_path();
    save_params(&init_path, &run.init, &spec, &prov).rt()?;
    cfg.save(&dir.join("resolved.toml")).rt()?;
    println!("{}", init_path.display());
    Ok(())
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Outcome<(ParamVector<f64>, MlpSpec)> {
    if !path.is_file() {
        return Err(Failure::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let spec = cfg.mlp_spec(init_seed(cfg, 0)).rt()?;
    let (params, _) = load_params(path, &spec).map_err(|e| Failure::Config(e.to_string()))?;
    Ok((params, spec))
}

fn meta_test_cmd(cfg: &ExperimentConfig, init_path: &Path) -> Outcome<()> {
    let (init, spec) = load_checkpoint(cfg, init_path)?;
    let mut bank = DataBank::new(cfg);
    let ds = dataset(cfg, &mut bank, &test_task(cfg).rt()?, cfg.dataset_size)?;
    let dir = stage_dir(cfg, "meta-test")?;
    let curve = adaptation_curve(cfg, Algorithm::CqlMaml, "meta-test", 0, &init, &spec, &ds, cfg.adaptation_epochs).rt()?;
    emit(cfg, &dir, &[curve])
}

fn evaluate_cmd(cfg: &ExperimentConfig, path: &Path, lambda: Option<f64>) -> Outcome<()> {
    let (params, spec) = load_checkpoint(cfg, path)?;
    let mut task = test_task(cfg).rt()?;
    if let Some(l) = lambda {
        task = cfg.task(l, format!("eval-lambda-{l}")).map_err(|e| Failure::Config(e.to_string()))?;
    }
    let e = evaluate_policy(&params, &spec, &task, &eval_seeds(cfg, 0), None).rt()?;
    let report = json!({
        "checkpoint": path,
        "task_id": task.task_id,
        "lambda": task.lambda_tradeoff,
        "evaluation": e,
        "joint_objective": e.joint_objective(task.lambda_tradeoff),
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    let dir = stage_dir(cfg, "evaluate")?;
    write_atomic(&dir.join("evaluation.json"), text.as_bytes()).rt()?;
    println!("{text}");
    Ok(())
}
