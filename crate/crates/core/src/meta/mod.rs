//! MAML over Q-learning objectives: inner adaptation on support shots,
//! meta-loss on query batches, and an Adam outer step on the shared
//! initialization.

mod objective;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use objective::{hvp, maml_gradient, unroll, Objective, QObjective, Quadratic};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, MlpSpec, ParamVector};
use crate::offline::{train_offline, LossKind, OfflineConfig, OfflineDataset, OfflineRun, TrainSplit};
use crate::rl::TdConfig;
use crate::util::derive_seed;

/// Offline datasets of tasks drawn from one distribution.
#[derive(Clone, Debug)]
pub struct TaskSet {
    pub distribution_id: String,
    pub tasks: Vec<OfflineDataset>,
}

impl TaskSet {
    pub fn new(distribution_id: impl Into<String>, tasks: Vec<OfflineDataset>) -> Result<Self> {
        if let Some(first) = tasks.first() {
            let (s, a) = (first.header.state_dim, first.header.num_actions);
            for t in &tasks[1..] {
                if t.header.state_dim != s {
                    return Err(Error::dim("task state dimension", s, t.header.state_dim));
                }
                if t.header.num_actions != a {
                    return Err(Error::dim("task action count", a, t.header.num_actions));
                }
            }
        }
        Ok(Self {
            distribution_id: distribution_id.into(),
            tasks,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Hex sha256 over the distribution id and every task fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.distribution_id.as_bytes());
        for t in &self.tasks {
            h.update([0u8]);
            h.update(t.header.task_fingerprint.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub meta_epochs: usize,
    /// Support transitions sampled per adaptation.
    pub shots: usize,
    pub inner_steps: usize,
    /// Upper bound on the query batch; the effective size is `min(query_batch, |query|)`.
    pub query_batch: usize,
    pub loss: LossKind,
    pub second_order: bool,
    pub td: TdConfig,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-2,
            outer_lr: 1e-3,
            meta_epochs: 150,
            shots: 64,
            inner_steps: 1,
            query_batch: 64,
            loss: LossKind::Cql,
            second_order: false,
            td: TdConfig::default(),
            alpha: 1.0,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_lr.is_nan() || self.inner_lr < 0.0 || self.outer_lr.is_nan() || self.outer_lr <= 0.0 {
            return Err(Error::Config(format!(
                "need inner_lr >= 0 and outer_lr > 0 (got {}, {})",
                self.inner_lr, self.outer_lr
            )));
        }
        if self.shots == 0 || self.inner_steps == 0 || self.query_batch == 0 {
            return Err(Error::Config("shots, inner_steps and query_batch must be at least 1".into()));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Independent streams for support shots and query batches.
#[derive(Clone, Debug)]
pub struct MetaRng {
    pub support: ChaCha8Rng,
    pub batches: ChaCha8Rng,
}

impl MetaRng {
    pub fn new(seed: u64) -> Self {
        Self {
            support: ChaCha8Rng::seed_from_u64(derive_seed(seed, "support")),
            batches: ChaCha8Rng::seed_from_u64(derive_seed(seed, "batches")),
        }
    }
}

fn support_objective<'a>(
    init: &'a ParamVector<f64>,
    ds: &'a OfflineDataset,
    spec: &'a MlpSpec,
    cfg: &MetaConfig,
    rng: &mut MetaRng,
) -> Result<QObjective<'a>> {
    if ds.support_indices().is_empty() {
        return Err(Error::Empty("support set"));
    }
    let shots = ds.sample(TrainSplit::Support, cfg.shots, &mut rng.support)?;
    Ok(QObjective::new(shots, init, spec, cfg.td, cfg.loss.weights(cfg.alpha)))
}

/// Plain gradient steps on `k` support shots, starting from (and never mutating) `init`.
///
/// The TD target inside the adaptation is a frozen copy of `init`.
pub fn inner_adapt(
    init: &ParamVector<f64>,
    ds: &OfflineDataset,
    spec: &MlpSpec,
    cfg: &MetaConfig,
    rng: &mut MetaRng,
) -> Result<ParamVector<f64>> {
    cfg.validate()?;
    let support = support_objective(init, ds, spec, cfg, rng)?;
    let mut iterates = unroll(&support, init, cfg.inner_lr, cfg.inner_steps)?;
    Ok(iterates.pop().expect("non-empty"))
}

/// Query loss of one task after adaptation and its meta-gradient contribution.
fn eval_task(
    init: &ParamVector<f64>,
    ds: &OfflineDataset,
    spec: &MlpSpec,
    cfg: &MetaConfig,
    rng: &mut MetaRng,
) -> Result<(f64, ParamVector<f64>)> {
    if ds.query_indices().is_empty() {
        return Err(Error::Empty("query set"));
    }
    let support = support_objective(init, ds, spec, cfg, rng)?;
    let n = cfg.query_batch.min(ds.query_indices().len());
    let batch = ds.sample(TrainSplit::Query, n, &mut rng.batches)?;
    let query = QObjective::new(batch, init, spec, cfg.td, cfg.loss.weights(cfg.alpha));
    maml_gradient(&support, &query, init, cfg.inner_lr, cfg.inner_steps, cfg.second_order)
}

fn check_tasks(task_set: &TaskSet, spec: &MlpSpec) -> Result<()> {
    if task_set.is_empty() {
        return Err(Error::Empty("task set"));
    }
    for t in &task_set.tasks {
        t.check_compatible(spec)?;
    }
    Ok(())
}

/// Sum over tasks of the query loss at the adapted weights, with the per-task terms.
pub fn meta_loss(
    init: &ParamVector<f64>,
    task_set: &TaskSet,
    spec: &MlpSpec,
    cfg: &MetaConfig,
    rng: &mut MetaRng,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_tasks(task_set, spec)?;
    let per_task = task_set
        .tasks
        .iter()
        .map(|ds| eval_task(init, ds, spec, cfg, rng).map(|e| e.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((per_task.iter().sum(), per_task))
}

/// Meta-gradient of [`meta_loss`] with respect to `init`, with the loss and per-task terms.
pub fn meta_gradient(
    init: &ParamVector<f64>,
    task_set: &TaskSet,
    spec: &MlpSpec,
    cfg: &MetaConfig,
    rng: &mut MetaRng,
) -> Result<(f64, Vec<f64>, ParamVector<f64>)> {
    cfg.validate()?;
    check_tasks(task_set, spec)?;
    let mut total = init.zeros_like();
    let mut per_task = Vec::with_capacity(task_set.len());
    for ds in &task_set.tasks {
        let (loss, grad) = eval_task(init, ds, spec, cfg, rng)?;
        total.axpy(1.0, &grad)?;
        per_task.push(loss);
    }
    Ok((per_task.iter().sum(), per_task, total))
}

/// One Adam step on the initialization along the meta-gradient.
pub fn outer_update(
    init: &ParamVector<f64>,
    task_set: &TaskSet,
    spec: &MlpSpec,
    cfg: &MetaConfig,
    adam: &mut AdamState<f64>,
    rng: &mut MetaRng,
) -> Result<(ParamVector<f64>, f64, Vec<f64>)> {
    let (loss, per_task, grad) = meta_gradient(init, task_set, spec, cfg, rng)?;
    let mut next = init.clone();
    adam.update(&mut next, &grad)?;
    Ok((next, loss, per_task))
}

#[derive(Clone, Debug)]
pub struct MetaRun<E> {
    pub init: ParamVector<f64>,
    /// Meta-loss (sum over tasks) before each outer step.
    pub meta_losses: Vec<f64>,
    /// Mean per-task query loss before each outer step.
    pub mean_task_losses: Vec<f64>,
    /// Hook output at epoch 0 and after every outer step.
    pub evals: Vec<E>,
}

/// `meta_epochs` outer updates over the full task list, starting from `spec.init_params()`.
///
/// `eval_hook` is the only place an environment may be touched.
pub fn meta_train<E>(
    task_set: &TaskSet,
    spec: &MlpSpec,
    cfg: &MetaConfig,
    eval_hook: &mut dyn FnMut(usize, &ParamVector<f64>) -> Result<E>,
) -> Result<MetaRun<E>> {
    meta_train_from(&spec.init_params(), task_set, spec, cfg, eval_hook)
}

pub fn meta_train_from<E>(
    init: &ParamVector<f64>,
    task_set: &TaskSet,
    spec: &MlpSpec,
    cfg: &MetaConfig,
    eval_hook: &mut dyn FnMut(usize, &ParamVector<f64>) -> Result<E>,
) -> Result<MetaRun<E>> {
    cfg.validate()?;
    check_tasks(task_set, spec)?;
    init.check_spec(spec)?;
    let mut w0 = init.clone();
    let mut adam = AdamState::for_params(&w0, AdamConfig::new(cfg.outer_lr));
    let mut rng = MetaRng::new(cfg.seed);
    let mut meta_losses = Vec::with_capacity(cfg.meta_epochs);
    let mut mean_task_losses = Vec::with_capacity(cfg.meta_epochs);
    let mut evals = vec![eval_hook(0, &w0)?];
    for epoch in 1..=cfg.meta_epochs {
        let (next, loss, per_task) = outer_update(&w0, task_set, spec, cfg, &mut adam, &mut rng)?;
        w0 = next;
        meta_losses.push(loss);
        mean_task_losses.push(loss / per_task.len() as f64);
        evals.push(eval_hook(epoch, &w0)?);
    }
    Ok(MetaRun {
        init: w0,
        meta_losses,
        mean_task_losses,
        evals,
    })
}

/// Few-shot adaptation of a meta-initialization on an unseen task's support set.
pub fn meta_test<E>(
    init: &ParamVector<f64>,
    ds: &OfflineDataset,
    spec: &MlpSpec,
    adaptation_epochs: usize,
    adapt_cfg: &OfflineConfig,
    seed: u64,
    eval_hook: &mut dyn FnMut(usize, &ParamVector<f64>) -> Result<E>,
) -> Result<OfflineRun<E>> {
    let cfg = OfflineConfig {
        epochs: adaptation_epochs,
        split: TrainSplit::Support,
        ..adapt_cfg.clone()
    };
    train_offline(ds, init, spec, &cfg, seed, eval_hook)
}
