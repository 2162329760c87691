use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cql::{q_objective, LossKind};
use super::dataset::{OfflineDataset, TrainSplit};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, MlpSpec, ParamVector};
use crate::rl::TdConfig;
use crate::util::derive_seed;

/// Hyperparameters of the offline Q-learning loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub epochs: usize,
    /// Upper bound; the effective batch is `min(batch_size, split size)`.
    pub batch_size: usize,
    pub td: TdConfig,
    pub alpha: f64,
    pub loss: LossKind,
    pub adam: AdamConfig,
    /// Hard target sync period, in gradient steps.
    pub target_sync_every: u64,
    /// Gradient steps per epoch (one batch per epoch by default); `None` means
    /// one pass over the split.
    pub updates_per_epoch: Option<usize>,
    pub split: TrainSplit,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            td: TdConfig::default(),
            alpha: 1.0,
            loss: LossKind::Cql,
            adam: AdamConfig::new(1e-3),
            target_sync_every: 100,
            updates_per_epoch: Some(1),
            split: TrainSplit::Full,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.target_sync_every == 0 || self.updates_per_epoch == Some(0) {
            return Err(Error::Config(
                "batch_size, target_sync_every and updates_per_epoch must be positive".into(),
            ));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }

    fn steps_per_epoch(&self, split_len: usize, batch: usize) -> usize {
        self.updates_per_epoch.unwrap_or_else(|| split_len.div_ceil(batch))
    }
}

#[derive(Clone, Debug)]
pub struct OfflineRun<E> {
    pub params: ParamVector<f64>,
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
    /// Hook output at epoch 0 (before training) and after every epoch.
    pub evals: Vec<E>,
}

/// Offline training on `dataset`, starting from `init`.
///
/// The only environment access is through `eval_hook`, which receives the
/// epoch index and the current parameters. Training itself reads only the
/// dataset.
pub fn train_offline<E>(
    dataset: &OfflineDataset,
    init: &ParamVector<f64>,
    spec: &MlpSpec,
    cfg: &OfflineConfig,
    seed: u64,
    eval_hook: &mut dyn FnMut(usize, &ParamVector<f64>) -> Result<E>,
) -> Result<OfflineRun<E>> {
    cfg.validate()?;
    dataset.check_compatible(spec)?;
    init.check_spec(spec)?;
    let split_len = dataset.indices(cfg.split).len();
    if split_len == 0 {
        return Err(Error::Empty("training split"));
    }
    let batch = cfg.batch_size.min(split_len);
    let steps = cfg.steps_per_epoch(split_len, batch);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batches"));
    let mut params = init.clone();
    let mut target = init.clone();
    let mut adam = AdamState::for_params(&params, cfg.adam);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut evals = Vec::with_capacity(cfg.epochs + 1);
    evals.push(eval_hook(0, &params)?);
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            if step.is_multiple_of(cfg.target_sync_every) {
                target = params.clone();
            }
            let b = dataset.sample(cfg.split, batch, &mut rng)?;
            let (loss, grad) = q_objective(cfg.loss, &b, &params, &target, spec, &cfg.td, cfg.alpha)?;
            adam.update(&mut params, &grad)?;
            total += loss;
            step += 1;
        }
        losses.push(total / steps as f64);
        evals.push(eval_hook(epoch, &params)?);
    }
    Ok(OfflineRun { params, losses, evals })
}

/// CQL with a fixed conservative weight; a thin wrapper over [`train_offline`].
pub fn train_cql<E>(
    dataset: &OfflineDataset,
    init: &ParamVector<f64>,
    spec: &MlpSpec,
    cfg: &OfflineConfig,
    seed: u64,
    eval_hook: &mut dyn FnMut(usize, &ParamVector<f64>) -> Result<E>,
) -> Result<OfflineRun<E>> {
    let cfg = OfflineConfig {
        loss: LossKind::Cql,
        ..cfg.clone()
    };
    train_offline(dataset, init, spec, &cfg, seed, eval_hook)
}
