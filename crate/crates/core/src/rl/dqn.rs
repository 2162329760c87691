use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dqn_loss, epsilon_greedy, EpsilonSchedule, ReplayBuffer, TdConfig, Transition};
use crate::env::{self, encode_state, Action, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{forward, AdamConfig, AdamState, MlpSpec, ParamVector};
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub episodes: usize,
    pub schedule: EpsilonSchedule,
    pub td: TdConfig,
    pub adam: AdamConfig,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub target_sync_every: u64,
    /// Snapshot the replay buffer after this episode (1-based) instead of at the end.
    pub export_after_episode: Option<usize>,
}

impl DqnConfig {
    /// Defaults for a task: 1.0 → 0.05 over the first half of all steps,
    /// room for 50 episodes, batches of 64, hard sync every 100 updates.
    pub fn for_task(task: &TaskSpec, episodes: usize) -> Self {
        let t = task.env.episode_length;
        let total = (episodes * t) as u64;
        Self {
            episodes,
            schedule: EpsilonSchedule::over_fraction(1.0, 0.05, total, 0.5).expect("valid schedule"),
            td: TdConfig::new(0.99),
            adam: AdamConfig::new(1e-3),
            buffer_capacity: 50 * t,
            batch_size: 64,
            target_sync_every: 100,
            export_after_episode: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.buffer_capacity == 0 || self.batch_size == 0 || self.target_sync_every == 0 {
            return Err(Error::Config(
                "buffer_capacity, batch_size and target_sync_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub reward: f64,
    pub epsilon: f64,
    pub loss_mean: f64,
}

#[derive(Clone, Debug)]
pub struct DqnRun {
    pub params: ParamVector<f64>,
    /// Final buffer, or the snapshot requested by `export_after_episode`.
    pub buffer: ReplayBuffer,
    pub log: Vec<EpisodeLog>,
}

/// Online deep Q-learning with experience replay and a hard-synced target.
pub fn train_dqn(task: &TaskSpec, spec: &MlpSpec, cfg: &DqnConfig, seed: u64) -> Result<DqnRun> {
    task.validate()?;
    cfg.validate()?;
    if spec.input_dim != task.env.state_dim() || spec.output_dim != task.env.num_actions() {
        return Err(Error::dim("network for task", task.env.num_actions(), spec.output_dim));
    }
    let mut params = spec.init_params::<f64>();
    let mut target = params.clone();
    let mut adam = AdamState::for_params(&params, cfg.adam);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut snapshot = None;
    let mut act_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "explore"));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batches"));
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut updates: u64 = 0;
    let k = task.env.num_devices;

    for episode in 0..cfg.episodes {
        let mut state = env::reset(task, derive_seed(seed, &format!("episode{episode}")));
        let mut reward_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut eps;
        loop {
            let obs = encode_state(&state, &task.env);
            let q = forward(&params, spec, &obs)?;
            eps = cfg.schedule.value(updates);
            let a = epsilon_greedy(&q, eps, &mut act_rng);
            let out = env::step(&state, &Action::decode(a, k)?, task)?;
            reward_sum += out.reward;
            buffer.push(Transition {
                state: obs,
                action: a,
                reward: out.reward,
                next_state: encode_state(&out.next_state, &task.env),
                done: out.done,
            });

            if updates.is_multiple_of(cfg.target_sync_every) {
                target = params.clone();
            }
            let batch = buffer.sample(&mut batch_rng, cfg.batch_size.min(buffer.len()));
            let (loss, grad) = dqn_loss(&batch, &params, &target, spec, &cfg.td)?;
            adam.update(&mut params, &grad)?;
            updates += 1;
            loss_sum += loss;

            let done = out.done;
            state = out.next_state;
            if done {
                break;
            }
        }
        log.push(EpisodeLog {
            episode: episode + 1,
            reward: reward_sum,
            epsilon: eps,
            loss_mean: loss_sum / task.env.episode_length as f64,
        });
        if cfg.export_after_episode == Some(episode + 1) {
            snapshot = Some(buffer.clone());
        }
    }
    Ok(DqnRun {
        params,
        buffer: snapshot.unwrap_or(buffer),
        log,
    })
}
