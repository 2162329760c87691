//! Policies and episode rollouts.

use crate::env::{self, encode_state, Action, EnvState, StepOutcome, TaskSpec};
use crate::error::Result;
use crate::nn::{argmax, forward, MlpSpec, ParamVector};

pub trait Policy {
    fn act(&mut self, state: &EnvState, task: &TaskSpec) -> Result<Action>;
}

impl<F> Policy for F
where
    F: FnMut(&EnvState, &TaskSpec) -> Result<Action>,
{
    fn act(&mut self, state: &EnvState, task: &TaskSpec) -> Result<Action> {
        self(state, task)
    }
}

/// Greedy policy of a Q-network.
pub struct GreedyQ<'a> {
    pub params: &'a ParamVector<f64>,
    pub spec: &'a MlpSpec,
}

impl<'a> GreedyQ<'a> {
    pub fn new(params: &'a ParamVector<f64>, spec: &'a MlpSpec) -> Self {
        Self { params, spec }
    }

    pub fn action_index(&self, state: &EnvState, task: &TaskSpec) -> Result<usize> {
        let q = forward(self.params, self.spec, &encode_state(state, &task.env))?;
        Ok(argmax(&q))
    }
}

impl Policy for GreedyQ<'_> {
    fn act(&mut self, state: &EnvState, task: &TaskSpec) -> Result<Action> {
        Action::decode(self.action_index(state, task)?, task.env.num_devices)
    }
}

/// Per-episode totals of one rollout.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub reward_sum: f64,
    /// Time average of `Σ_k δ_k A_k`.
    pub mean_weighted_aoi: f64,
    /// Time average of the per-device mean transmit power, watts.
    pub mean_power_w: f64,
    /// Steps spent inside the rain region.
    pub outage_steps: u64,
    pub steps: usize,
}

/// Roll out one full episode from `reset(task, seed)`.
pub fn run_episode(
    policy: &mut impl Policy,
    task: &TaskSpec,
    seed: u64,
    mut on_step: impl FnMut(&EnvState, &Action, &StepOutcome),
) -> Result<EpisodeStats> {
    let mut state = env::reset(task, seed);
    let mut stats = EpisodeStats::default();
    let k = task.env.num_devices as f64;
    loop {
        let action = policy.act(&state, task)?;
        let out = env::step(&state, &action, task)?;
        on_step(&state, &action, &out);
        stats.reward_sum += out.reward;
        stats.mean_weighted_aoi += out.info.weighted_aoi;
        stats.mean_power_w += out.info.power_sum_w / k;
        stats.outage_steps += out.info.in_rain as u64;
        stats.steps += 1;
        let done = out.done;
        state = out.next_state;
        if done {
            break;
        }
    }
    stats.mean_weighted_aoi /= stats.steps as f64;
    stats.mean_power_w /= stats.steps as f64;
    Ok(stats)
}
