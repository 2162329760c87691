use serde::{Deserialize, Serialize};

use crate::env::{RainRegion, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{MlpSpec, ParamVector};
use crate::rl::{run_episode, GreedyQ, Policy};

/// Averages of greedy rollouts over a set of evaluation seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub episodes: usize,
    /// Undiscounted episode return.
    pub mean_reward: f64,
    /// Time-averaged `Σ_k δ_k A_k`.
    pub mean_aoi: f64,
    /// Time-averaged per-device transmit power, watts.
    pub mean_power_w: f64,
    /// Steps per episode spent inside the rain region.
    pub mean_outages: f64,
}

impl PolicyEval {
    /// `mean_aoi + λ · mean_power_w`, the negated mean per-step reward.
    pub fn joint_objective(&self, lambda: f64) -> f64 {
        self.mean_aoi + lambda * self.mean_power_w
    }

    /// Episode-weighted pooling of evaluations over disjoint seed sets.
    pub fn pool(parts: &[PolicyEval]) -> PolicyEval {
        let n: usize = parts.iter().map(|p| p.episodes).sum();
        if n == 0 {
            return PolicyEval::default();
        }
        let avg = |f: fn(&PolicyEval) -> f64| parts.iter().map(|p| f(p) * p.episodes as f64).sum::<f64>() / n as f64;
        PolicyEval {
            episodes: n,
            mean_reward: avg(|p| p.mean_reward),
            mean_aoi: avg(|p| p.mean_aoi),
            mean_power_w: avg(|p| p.mean_power_w),
            mean_outages: avg(|p| p.mean_outages),
        }
    }
}

/// Roll `policy` out once per seed and average.
pub fn evaluate_with(policy: &mut impl Policy, task: &TaskSpec, eval_seeds: &[u64]) -> Result<PolicyEval> {
    if eval_seeds.is_empty() {
        return Err(Error::Empty("evaluation seeds"));
    }
    let mut acc = PolicyEval::default();
    for &seed in eval_seeds {
        let s = run_episode(policy, task, seed, |_, _, _| {})?;
        acc.mean_reward += s.reward_sum;
        acc.mean_aoi += s.mean_weighted_aoi;
        acc.mean_power_w += s.mean_power_w;
        acc.mean_outages += s.outage_steps as f64;
    }
    let n = eval_seeds.len() as f64;
    Ok(PolicyEval {
        episodes: eval_seeds.len(),
        mean_reward: acc.mean_reward / n,
        mean_aoi: acc.mean_aoi / n,
        mean_power_w: acc.mean_power_w / n,
        mean_outages: acc.mean_outages / n,
    })
}

/// Greedy evaluation of a Q-network; `rain_override` replaces the task's rain region.
pub fn evaluate_policy(
    params: &ParamVector<f64>,
    spec: &MlpSpec,
    task: &TaskSpec,
    eval_seeds: &[u64],
    rain_override: Option<&RainRegion>,
) -> Result<PolicyEval> {
    params.check_spec(spec)?;
    if spec.input_dim != task.env.state_dim() {
        return Err(Error::dim("network input vs task state", task.env.state_dim(), spec.input_dim));
    }
    if spec.output_dim != task.env.num_actions() {
        return Err(Error::dim("network output vs task actions", task.env.num_actions(), spec.output_dim));
    }
    let mut policy = GreedyQ::new(params, spec);
    match rain_override {
        Some(r) => {
            let t = task.clone().with_rain(r.clone())?;
            evaluate_with(&mut policy, &t, eval_seeds)
        }
        None => evaluate_with(&mut policy, task, eval_seeds),
    }
}
