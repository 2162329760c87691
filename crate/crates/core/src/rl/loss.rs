//! Mini-batch Q losses with exact gradients.
//!
//! Every Q objective here is `bellman_weight · TD² + penalty_weight · (lse − Q(s,a))`
//! averaged over the batch. The target network enters only through the TD
//! target and never receives gradient.

use serde::{Deserialize, Serialize};

use super::Transition;
use crate::error::{Error, Result};
use crate::nn::{backprop, forward_lifted, forward_trace, logsumexp, softmax, MlpSpec, ParamVector};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdConfig {
    pub gamma: f64,
    /// Multiplier applied to logged rewards before they enter the target.
    pub reward_scale: f64,
}

impl TdConfig {
    pub fn new(gamma: f64) -> Self {
        Self { gamma, reward_scale: 1.0 }
    }

    pub fn with_reward_scale(mut self, s: f64) -> Self {
        self.reward_scale = s;
        self
    }
}

impl Default for TdConfig {
    fn default() -> Self {
        Self::new(0.99)
    }
}

/// `r` for terminal transitions, else `r + γ · max_a' Q̂(s', a')`.
pub fn td_target<F: Scalar>(t: &Transition, target: &ParamVector<F>, spec: &MlpSpec, td: &TdConfig) -> Result<F> {
    let r = F::lit(t.reward * td.reward_scale);
    if t.done || td.gamma == 0.0 {
        return Ok(r);
    }
    let q_next = forward_lifted(target, spec, &t.next_state)?;
    let best = q_next.into_iter().reduce(F::max_of).ok_or(Error::Empty("target network output"))?;
    Ok(r + F::lit(td.gamma) * best)
}

/// Mixture weights of the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QLossWeights {
    pub bellman: f64,
    pub penalty: f64,
}

impl QLossWeights {
    pub const DQN: Self = Self {
        bellman: 1.0,
        penalty: 0.0,
    };

    pub fn cql(alpha: f64) -> Self {
        Self {
            bellman: 0.5,
            penalty: alpha,
        }
    }
}

/// Value and gradient of the weighted Q objective on one batch.
pub fn weighted_q_loss<F: Scalar>(
    batch: &[&Transition],
    params: &ParamVector<F>,
    target: Option<&ParamVector<F>>,
    spec: &MlpSpec,
    td: &TdConfig,
    weights: QLossWeights,
) -> Result<(F, ParamVector<F>)> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    params.check_spec(spec)?;
    let use_bellman = weights.bellman != 0.0;
    let use_penalty = weights.penalty != 0.0;
    let target = match (use_bellman, target) {
        (true, Some(t)) => {
            t.check_spec(spec)?;
            Some(t)
        }
        (true, None) => return Err(Error::Config("the Bellman term needs target parameters".into())),
        (false, _) => None,
    };
    let n = F::lit(batch.len() as f64);
    let wb = F::lit(weights.bellman);
    let wp = F::lit(weights.penalty);
    let two = F::lit(2.0);
    let mut bellman_sum = F::zero();
    let mut penalty_sum = F::zero();
    let mut grad = params.zeros_like();
    let mut upstream = vec![F::zero(); spec.output_dim];
    for t in batch {
        t.validate(spec.input_dim, spec.output_dim)?;
        let x: Vec<F> = t.state.iter().map(|&v| F::lit(v)).collect();
        let trace = forward_trace(params, spec, &x)?;
        let q = trace.output();
        upstream.iter_mut().for_each(|u| *u = F::zero());
        if let Some(tg) = target {
            let y = td_target(t, tg, spec, td)?;
            let err = q[t.action] - y;
            bellman_sum += err * err;
            upstream[t.action] += wb * two * err / n;
        }
        if use_penalty {
            let lse = logsumexp(q)?;
            penalty_sum += lse - q[t.action];
            for (u, p) in upstream.iter_mut().zip(softmax(q)?) {
                *u += wp * p / n;
            }
            upstream[t.action] -= wp / n;
        }
        backprop(params, spec, &trace, &upstream, &mut grad)?;
    }
    let loss = wb * bellman_sum / n + wp * penalty_sum / n;
    Ok((loss, grad))
}

/// Mean squared TD error and its gradient, target held fixed.
pub fn dqn_loss<F: Scalar>(
    batch: &[&Transition],
    params: &ParamVector<F>,
    target: &ParamVector<F>,
    spec: &MlpSpec,
    td: &TdConfig,
) -> Result<(F, ParamVector<F>)> {
    weighted_q_loss(batch, params, Some(target), spec, td, QLossWeights::DQN)
}
