use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{MlpSpec, ParamVector};
use crate::rl::loss::{weighted_q_loss, QLossWeights};
use crate::rl::{TdConfig, Transition};
use crate::scalar::Scalar;

/// Which Q objective an offline or meta learner optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cql,
    Dqn,
}

impl LossKind {
    pub fn weights(self, alpha: f64) -> QLossWeights {
        match self {
            LossKind::Cql => QLossWeights::cql(alpha),
            LossKind::Dqn => QLossWeights::DQN,
        }
    }
}

/// Mean of `logsumexp_ã Q(s, ã) − Q(s, a_logged)` over the batch.
pub fn cql_penalty<F: Scalar>(batch: &[&Transition], params: &ParamVector<F>, spec: &MlpSpec) -> Result<(F, ParamVector<F>)> {
    let w = QLossWeights {
        bellman: 0.0,
        penalty: 1.0,
    };
    weighted_q_loss(batch, params, None, spec, &TdConfig::default(), w)
}

/// `½ · L_DQN + α · penalty`.
pub fn cql_loss<F: Scalar>(
    batch: &[&Transition],
    params: &ParamVector<F>,
    target: &ParamVector<F>,
    spec: &MlpSpec,
    td: &TdConfig,
    alpha: f64,
) -> Result<(F, ParamVector<F>)> {
    weighted_q_loss(batch, params, Some(target), spec, td, QLossWeights::cql(alpha))
}

/// Dispatch on [`LossKind`].
pub fn q_objective<F: Scalar>(
    kind: LossKind,
    batch: &[&Transition],
    params: &ParamVector<F>,
    target: &ParamVector<F>,
    spec: &MlpSpec,
    td: &TdConfig,
    alpha: f64,
) -> Result<(F, ParamVector<F>)> {
    weighted_q_loss(batch, params, Some(target), spec, td, kind.weights(alpha))
}
