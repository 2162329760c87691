use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `params − lr · gradient`.
pub fn sgd_step<F: Scalar>(params: &ParamVector<F>, gradient: &ParamVector<F>, learning_rate: F) -> Result<ParamVector<F>> {
    let mut out = params.clone();
    out.axpy(-learning_rate, gradient)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F = f64> {
    pub first_moment: Vec<F>,
    pub second_moment: Vec<F>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: vec![F::zero(); len],
            second_moment: vec![F::zero(); len],
            step_count: 0,
            config,
        }
    }

    pub fn for_params(params: &ParamVector<F>, config: AdamConfig) -> Self {
        Self::new(params.len(), config)
    }

    /// In-place update of `params`.
    pub fn update(&mut self, params: &mut ParamVector<F>, gradient: &ParamVector<F>) -> Result<()> {
        params.check_layout(gradient)?;
        if self.first_moment.len() != params.len() {
            return Err(Error::Layout(format!(
                "optimizer state for {} parameters applied to {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let c = self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let t = self.step_count as i32;
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2 = F::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (F::lit(c.learning_rate), F::lit(c.eps));
        let one = F::one();
        for (((p, &g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(gradient.values())
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Pure form of [`AdamState::update`].
pub fn adam_step<F: Scalar>(
    params: &ParamVector<F>,
    gradient: &ParamVector<F>,
    mut state: AdamState<F>,
) -> Result<(ParamVector<F>, AdamState<F>)> {
    let mut out = params.clone();
    state.update(&mut out, gradient)?;
    Ok((out, state))
}
