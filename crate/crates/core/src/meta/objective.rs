use crate::error::Result;
use crate::nn::{sgd_step, MlpSpec, ParamVector};
use crate::rl::loss::{weighted_q_loss, QLossWeights};
use crate::rl::{TdConfig, Transition};
use crate::scalar::{Dual, Scalar};

/// A differentiable loss over a parameter vector, evaluable at any scalar type.
///
/// Evaluating at [`Dual`] parameters whose tangent is `v` yields a gradient
/// whose tangent is the Hessian-vector product `H v`.
pub trait Objective {
    fn eval<F: Scalar>(&self, params: &ParamVector<F>) -> Result<(F, ParamVector<F>)>;
}

/// Exact `∇²L(w) · v` by forward-over-reverse differentiation.
pub fn hvp<O: Objective>(obj: &O, w: &ParamVector<f64>, v: &ParamVector<f64>) -> Result<ParamVector<f64>> {
    w.check_layout(v)?;
    let mut lifted = w.map(Dual::constant);
    for (d, &t) in lifted.values_mut().iter_mut().zip(v.values()) {
        d.eps = t;
    }
    let (_, g) = obj.eval(&lifted)?;
    Ok(g.map(|d| d.eps))
}

/// `[w0, w1, .., w_n]` where `w_{i+1} = w_i − η ∇L(w_i)`.
pub fn unroll<O: Objective>(obj: &O, init: &ParamVector<f64>, lr: f64, steps: usize) -> Result<Vec<ParamVector<f64>>> {
    let mut iterates = Vec::with_capacity(steps + 1);
    iterates.push(init.clone());
    for _ in 0..steps {
        let w = iterates.last().expect("non-empty");
        let (_, g) = obj.eval(w)?;
        let next = sgd_step(w, &g, lr)?;
        iterates.push(next);
    }
    Ok(iterates)
}

/// Query loss after adaptation and its gradient with respect to `init`.
///
/// First order returns the query gradient at the adapted point. Second order
/// pulls it back through every inner step: `v ← (I − η H(w_i)) v`.
pub fn maml_gradient<S: Objective, Q: Objective>(
    support: &S,
    query: &Q,
    init: &ParamVector<f64>,
    lr: f64,
    steps: usize,
    second_order: bool,
) -> Result<(f64, ParamVector<f64>)> {
    let iterates = unroll(support, init, lr, steps)?;
    let (loss, mut grad) = query.eval(iterates.last().expect("non-empty"))?;
    if second_order {
        for w in iterates[..steps].iter().rev() {
            let hv = hvp(support, w, &grad)?;
            grad.axpy(-lr, &hv)?;
        }
    }
    Ok((loss, grad))
}

/// Weighted Q objective on a fixed batch with a frozen target network.
#[derive(Clone, Debug)]
pub struct QObjective<'a> {
    pub batch: Vec<&'a Transition>,
    pub target: &'a ParamVector<f64>,
    pub spec: &'a MlpSpec,
    pub td: TdConfig,
    pub weights: QLossWeights,
}

impl<'a> QObjective<'a> {
    pub fn new(
        batch: Vec<&'a Transition>,
        target: &'a ParamVector<f64>,
        spec: &'a MlpSpec,
        td: TdConfig,
        weights: QLossWeights,
    ) -> Self {
        Self {
            batch,
            target,
            spec,
            td,
            weights,
        }
    }
}

impl Objective for QObjective<'_> {
    fn eval<F: Scalar>(&self, params: &ParamVector<F>) -> Result<(F, ParamVector<F>)> {
        let target = self.target.map(F::lit);
        weighted_q_loss(&self.batch, params, Some(&target), self.spec, &self.td, self.weights)
    }
}

/// `L(w) = ½ c ‖w − center‖²`, a closed-form test objective.
#[derive(Clone, Copy, Debug)]
pub struct Quadratic {
    pub curvature: f64,
    pub center: f64,
}

impl Objective for Quadratic {
    fn eval<F: Scalar>(&self, params: &ParamVector<F>) -> Result<(F, ParamVector<F>)> {
        let c = F::lit(self.curvature);
        let m = F::lit(self.center);
        let half = F::lit(0.5);
        let grad = params.map(|w| c * (w - m));
        let loss = params.values().iter().map(|&w| half * c * (w - m) * (w - m)).sum();
        Ok((loss, grad))
    }
}
