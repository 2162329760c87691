//! Dense Q-network engine: fixed MLP topology, exact backpropagation,
//! flat parameter vectors and the optimizers MAML needs.

pub mod io;
mod optim;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};


use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    z
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative<F: Scalar>(self, z: F, a: F) -> F {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => F::one() - a * a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    He,
    Xavier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub init_scheme: InitScheme,
    pub init_seed: u64,
}

impl MlpSpec {
    pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];

    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: Self::DEFAULT_HIDDEN.to_vec(),
            output_dim,
            activation: Activation::Relu,
            init_scheme: InitScheme::He,
            init_seed: 0,
        }
    }

    /// Q-network for an environment: `2+K` inputs, `5K` outputs.
    pub fn for_env(env: &crate::env::EnvConfig, hidden_dims: &[usize]) -> Self {
        Self::new(env.state_dim(), env.num_actions()).with_hidden(hidden_dims)
    }

    pub fn with_hidden(mut self, hidden_dims: &[usize]) -> Self {
        self.hidden_dims = hidden_dims.to_vec();
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_init(mut self, scheme: InitScheme, seed: u64) -> Self {
        self.init_scheme = scheme;
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!("all layer widths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    pub fn num_params(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layout(&self) -> Layout {
        let dims = self.dims();
        let mut segments = Vec::new();
        let mut offset = 0;
        for (layer, w) in dims.windows(2).enumerate() {
            let (cols, rows) = (w[0], w[1]);
            segments.push(Segment {
                layer,
                kind: SegmentKind::Weight,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
            segments.push(Segment {
                layer,
                kind: SegmentKind::Bias,
                offset,
                rows,
                cols: 1,
            });
            offset += rows;
        }
        Layout { segments, len: offset }
    }

    /// Identifies the topology; initialization settings are not part of it.
    pub fn fingerprint(&self) -> [u8; 32] {
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        let text = format!("mlp|{:?}|{act}", self.dims());
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn zeros<F: Scalar>(&self) -> ParamVector<F> {
        let layout = Arc::new(self.layout());
        ParamVector {
            values: vec![F::zero(); layout.len],
            layout,
        }
    }

    /// Seeded random initialization; biases start at zero.
    pub fn init_params<F: Scalar>(&self) -> ParamVector<F> {
        let mut p = self.zeros::<F>();
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let segments = p.layout.segments.clone();
        for seg in segments.iter().filter(|s| s.kind == SegmentKind::Weight) {
            let (fan_in, fan_out) = (seg.cols as f64, seg.rows as f64);
            let slot = &mut p.values[seg.offset..seg.offset + seg.len()];
            match self.init_scheme {
                InitScheme::He => {
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    slot.iter_mut().for_each(|v| *v = F::lit(dist.sample(&mut rng)));
                }
                InitScheme::Xavier => {
                    let bound = (6.0 / (fan_in + fan_out)).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    slot.iter_mut().for_each(|v| *v = F::lit(dist.sample(&mut rng)));
                }
            }
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Weight,
    Bias,
}

/// Contiguous block of the flat vector. Weights are row-major `rows × cols`
/// with `rows` = layer output width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    /// Single unstructured block, for objectives that are not networks.
    pub fn flat(len: usize) -> Self {
        Self {
            segments: vec![Segment {
                layer: 0,
                kind: SegmentKind::Weight,
                offset: 0,
                rows: len,
                cols: 1,
            }],
            len,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Flat, ordered view of every network weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<F = f64> {
    values: Vec<F>,
    layout: Arc<Layout>,
}

impl<F: Scalar> ParamVector<F> {
    pub fn from_values(layout: Layout, values: Vec<F>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::dim("parameter vector", layout.len, values.len()));
        }
        Ok(Self {
            values,
            layout: Arc::new(layout),
        })
    }

    pub fn flat(values: Vec<F>) -> Self {
        let layout = Arc::new(Layout::flat(values.len()));
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Replace the values, keeping the layout.
    pub fn set_values(&mut self, values: &[F]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::dim("parameter vector", self.values.len(), values.len()));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![F::zero(); self.values.len()],
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn check_layout(&self, other: &ParamVector<impl Scalar>) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "{} parameters vs {} parameters with a different segment table",
                self.len(),
                other.len()
            )))
        }
    }

    pub fn check_spec(&self, spec: &MlpSpec) -> Result<()> {
        if *self.layout != spec.layout() {
            return Err(Error::Layout(format!(
                "parameters ({}) do not match network {:?}",
                self.len(),
                spec.dims()
            )));
        }
        Ok(())
    }

    pub fn segment(&self, seg: &Segment) -> &[F] {
        &self.values[seg.range()]
    }

    /// Convert elementwise, keeping the layout.
    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G) -> ParamVector<G> {
        ParamVector {
            values: self.values.iter().map(|&v| f(v)).collect(),
            layout: Arc::clone(&self.layout),
        }
    }

    /// `self += scale · other`.
    pub fn axpy(&mut self, scale: F, other: &ParamVector<F>) -> Result<()> {
        self.check_layout(other)?;
        self.values.iter_mut().zip(&other.values).for_each(|(a, &b)| *a += scale * b);
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn dot(&self, other: &ParamVector<F>) -> F {
        self.values.iter().zip(&other.values).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm(&self) -> F {
        self.dot(self).sqrt()
    }
}

/// One dense layer `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<F> {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<F>,
    pub bias: Vec<F>,
}

/// Layered view of a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    pub spec: MlpSpec,
    pub layers: Vec<DenseLayer<F>>,
}

impl<F: Scalar> Mlp<F> {
    pub fn from_params(params: &ParamVector<F>, spec: &MlpSpec) -> Result<Self> {
        params.check_spec(spec)?;
        let layers = params
            .layout
            .segments
            .chunks(2)
            .map(|pair| DenseLayer {
                rows: pair[0].rows,
                cols: pair[0].cols,
                weights: params.segment(&pair[0]).to_vec(),
                bias: params.segment(&pair[1]).to_vec(),
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn to_params(&self) -> ParamVector<F> {
        let mut p = self.spec.zeros::<F>();
        let mut off = 0;
        for l in &self.layers {
            p.values[off..off + l.weights.len()].copy_from_slice(&l.weights);
            off += l.weights.len();
            p.values[off..off + l.bias.len()].copy_from_slice(&l.bias);
            off += l.bias.len();
        }
        p
    }
}

/// Forward activations kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    /// Input to each layer; `inputs[0]` is the state vector.
    inputs: Vec<Vec<F>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<F>>,
    output: Vec<F>,
}

impl<F> ForwardTrace<F> {
    pub fn output(&self) -> &[F] {
        &self.output
    }
}

fn check_input(spec: &MlpSpec, len: usize) -> Result<()> {
    if len != spec.input_dim {
        return Err(Error::dim("network input", spec.input_dim, len));
    }
    Ok(())
}

#[inline]
fn affine<F: Scalar>(w: &[F], b: &[F], x: &[F], out: &mut Vec<F>) {
    let cols = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(r, &bias)| {
        let row = &w[r * cols..(r + 1) * cols];
        row.iter().zip(x).fold(bias, |acc, (&wi, &xi)| acc + wi * xi)
    }));
}

/// Forward pass keeping every intermediate needed by [`backprop`].
pub fn forward_trace<F: Scalar>(params: &ParamVector<F>, spec: &MlpSpec, x: &[F]) -> Result<ForwardTrace<F>> {
    check_input(spec, x.len())?;
    let segs = &params.layout.segments;
    let n_layers = segs.len() / 2;
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers.saturating_sub(1));
    inputs.push(x.to_vec());
    let mut z = Vec::new();
    for l in 0..n_layers {
        let (ws, bs) = (&segs[2 * l], &segs[2 * l + 1]);
        affine(params.segment(ws), params.segment(bs), &inputs[l], &mut z);
        if l + 1 < n_layers {
            let a: Vec<F> = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre.push(std::mem::take(&mut z));
            inputs.push(a);
        }
    }
    Ok(ForwardTrace { inputs, pre, output: z })
}

/// Q-values for one state vector.
pub fn forward<F: Scalar>(params: &ParamVector<F>, spec: &MlpSpec, x: &[F]) -> Result<Vec<F>> {
    params.check_spec(spec)?;
    check_input(spec, x.len())?;
    let segs = &params.layout.segments;
    let n_layers = segs.len() / 2;
    let mut a = x.to_vec();
    let mut z = Vec::new();
    for l in 0..n_layers {
        affine(params.segment(&segs[2 * l]), params.segment(&segs[2 * l + 1]), &a, &mut z);
        if l + 1 < n_layers {
            a.clear();
            a.extend(z.iter().map(|&v| spec.activation.apply(v)));
        }
    }
    Ok(z)
}

/// Q-values for a state given in `f64`, evaluated in the parameter scalar.
pub fn forward_lifted<F: Scalar>(params: &ParamVector<F>, spec: &MlpSpec, x: &[f64]) -> Result<Vec<F>> {
    let xs: Vec<F> = x.iter().map(|&v| F::lit(v)).collect();
    forward(params, spec, &xs)
}

/// Accumulate `upstreamᵀ · ∂output/∂params` for one traced example into `grad`.
pub fn backprop<F: Scalar>(
    params: &ParamVector<F>,
    spec: &MlpSpec,
    trace: &ForwardTrace<F>,
    upstream: &[F],
    grad: &mut ParamVector<F>,
) -> Result<()> {
    if upstream.len() != spec.output_dim {
        return Err(Error::dim("upstream gradient", spec.output_dim, upstream.len()));
    }
    let segs = &params.layout.segments;
    let n_layers = segs.len() / 2;
    let mut delta = upstream.to_vec();
    for l in (0..n_layers).rev() {
        let (ws, bs) = (segs[2 * l], segs[2 * l + 1]);
        let input = &trace.inputs[l];
        let cols = ws.cols;
        {
            let gw = &mut grad.values[ws.range()];
            for (r, &d) in delta.iter().enumerate() {
                if d.is_zero() {
                    continue;
                }
                let row = &mut gw[r * cols..(r + 1) * cols];
                row.iter_mut().zip(input).for_each(|(g, &x)| *g += d * x);
            }
        }
        {
            let gb = &mut grad.values[bs.range()];
            gb.iter_mut().zip(&delta).for_each(|(g, &d)| *g += d);
        }
        if l > 0 {
            let w = params.segment(&ws);
            let mut back = vec![F::zero(); cols];
            for (r, &d) in delta.iter().enumerate() {
                if d.is_zero() {
                    continue;
                }
                let row = &w[r * cols..(r + 1) * cols];
                back.iter_mut().zip(row).for_each(|(b, &wi)| *b += d * wi);
            }
            let z = &trace.pre[l - 1];
            let a = &trace.inputs[l];
            delta = back
                .into_iter()
                .zip(z.iter().zip(a))
                .map(|(b, (&zi, &ai))| b * spec.activation.derivative(zi, ai))
                .collect();
        }
    }
    Ok(())
}

/// Gradient of `Σ_i upstream_iᵀ · f(x_i)` with respect to the parameters.
pub fn backward<F: Scalar>(params: &ParamVector<F>, spec: &MlpSpec, batch: &[(Vec<F>, Vec<F>)]) -> Result<ParamVector<F>> {
    if batch.is_empty() {
        return Err(Error::Empty("backward batch"));
    }
    params.check_spec(spec)?;
    let mut grad = params.zeros_like();
    for (x, up) in batch {
        let trace = forward_trace(params, spec, x)?;
        backprop(params, spec, &trace, up, &mut grad)?;
    }
    Ok(grad)
}

/// Max-shifted `ln Σ exp(v_i)`.
pub fn logsumexp<F: Scalar>(values: &[F]) -> Result<F> {
    let m = values
        .iter()
        .copied()
        .reduce(F::max_of)
        .ok_or(Error::Empty("logsumexp input"))?;
    let s: F = values.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

/// Softmax, the gradient of [`logsumexp`].
pub fn softmax<F: Scalar>(values: &[F]) -> Result<Vec<F>> {
    let lse = logsumexp(values)?;
    Ok(values.iter().map(|&v| (v - lse).exp()).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: PartialOrd + Copy>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> MlpSpec {
        MlpSpec::new(3, 4).with_hidden(&[5, 6]).with_init(InitScheme::He, 7)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = tiny_spec();
        let p = spec.zeros::<f64>();
        assert_eq!(forward(&p, &spec, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn relu_gates_negative_input() {
        let spec = MlpSpec::new(1, 1).with_hidden(&[1]);
        let p = ParamVector::from_values(spec.layout(), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(forward(&p, &spec, &[-1.0]).unwrap(), vec![0.0]);
        assert_eq!(forward(&p, &spec, &[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn dimension_errors() {
        let spec = tiny_spec();
        let p = spec.init_params::<f64>();
        assert!(forward(&p, &spec, &[1.0]).is_err());
        assert!(backward(&p, &spec, &[]).is_err());
        assert!(backward(&p, &spec, &[(vec![0.0; 3], vec![0.0; 2])]).is_err());
        let other = MlpSpec::new(3, 4).with_hidden(&[5, 5]);
        assert!(forward(&p, &other, &[0.0; 3]).is_err());
    }

    #[test]
    fn layout_counts_and_round_trip() {
        let spec = tiny_spec();
        assert_eq!(spec.num_params(), 3 * 5 + 5 + 5 * 6 + 6 + 6 * 4 + 4);
        let p = spec.init_params::<f64>();
        assert_eq!(p.len(), spec.num_params());
        let net = Mlp::from_params(&p, &spec).unwrap();
        assert_eq!(net.layers.len(), 3);
        let back = net.to_params();
        assert_eq!(back.values(), p.values());
        assert_eq!(back.layout(), p.layout());
    }

    #[test]
    fn init_is_seeded() {
        let spec = tiny_spec();
        assert_eq!(spec.init_params::<f64>(), spec.init_params::<f64>());
        let other = spec.clone().with_init(InitScheme::He, 8);
        assert_ne!(spec.init_params::<f64>().values(), other.init_params::<f64>().values());
        let xav = spec.clone().with_init(InitScheme::Xavier, 7).init_params::<f64>();
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(xav.values()[..15].iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let spec = tiny_spec();
        let p = spec.init_params::<f64>();
        let g = backward(&p, &spec, &[(vec![0.3, -0.2, 0.9], vec![0.0; 4])]).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_singletons() {
        let spec = tiny_spec();
        let p = spec.init_params::<f64>();
        let a = (vec![0.3, -0.2, 0.9], vec![1.0, 0.5, -1.0, 2.0]);
        let b = (vec![-0.7, 0.1, 0.4], vec![0.2, 0.0, 0.3, -0.4]);
        let both = backward(&p, &spec, &[a.clone(), b.clone()]).unwrap();
        let mut sum = backward(&p, &spec, &[a]).unwrap();
        sum.axpy(1.0, &backward(&p, &spec, &[b]).unwrap()).unwrap();
        assert_eq!(both.values(), sum.values());
    }

    #[test]
    fn logsumexp_identities() {
        let c = 2.5f64;
        assert!((logsumexp(&[c; 7]).unwrap() - (c + 7f64.ln())).abs() < 1e-15);
        assert_eq!(logsumexp(&[-3.25f64]).unwrap(), -3.25);
        let v = logsumexp(&[1000.0f64, 1000.5]).unwrap();
        assert!((v - (1000.5 + (1.0 + (-0.5f64).exp()).ln())).abs() < 1e-12);
        assert!(logsumexp::<f64>(&[]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0, 5.0, 1.0]), 0);
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let spec = tiny_spec();
        let p64 = spec.init_params::<f64>();
        let p32 = p64.map(|v| v as f32);
        let x = [0.25, 0.5, -0.75];
        let q64 = forward(&p64, &spec, &x).unwrap();
        let q32 = forward_lifted(&p32, &spec, &x).unwrap();
        for (a, b) in q64.iter().zip(&q32) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }
}
