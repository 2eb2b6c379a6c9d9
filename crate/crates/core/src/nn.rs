//! Feedforward network with hand-written backpropagation.
//!
//! The network is a ReLU feature extractor followed by two affine heads that
//! both read the last hidden activation `h`:
//!
//! - the evidential (task) head, `C` outputs
//! - the adversary head, `K` outputs
//!
//! The adversary head sits behind a gradient-reversal node: it is the identity
//! in the forward pass and multiplies the gradient flowing back into the
//! feature extractor by `-lambda_adv`.
//!
//! All parameters live in one flat vector ordered as
//! `[feature | evidential head | adversary head]`. The first two segments form
//! the shared model `theta`; the last one is the client-private `phi`.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z` with output `a`; ReLU uses 0 at `z = 0`.
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub num_groups: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkSpec {
    /// Two hidden layers of width 32.
    pub fn with_defaults(input_dim: usize, num_classes: usize, num_groups: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![32, 32],
            num_classes,
            num_groups,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.num_groups == 0 {
            return Err(Error::Config(
                "input_dim, num_classes and num_groups must be >= 1".into(),
            ));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("hidden_dims must be non-empty".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated non-empty")
    }
}

/// Position of one dense layer inside the flat parameter vector.
///
/// Weights are row-major with shape `(out_dim, in_dim)`, followed by the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSlot {
    pub in_dim: usize,
    pub out_dim: usize,
    pub offset: usize,
}

impl DenseSlot {
    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> usize {
        self.offset + row * self.in_dim + col
    }

    #[inline]
    pub fn bias(&self, row: usize) -> usize {
        self.offset + self.out_dim * self.in_dim + row
    }

    pub fn len(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// `out = W x + b`
    fn affine(&self, values: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let ws = &values[self.range()];
        let (w, b) = ws.split_at(self.out_dim * self.in_dim);
        for (row, bias) in w.chunks_exact(self.in_dim).zip(b) {
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(dot + bias);
        }
    }

    /// Accumulates `dW += delta x^T`, `db += delta` and returns `W^T delta`.
    fn backprop(&self, values: &[f64], x: &[f64], delta: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let mut upstream = vec![0.0; self.in_dim];
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = self.weight(r, 0);
            for c in 0..self.in_dim {
                grads[row + c] += d * x[c];
                upstream[c] += values[row + c] * d;
            }
            grads[self.bias(r)] += d;
        }
        upstream
    }
}

/// Which dense layer a flat index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerRef {
    Hidden(usize),
    TaskHead,
    AdversaryHead,
}

/// A single scalar parameter, addressed structurally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRef {
    Weight { layer: LayerRef, row: usize, col: usize },
    Bias { layer: LayerRef, row: usize },
}

#[derive(Debug, PartialEq)]
pub struct Layout {
    spec: NetworkSpec,
    hidden: Vec<DenseSlot>,
    task_head: DenseSlot,
    adversary_head: DenseSlot,
}

impl Layout {
    pub fn new(spec: NetworkSpec) -> Result<Arc<Self>> {
        spec.validate()?;
        let mut offset = 0;
        let mut hidden = Vec::with_capacity(spec.hidden_dims.len());
        let mut in_dim = spec.input_dim;
        for &out_dim in &spec.hidden_dims {
            let slot = DenseSlot {
                in_dim,
                out_dim,
                offset,
            };
            offset += slot.len();
            hidden.push(slot);
            in_dim = out_dim;
        }
        let task_head = DenseSlot {
            in_dim,
            out_dim: spec.num_classes,
            offset,
        };
        offset += task_head.len();
        let adversary_head = DenseSlot {
            in_dim,
            out_dim: spec.num_groups,
            offset,
        };
        Ok(Arc::new(Self {
            spec,
            hidden,
            task_head,
            adversary_head,
        }))
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn slot(&self, layer: LayerRef) -> DenseSlot {
        match layer {
            LayerRef::Hidden(i) => self.hidden[i],
            LayerRef::TaskHead => self.task_head,
            LayerRef::AdversaryHead => self.adversary_head,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerRef> + '_ {
        (0..self.hidden.len())
            .map(LayerRef::Hidden)
            .chain([LayerRef::TaskHead, LayerRef::AdversaryHead])
    }

    pub fn offset(&self, param: ParamRef) -> usize {
        match param {
            ParamRef::Weight { layer, row, col } => self.slot(layer).weight(row, col),
            ParamRef::Bias { layer, row } => self.slot(layer).bias(row),
        }
    }

    /// Feature extractor (`theta_f`).
    pub fn feature_range(&self) -> Range<usize> {
        0..self.task_head.offset
    }

    /// Evidential head (`theta_e`).
    pub fn evidential_range(&self) -> Range<usize> {
        self.task_head.range()
    }

    /// Shared model `theta = theta_f ∪ theta_e`.
    pub fn theta_range(&self) -> Range<usize> {
        0..self.adversary_head.offset
    }

    /// Adversary head (`phi`).
    pub fn phi_range(&self) -> Range<usize> {
        self.adversary_head.range()
    }

    pub fn total_len(&self) -> usize {
        self.adversary_head.offset + self.adversary_head.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParameterSet {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total_len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(layout: Arc<Layout>, rng: &mut R) -> Self {
        let mut params = Self::zeros(layout);
        let layout = Arc::clone(&params.layout);
        for layer in layout.layers() {
            let slot = layout.slot(layer);
            let limit = (6.0 / (slot.in_dim + slot.out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for i in slot.offset..slot.offset + slot.out_dim * slot.in_dim {
                params.values[i] = dist.sample(rng);
            }
        }
        params
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn theta(&self) -> &[f64] {
        &self.values[self.layout.theta_range()]
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        let r = self.layout.theta_range();
        &mut self.values[r]
    }

    pub fn phi(&self) -> &[f64] {
        &self.values[self.layout.phi_range()]
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        let r = self.layout.phi_range();
        &mut self.values[r]
    }

    pub fn get(&self, param: ParamRef) -> f64 {
        self.values[self.layout.offset(param)]
    }

    pub fn set(&mut self, param: ParamRef, value: f64) {
        let i = self.layout.offset(param);
        self.values[i] = value;
    }
}

/// Gradient with respect to every entry of a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { layout, values }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn feature(&self) -> &[f64] {
        &self.values[self.layout.feature_range()]
    }

    pub fn evidential(&self) -> &[f64] {
        &self.values[self.layout.evidential_range()]
    }

    pub fn phi(&self) -> &[f64] {
        &self.values[self.layout.phi_range()]
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Last hidden activation.
    pub h: Vec<f64>,
    /// Evidential head logits.
    pub z_task: Vec<f64>,
    /// Adversary head logits.
    pub z_adv: Vec<f64>,
}

/// Layer inputs and pre-activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// `inputs[i]` is the input of hidden layer `i`; the final entry is `h`.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

pub(crate) fn forward_trace(params: &ParameterSet, x: &[f64]) -> Result<(ForwardOutput, Trace)> {
    let layout = &params.layout;
    let spec = layout.spec();
    if x.len() != spec.input_dim {
        return Err(Error::Shape(format!(
            "input has {} entries, network expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    check_finite(x, "network input")?;

    let mut inputs = Vec::with_capacity(layout.hidden.len() + 1);
    let mut pre = Vec::with_capacity(layout.hidden.len());
    inputs.push(x.to_vec());
    for slot in &layout.hidden {
        let mut z = Vec::with_capacity(slot.out_dim);
        slot.affine(&params.values, inputs.last().expect("non-empty"), &mut z);
        let a: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
        pre.push(z);
        inputs.push(a);
    }
    let h = inputs.last().expect("non-empty");
    let mut z_task = Vec::with_capacity(spec.num_classes);
    layout.task_head.affine(&params.values, h, &mut z_task);
    let mut z_adv = Vec::with_capacity(spec.num_groups);
    layout.adversary_head.affine(&params.values, h, &mut z_adv);
    let out = ForwardOutput {
        h: h.clone(),
        z_task,
        z_adv,
    };
    Ok((out, Trace { inputs, pre }))
}

pub fn forward(params: &ParameterSet, x: &[f64]) -> Result<ForwardOutput> {
    forward_trace(params, x).map(|(out, _)| out)
}

/// Backward through the gradient-reversal node: `-lambda_adv * upstream`.
pub fn grl_backward(upstream: &[f64], lambda_adv: f64) -> Vec<f64> {
    upstream.iter().map(|g| -lambda_adv * g).collect()
}

/// Accumulates the gradient for one sample into `grads`.
pub(crate) fn backward_accumulate(
    params: &ParameterSet,
    trace: &Trace,
    upstream_task: &[f64],
    upstream_adv: &[f64],
    lambda_adv: f64,
    grads: &mut [f64],
) -> Result<()> {
    let layout = &params.layout;
    let spec = layout.spec();
    if upstream_task.len() != spec.num_classes || upstream_adv.len() != spec.num_groups {
        return Err(Error::Shape(format!(
            "upstream widths ({}, {}) do not match heads ({}, {})",
            upstream_task.len(),
            upstream_adv.len(),
            spec.num_classes,
            spec.num_groups
        )));
    }
    check_finite(upstream_task, "task upstream gradient")?;
    check_finite(upstream_adv, "adversary upstream gradient")?;

    let h = trace.inputs.last().expect("non-empty");
    let from_task = layout
        .task_head
        .backprop(&params.values, h, upstream_task, grads);
    let from_adv = layout
        .adversary_head
        .backprop(&params.values, h, upstream_adv, grads);
    let reversed = grl_backward(&from_adv, lambda_adv);
    let mut delta: Vec<f64> = from_task.iter().zip(&reversed).map(|(a, b)| a + b).collect();

    for (i, slot) in layout.hidden.iter().enumerate().rev() {
        for ((d, &z), &a) in delta.iter_mut().zip(&trace.pre[i]).zip(&trace.inputs[i + 1]) {
            *d *= spec.activation.derivative(z, a);
        }
        delta = slot.backprop(&params.values, &trace.inputs[i], &delta, grads);
    }
    Ok(())
}

/// Gradient of `L_task(z_task) + L_adv(z_adv)` with the adversary branch
/// reversed at the feature boundary.
///
/// `upstream_task` and `upstream_adv` are `dL/dz` for the two heads. The
/// adversary head receives its true gradient; the feature extractor receives
/// the task backprop plus `-lambda_adv` times the adversary backprop.
pub fn backward(
    params: &ParameterSet,
    x: &[f64],
    upstream_task: &[f64],
    upstream_adv: &[f64],
    lambda_adv: f64,
) -> Result<GradientSet> {
    let (_, trace) = forward_trace(params, x)?;
    let mut grads = GradientSet::zeros(Arc::clone(&params.layout));
    backward_accumulate(
        params,
        &trace,
        upstream_task,
        upstream_adv,
        lambda_adv,
        &mut grads.values,
    )?;
    Ok(grads)
}

/// `theta -= lr * grad`, `phi -= adversary_lr * grad`.
pub fn sgd_step(
    params: &ParameterSet,
    grads: &GradientSet,
    lr: f64,
    adversary_lr: f64,
) -> Result<ParameterSet> {
    if *params.layout != *grads.layout {
        return Err(Error::Shape("gradient layout differs from parameters".into()));
    }
    if !(lr > 0.0 && adversary_lr > 0.0) {
        return Err(Error::Domain("learning rates must be > 0".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("gradient".into()));
    }
    let mut next = params.clone();
    let theta = params.layout.theta_range();
    for (i, (p, g)) in next.values.iter_mut().zip(&grads.values).enumerate() {
        let rate = if theta.contains(&i) { lr } else { adversary_lr };
        *p -= rate * g;
    }
    Ok(next)
}
