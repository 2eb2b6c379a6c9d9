//! Adversary head, composite local loss and the joint (theta, phi) local step.
//!
//! The adversary is a single affine layer with softmax over the latent `h`.
//! Its gradient reaches the feature extractor through the reversal node in
//! [`crate::nn`], so one pass over a batch descends
//! `L_task + lambda_1 L_unc - lambda_adv L_A` in `theta_f`, descends
//! `L_task + lambda_1 L_unc` in `theta_e` and descends `L_A` in `phi`.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::evidential::{evidential_loss_grad, one_hot};
use crate::nn::{self, GradientSet, LayerRef, ParameterSet};

pub const PROBABILITY_FLOOR: f64 = 1e-12;

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Group probabilities `A(h; phi)` from the adversary head of `params`.
pub fn adversary_forward(params: &ParameterSet, h: &[f64]) -> Result<Vec<f64>> {
    let slot = params.layout().slot(LayerRef::AdversaryHead);
    if h.len() != slot.in_dim {
        return Err(Error::Shape(format!(
            "latent has {} entries, adversary expects {}",
            h.len(),
            slot.in_dim
        )));
    }
    let v = params.values();
    let z: Vec<f64> = (0..slot.out_dim)
        .map(|r| {
            let row = &v[slot.weight(r, 0)..slot.weight(r, 0) + slot.in_dim];
            row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + v[slot.bias(r)]
        })
        .collect();
    Ok(softmax(&z))
}

/// `-log A(s | h)` with the probability clamped at [`PROBABILITY_FLOOR`].
pub fn adversary_loss(probs: &[f64], group: usize) -> f64 {
    -probs[group].max(PROBABILITY_FLOOR).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CompositeLossTerms {
    pub task: f64,
    pub uncertainty: f64,
    pub adversary: f64,
    pub lambda_uncertainty: f64,
    pub lambda_adv: f64,
    pub total: f64,
}

impl CompositeLossTerms {
    pub fn new(task: f64, uncertainty: f64, adversary: f64, lambda_uncertainty: f64, lambda_adv: f64) -> Self {
        Self {
            task,
            uncertainty,
            adversary,
            lambda_uncertainty,
            lambda_adv,
            total: task + lambda_uncertainty * uncertainty + lambda_adv * adversary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub lr: f64,
    pub adversary_lr: f64,
    pub lambda_uncertainty: f64,
    pub lambda_adv: f64,
}

impl StepConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.adversary_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(self.lambda_uncertainty >= 0.0 && self.lambda_adv >= 0.0) {
            return Err(Error::Config("loss coefficients must be >= 0".into()));
        }
        Ok(())
    }
}

/// Batch-mean composite loss and its GRL-convention gradient.
pub fn composite_gradient(
    params: &ParameterSet,
    batch: &[Sample],
    lambda_uncertainty: f64,
    lambda_adv: f64,
) -> Result<(GradientSet, CompositeLossTerms)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let spec = params.layout().spec();
    let mut grads = GradientSet::zeros(params.layout().clone());
    let (mut task, mut unc, mut adv) = (0.0, 0.0, 0.0);
    for sample in batch {
        if sample.y >= spec.num_classes || sample.s >= spec.num_groups {
            return Err(Error::Domain(format!(
                "sample labels (y={}, s={}) out of range",
                sample.y, sample.s
            )));
        }
        let (out, trace) = nn::forward_trace(params, &sample.x)?;
        let y = one_hot(sample.y, spec.num_classes);
        let ev = evidential_loss_grad(&y, &out.z_task, lambda_uncertainty);
        let probs = softmax(&out.z_adv);
        let mut dz_adv = probs.clone();
        dz_adv[sample.s] -= 1.0;
        task += ev.nll;
        unc += ev.reg;
        adv += adversary_loss(&probs, sample.s);
        nn::backward_accumulate(params, &trace, &ev.dz, &dz_adv, lambda_adv, grads.values_mut())?;
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    let terms = CompositeLossTerms::new(task / n, unc / n, adv / n, lambda_uncertainty, lambda_adv);
    for (value, name) in [
        (terms.task, "task loss"),
        (terms.uncertainty, "uncertainty loss"),
        (terms.adversary, "adversary loss"),
    ] {
        if !value.is_finite() {
            return Err(Error::Numeric(name.into()));
        }
    }
    Ok((grads, terms))
}

/// One SGD step on `batch`; loss terms are evaluated before the update.
pub fn local_train_step(
    params: &ParameterSet,
    batch: &[Sample],
    config: &StepConfig,
) -> Result<(ParameterSet, CompositeLossTerms)> {
    config.validate()?;
    let (grads, terms) = composite_gradient(params, batch, config.lambda_uncertainty, config.lambda_adv)?;
    let next = nn::sgd_step(params, &grads, config.lr, config.adversary_lr)?;
    Ok((next, terms))
}
