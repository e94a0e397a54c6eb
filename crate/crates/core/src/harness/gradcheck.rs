//! Finite-difference check of every trainable tensor of a prompt model.
//!
//! Instance noise is drawn once and the per-layer projections fitted in the
//! reference pass are replayed for every perturbed evaluation, so the checked
//! function is exactly the one the tape differentiates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::gradcheck::{relative_error, DEFAULT_STEP};
use crate::numerics::{BackwardFault, RngState, Tape, Tensor};
use crate::prompt::{forward_viapt, InstanceNoise, PcaProjection, PromptModel};
use crate::backbone::embed_patches;
use crate::training::objective;

/// Threshold above which a tensor fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max)
    }
}

struct Frozen {
    noise: Vec<Tensor<f64>>,
    projections: Vec<Vec<PcaProjection<f64>>>,
}

fn batch_loss(
    model: &PromptModel<f64>,
    images: &[Tensor<f64>],
    labels: &[usize],
    frozen: &Frozen,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let (mut logits, mut mus, mut lvs) = (Vec::new(), Vec::new(), Vec::new());
    for (i, img) in images.iter().enumerate() {
        let e0 = embed_patches(&mut tape, img, &vars.backbone, &model.vit)?;
        let out = forward_viapt(
            &mut tape,
            e0,
            model,
            &vars,
            InstanceNoise::Fixed(&frozen.noise[i]),
            Some(&frozen.projections[i]),
        )?;
        logits.push(out.logits);
        if let (Some(m), Some(l)) = (out.mu, out.logvar) {
            mus.push(m);
            lvs.push(l);
        }
    }
    let lg = tape.concat_rows(&logits)?;
    let moments = if mus.is_empty() {
        None
    } else {
        Some((tape.concat_rows(&mus)?, tape.concat_rows(&lvs)?))
    };
    let o = objective(&mut tape, lg, labels, moments, model.prompt.beta)?;
    Ok(tape.value(o.total).item())
}

/// Compares analytic and central-difference gradients of the batch objective
/// for every trainable tensor. `fault` corrupts one backward rule of the
/// analytic pass.
pub fn check_model(
    model: &PromptModel<f64>,
    images: &[Tensor<f64>],
    labels: &[usize],
    noise_seed: u64,
    fault: Option<BackwardFault>,
) -> Result<GradcheckReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Input("gradient check needs a non-empty labelled batch".into()));
    }
    let (lambda, d) = (model.plan.lambda, model.plan.dim);
    let noise: Vec<Tensor<f64>> = (0..images.len())
        .map(|i| RngState::new(noise_seed).substream(i as u64).sample_gaussian(&[lambda, d]))
        .collect();

    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let vars = model.bind(&mut tape, true);
    let (mut logits, mut mus, mut lvs, mut projections) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, img) in images.iter().enumerate() {
        let e0 = embed_patches(&mut tape, img, &vars.backbone, &model.vit)?;
        let out = forward_viapt(&mut tape, e0, model, &vars, InstanceNoise::Fixed(&noise[i]), None)?;
        logits.push(out.logits);
        if let (Some(m), Some(l)) = (out.mu, out.logvar) {
            mus.push(m);
            lvs.push(l);
        }
        projections.push(out.projections);
    }
    let lg = tape.concat_rows(&logits)?;
    let moments = if mus.is_empty() {
        None
    } else {
        Some((tape.concat_rows(&mus)?, tape.concat_rows(&lvs)?))
    };
    let o = objective(&mut tape, lg, labels, moments, model.prompt.beta)?;
    let grads = tape.backward(o.total)?;
    let frozen = Frozen { noise, projections };

    let mut work = model.clone();
    let mut tensors = Vec::new();
    for (name, v) in &vars.trainable {
        let analytic = grads.get_or_zeros(*v, tape.shape(*v));
        let n = analytic.len();
        let mut worst = 0.0f64;
        for k in 0..n {
            let original = slot(&mut work, name)?.data()[k];
            slot(&mut work, name)?.data_mut()[k] = original + DEFAULT_STEP;
            let up = batch_loss(&work, images, labels, &frozen)?;
            slot(&mut work, name)?.data_mut()[k] = original - DEFAULT_STEP;
            let down = batch_loss(&work, images, labels, &frozen)?;
            slot(&mut work, name)?.data_mut()[k] = original;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            elements: n,
            max_relative_error: worst,
        });
    }
    let passed = tensors.iter().all(|t| t.max_relative_error < GRADCHECK_TOLERANCE);
    Ok(GradcheckReport {
        tensors,
        tolerance: GRADCHECK_TOLERANCE,
        passed,
    })
}

fn slot<'a>(model: &'a mut PromptModel<f64>, name: &str) -> Result<&'a mut Tensor<f64>> {
    model
        .trainable_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Contract(format!("no trainable tensor `{name}`")))
}
