use crate::backbone::{classify, embed_patches, layer_forward, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{Real, RngState, Tape, Tensor, Var};

use super::generator::{direct_prompts, generate_instance_prompts};
use super::model::{ModelVars, PromptModel};
use super::pca::{assemble_combined, pca_project, project_on_tape, random_projection, PcaProjection};
use super::{GeneratorKind, Propagation};

/// Where the Gaussian noise for instance prompts comes from.
pub enum InstanceNoise<'a, T> {
    /// Draw `λ·d` fresh normals, advancing the stream.
    Sample(&'a mut RngState),
    /// Reuse a recorded `[λ×d]` block.
    Fixed(&'a Tensor<T>),
}

#[derive(Debug)]
pub struct ViaptOutput<T> {
    /// `[1×classes]`
    pub logits: Var,
    /// `[1×d]` moments of the probabilistic generator, if one ran.
    pub mu: Option<Var>,
    pub logvar: Option<Var>,
    /// `[p×d]` prompts entering the first layer.
    pub layer1_prompts: Var,
    /// Noise actually used for the instance prompts.
    pub noise: Option<Tensor<T>>,
    /// Projections fitted at layers `2..=N`, in order. Empty unless prompts
    /// are reduced between layers.
    pub projections: Vec<PcaProjection<T>>,
}

/// Combined-prompt forward pass for image tokens `e0: [k×d]`.
///
/// `replay` substitutes previously fitted projections for fresh fits, which
/// freezes the otherwise input-dependent mean and basis (used when comparing
/// against finite differences).
pub fn forward_viapt<T: Real>(
    tape: &mut Tape<T>,
    e0: Var,
    model: &PromptModel<T>,
    vars: &ModelVars,
    noise: InstanceNoise<'_, T>,
    replay: Option<&[PcaProjection<T>]>,
) -> Result<ViaptOutput<T>> {
    let plan = &model.plan;
    let (p, lambda, d) = (plan.p, plan.lambda, plan.dim);
    let layers = &vars.backbone.layers;

    let (mut mu, mut logvar, mut used_noise) = (None, None, None);
    let layer1 = match (plan.generator, &vars.generator) {
        (None, _) => vars.dom,
        (Some(GeneratorKind::Probabilistic), Some(g)) => {
            let z = match noise {
                InstanceNoise::Sample(rng) => rng.sample_gaussian(&[lambda, d]),
                InstanceNoise::Fixed(z) => z.clone(),
            };
            let (ins, m, lv) = generate_instance_prompts(tape, e0, g, &z)?;
            mu = Some(m);
            logvar = Some(lv);
            used_noise = Some(z);
            join_layer1(tape, ins, vars.dom, lambda, p)?
        }
        (Some(GeneratorKind::Direct), Some(g)) => {
            let ins = direct_prompts(tape, e0, g, lambda)?;
            join_layer1(tape, ins, vars.dom, lambda, p)?
        }
        (Some(_), None) => {
            return Err(Error::Contract("plan expects a generator but none is bound".into()));
        }
    };

    let mut seq = TokenSequence {
        class: vars.backbone.class_token,
        prompts: layer1,
        image: e0,
    };
    let mut projections = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 {
            seq.prompts = match plan.propagation {
                Propagation::Carry => seq.prompts,
                Propagation::Fresh => vars.new[i - 1],
                Propagation::Pca { m } | Propagation::RandomProjection { m } => {
                    let proj = match replay {
                        Some(r) => r.get(i - 1).cloned().ok_or_else(|| {
                            Error::Contract(format!("no replayed projection for layer {}", i + 1))
                        })?,
                        None => {
                            let z = tape.value(seq.prompts);
                            match &model.random_basis {
                                Some(basis) if matches!(plan.propagation, Propagation::RandomProjection { .. }) => {
                                    random_projection(z, basis)?
                                }
                                _ => pca_project(z, m)?,
                            }
                        }
                    };
                    let coords = project_on_tape(tape, seq.prompts, &proj)?;
                    projections.push(proj);
                    assemble_combined(tape, coords, vars.new[i - 1], d)?
                }
            };
        }
        seq = layer_forward(tape, seq, layer, model.vit.heads)?;
    }
    let logits = classify(tape, seq.class, &vars.backbone, &vars.head)?;
    Ok(ViaptOutput {
        logits,
        mu,
        logvar,
        layer1_prompts: layer1,
        noise: used_noise,
        projections,
    })
}

fn join_layer1<T: Real>(tape: &mut Tape<T>, ins: Var, dom: Var, lambda: usize, p: usize) -> Result<Var> {
    if lambda == p {
        Ok(ins)
    } else {
        tape.concat_rows(&[ins, dom])
    }
}

/// Embeds `image` and runs [`forward_viapt`].
pub fn forward_image<T: Real>(
    tape: &mut Tape<T>,
    image: &Tensor<T>,
    model: &PromptModel<T>,
    vars: &ModelVars,
    noise: InstanceNoise<'_, T>,
) -> Result<ViaptOutput<T>> {
    let e0 = embed_patches(tape, image, &vars.backbone, &model.vit)?;
    forward_viapt(tape, e0, model, vars, noise, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{forward_vpt_deep, forward_vpt_shallow, BackboneParams, ViTConfig};
    use crate::prompt::{PromptConfig, PromptMode};

    fn setup(mode: PromptMode, m: usize, lambda: usize) -> (PromptModel<f64>, Tensor<f64>) {
        let vit = ViTConfig::desk();
        let mut rng = RngState::new(9);
        let bb = BackboneParams::init(&vit, &mut rng).unwrap();
        let mut cfg = PromptConfig::desk(vit.dim).with_mode(mode);
        cfg.m = m;
        cfg.lambda = lambda;
        let model = PromptModel::init(&vit, &cfg, bb, &mut rng).unwrap();
        let image = rng.sample_gaussian(&[1, 16, 16]);
        (model, image)
    }

    #[test]
    fn deep_endpoint_is_bitwise_vpt_deep() {
        let (model, image) = setup(PromptMode::Viapt, 0, 0);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let mut rng = RngState::new(1);
        let out = forward_image(&mut tape, &image, &model, &vars, InstanceNoise::Sample(&mut rng)).unwrap();
        let e0 = embed_patches(&mut tape, &image, &vars.backbone, &model.vit).unwrap();
        let mut prompts = vec![vars.dom];
        prompts.extend(&vars.new);
        let reference =
            forward_vpt_deep(&mut tape, e0, &prompts, &vars.backbone, &vars.head, &model.vit).unwrap();
        assert!(tape.value(out.logits).bitwise_eq(tape.value(reference)));
    }

    #[test]
    fn shallow_endpoint_is_bitwise_vpt_shallow() {
        let (model, image) = setup(PromptMode::Viapt, 48, 0);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let mut rng = RngState::new(1);
        let out = forward_image(&mut tape, &image, &model, &vars, InstanceNoise::Sample(&mut rng)).unwrap();
        let e0 = embed_patches(&mut tape, &image, &vars.backbone, &model.vit).unwrap();
        let reference =
            forward_vpt_shallow(&mut tape, e0, vars.dom, &vars.backbone, &vars.head, &model.vit).unwrap();
        assert!(tape.value(out.logits).bitwise_eq(tape.value(reference)));
    }

    #[test]
    fn fitted_projections_replay_identically() {
        let (model, image) = setup(PromptMode::Viapt, 24, 4);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let mut rng = RngState::new(5);
        let out = forward_image(&mut tape, &image, &model, &vars, InstanceNoise::Sample(&mut rng)).unwrap();
        assert_eq!(out.projections.len(), 3);
        let z = out.noise.clone().unwrap();
        let e0 = embed_patches(&mut tape, &image, &vars.backbone, &model.vit).unwrap();
        let again = forward_viapt(
            &mut tape,
            e0,
            &model,
            &vars,
            InstanceNoise::Fixed(&z),
            Some(&out.projections),
        )
        .unwrap();
        assert!(tape.value(out.logits).bitwise_eq(tape.value(again.logits)));
    }

    #[test]
    fn instance_prompts_depend_on_input() {
        let (model, image) = setup(PromptMode::Viapt, 24, 4);
        let other: Tensor<f64> = RngState::new(77).sample_gaussian(&[1, 16, 16]);
        let z: Tensor<f64> = RngState::new(2).sample_gaussian(&[4, 48]);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let a = forward_image(&mut tape, &image, &model, &vars, InstanceNoise::Fixed(&z)).unwrap();
        let b = forward_image(&mut tape, &other, &model, &vars, InstanceNoise::Fixed(&z)).unwrap();
        let diff = tape
            .value(a.layer1_prompts)
            .zip_map(tape.value(b.layer1_prompts), |x, y| x - y)
            .unwrap()
            .max_abs();
        assert!(diff > 0.0);
    }

    #[test]
    fn every_mode_runs() {
        for mode in PromptMode::ALL {
            let (model, image) = setup(mode, 24, 4);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let mut rng = RngState::new(1);
            let out = forward_image(&mut tape, &image, &model, &vars, InstanceNoise::Sample(&mut rng)).unwrap();
            assert_eq!(tape.shape(out.logits), &[1, 5], "{mode}");
            assert!(tape.value(out.logits).is_finite());
        }
    }
}
