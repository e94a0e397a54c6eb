use crate::backbone::{BackboneParams, BackboneVars, HeadParams, HeadVars, ViTConfig};
use crate::error::{Error, Result};
use crate::numerics::linalg::random_orthonormal;
use crate::numerics::{Real, RngState, Tape, Tensor, Var};

use super::generator::{Generator, GeneratorVars};
use super::{PromptConfig, PromptPlan, Propagation};

/// Dataset-level prompt tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams<T> {
    /// Layer-1 dataset tokens `[(p−λ)×d]`.
    pub dom: Tensor<T>,
    /// Learnable remainders for layers `2..=N`, each `[p×(d−m)]`. Empty when
    /// prompts carry over unchanged.
    pub new: Vec<Tensor<T>>,
}

impl<T: Real> PromptParams<T> {
    pub fn init(plan: &PromptPlan, rng: &mut RngState) -> Self {
        let (p, d) = (plan.p, plan.dim);
        let bound = |width: usize| (6.0 / (width + p) as f64).sqrt();
        let dom = rng.sample_uniform(&[plan.dataset_tokens(), d], bound(d));
        let new = match plan.propagation {
            Propagation::Carry => Vec::new(),
            _ => {
                let w = plan.learnable_width();
                (1..plan.depth)
                    .map(|_| rng.sample_uniform(&[p, w], bound(w)))
                    .collect()
            }
        };
        PromptParams { dom, new }
    }
}

/// Everything a prompt-tuned classifier needs: the frozen backbone plus the
/// trainable prompts, generator and head.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptModel<T> {
    pub vit: ViTConfig,
    pub prompt: PromptConfig,
    pub plan: PromptPlan,
    pub backbone: BackboneParams<T>,
    pub head: HeadParams<T>,
    pub prompts: PromptParams<T>,
    pub generator: Option<Generator<T>>,
    /// Fixed orthonormal `[d×m]` basis for the random-projection ablation.
    pub random_basis: Option<Tensor<T>>,
}

/// A [`PromptModel`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub head: HeadVars,
    pub dom: Var,
    pub new: Vec<Var>,
    pub generator: Option<GeneratorVars>,
    /// Trainable leaves by name, in [`PromptModel::trainable`] order.
    pub trainable: Vec<(String, Var)>,
}

impl<T: Real> PromptModel<T> {
    /// Draws trainable tensors in a fixed order: head, dataset prompts,
    /// remainders, generator, random basis.
    pub fn init(
        vit: &ViTConfig,
        prompt: &PromptConfig,
        backbone: BackboneParams<T>,
        rng: &mut RngState,
    ) -> Result<Self> {
        vit.validate()?;
        let plan = prompt.resolve(vit.dim, vit.depth)?;
        if backbone.layers.len() != vit.depth || backbone.patch_w.cols() != vit.dim {
            return Err(Error::Config(format!(
                "backbone has {} layers of width {}, config expects {} of width {}",
                backbone.layers.len(),
                backbone.patch_w.cols(),
                vit.depth,
                vit.dim
            )));
        }
        if plan.generator.is_some() {
            let g = vit.grid();
            if g * g != vit.tokens() {
                return Err(Error::Config("instance prompts need a square token grid".into()));
            }
        }
        let head = HeadParams::init(vit.dim, vit.classes, rng);
        let prompts = PromptParams::init(&plan, rng);
        let generator = plan
            .generator
            .map(|kind| Generator::init(kind, vit.dim, plan.lambda, rng));
        let random_basis = match plan.propagation {
            Propagation::RandomProjection { m } => Some(random_orthonormal(rng, vit.dim, m)?),
            _ => None,
        };
        Ok(PromptModel {
            vit: vit.clone(),
            prompt: prompt.clone(),
            plan,
            backbone,
            head,
            prompts,
            generator,
            random_basis,
        })
    }

    /// Trainable tensors with stable names.
    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("head.weight".to_string(), &self.head.weight),
            ("head.bias".to_string(), &self.head.bias),
            ("prompt.dom".to_string(), &self.prompts.dom),
        ];
        for (i, t) in self.prompts.new.iter().enumerate() {
            out.push((format!("prompt.new{}", i + 1), t));
        }
        if let Some(g) = &self.generator {
            for (name, t) in g.named() {
                out.push((format!("generator.{name}"), t));
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("head.weight".to_string(), &mut self.head.weight),
            ("head.bias".to_string(), &mut self.head.bias),
            ("prompt.dom".to_string(), &mut self.prompts.dom),
        ];
        for (i, t) in self.prompts.new.iter_mut().enumerate() {
            out.push((format!("prompt.new{}", i + 1), t));
        }
        if let Some(g) = &mut self.generator {
            for (name, t) in g.named_mut() {
                out.push((format!("generator.{name}"), t));
            }
        }
        out
    }

    /// Tensors that never change during prompt tuning.
    pub fn frozen(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.backbone.named();
        if let Some(b) = &self.random_basis {
            out.push(("prompt.random_basis".to_string(), b));
        }
        out
    }

    pub fn frozen_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.backbone.named_mut();
        if let Some(b) = &mut self.random_basis {
            out.push(("prompt.random_basis".to_string(), b));
        }
        out
    }

    /// All tensors, trainable first.
    pub fn all_named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.trainable();
        out.extend(self.frozen());
        out
    }

    pub fn all_named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        // Split borrows: trainable and frozen tensors live in disjoint fields.
        let PromptModel {
            head,
            prompts,
            generator,
            backbone,
            random_basis,
            ..
        } = self;
        let mut out = vec![
            ("head.weight".to_string(), &mut head.weight),
            ("head.bias".to_string(), &mut head.bias),
            ("prompt.dom".to_string(), &mut prompts.dom),
        ];
        for (i, t) in prompts.new.iter_mut().enumerate() {
            out.push((format!("prompt.new{}", i + 1), t));
        }
        if let Some(g) = generator {
            for (name, t) in g.named_mut() {
                out.push((format!("generator.{name}"), t));
            }
        }
        out.extend(backbone.named_mut());
        if let Some(b) = random_basis {
            out.push(("prompt.random_basis".to_string(), b));
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records the model on `tape`. With `trainable = false` nothing receives
    /// gradients, which is what inference wants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let backbone = self.backbone.bind(tape, &self.vit, false);
        let head = self.head.bind(tape, trainable);
        let dom = tape.leaf(self.prompts.dom.clone(), trainable);
        let new: Vec<Var> = self
            .prompts
            .new
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        let generator = self.generator.as_ref().map(|g| g.bind(tape, trainable));

        let mut named = vec![
            ("head.weight".to_string(), head.weight),
            ("head.bias".to_string(), head.bias),
            ("prompt.dom".to_string(), dom),
        ];
        for (i, &v) in new.iter().enumerate() {
            named.push((format!("prompt.new{}", i + 1), v));
        }
        if let (Some(g), Some(gv)) = (&self.generator, &generator) {
            for ((name, _), &v) in g.named().iter().zip(&gv.vars) {
                named.push((format!("generator.{name}"), v));
            }
        }
        ModelVars {
            backbone,
            head,
            dom,
            new,
            generator,
            trainable: named,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptMode;

    fn model(mode: PromptMode) -> PromptModel<f64> {
        let vit = ViTConfig::desk();
        let mut rng = RngState::new(3);
        let bb = BackboneParams::init(&vit, &mut rng).unwrap();
        let cfg = PromptConfig::desk(vit.dim).with_mode(mode);
        PromptModel::init(&vit, &cfg, bb, &mut rng).unwrap()
    }

    #[test]
    fn shapes_follow_plan() {
        let m = model(PromptMode::Viapt);
        assert_eq!(m.prompts.dom.shape(), &[4, 48]);
        assert_eq!(m.prompts.new.len(), 3);
        assert_eq!(m.prompts.new[0].shape(), &[8, 24]);
        assert!(m.generator.is_some());

        let shallow = model(PromptMode::VptShallow);
        assert!(shallow.prompts.new.is_empty());
        assert_eq!(shallow.prompts.dom.shape(), &[8, 48]);
        assert!(shallow.generator.is_none());

        let deep = model(PromptMode::VptDeep);
        assert_eq!(deep.prompts.new[2].shape(), &[8, 48]);
    }

    #[test]
    fn bound_names_match_tensor_names() {
        let m = model(PromptMode::DirectGeneration);
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, true);
        let names: Vec<_> = m.trainable().into_iter().map(|(n, _)| n).collect();
        let bound: Vec<_> = vars.trainable.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, bound);
        for ((_, t), (_, v)) in m.trainable().iter().zip(&vars.trainable) {
            assert_eq!(*t, tape.value(*v));
        }
    }

    #[test]
    fn random_basis_only_for_its_ablation() {
        assert!(model(PromptMode::Viapt).random_basis.is_none());
        let r = model(PromptMode::AblationRandomProjection);
        assert_eq!(r.random_basis.as_ref().unwrap().shape(), &[48, 24]);
    }
}
