//! Instance-aware prompts, PCA propagation and the combined forward rule.
//!
//! The first layer receives `λ` generated instance tokens followed by `p − λ`
//! dataset tokens. Every later layer receives the previous layer's prompt
//! outputs reduced to `m` principal coordinates, widened back to `d` with
//! `d − m` learnable dimensions. `m = 0` gives deep prompting and `m = d`
//! gives shallow prompting, both short-circuited so the endpoints are exact.

mod accounting;
mod forward;
mod generator;
mod model;
mod pca;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use accounting::{
    count_parameters, generator_parameter_count, table_prompt_params, ParameterAccount,
};
pub use forward::{forward_image, forward_viapt, InstanceNoise, ViaptOutput};
pub use generator::{
    direct_prompts, generate_instance_prompts, generator_moments, hidden_channels,
    kl_to_standard_normal, DirectGenerator, Generator, GeneratorTrunk,
    GeneratorVars, ProbabilisticGenerator,
};
pub use model::{ModelVars, PromptModel, PromptParams};
pub use pca::{assemble_combined, pca_project, project_on_tape, random_projection, PcaProjection};

/// Which prompting scheme a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Viapt,
    VptShallow,
    VptDeep,
    AblationNoPca,
    AblationNoInstance,
    AblationRandomProjection,
    DirectGeneration,
}

impl PromptMode {
    pub const ALL: [PromptMode; 7] = [
        PromptMode::Viapt,
        PromptMode::VptShallow,
        PromptMode::VptDeep,
        PromptMode::AblationNoPca,
        PromptMode::AblationNoInstance,
        PromptMode::AblationRandomProjection,
        PromptMode::DirectGeneration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Viapt => "viapt",
            PromptMode::VptShallow => "vpt_shallow",
            PromptMode::VptDeep => "vpt_deep",
            PromptMode::AblationNoPca => "ablation_no_pca",
            PromptMode::AblationNoInstance => "ablation_no_instance",
            PromptMode::AblationRandomProjection => "ablation_random_projection",
            PromptMode::DirectGeneration => "direct_generation",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    /// Accepts both `vpt_deep` and `vpt-deep` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        PromptMode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown prompt mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Prompt tokens per layer.
    pub p: usize,
    /// Instance tokens among the first-layer prompts.
    pub lambda: usize,
    /// Principal dimensions carried between layers.
    pub m: usize,
    /// Weight of the KL term.
    pub beta: f64,
    pub mode: PromptMode,
}

impl PromptConfig {
    /// Desk-scale defaults for a `dim`-wide backbone: 8 prompts, 4 instance
    /// tokens, `m = dim/2`.
    pub fn desk(dim: usize) -> Self {
        PromptConfig {
            p: 8,
            lambda: 4,
            m: dim / 2,
            beta: 0.01,
            mode: PromptMode::Viapt,
        }
    }

    pub fn with_mode(mut self, mode: PromptMode) -> Self {
        self.mode = mode;
        self
    }

    /// Applies the mode's overrides and checks ranges.
    pub fn resolve(&self, dim: usize, depth: usize) -> Result<PromptPlan> {
        if self.lambda > self.p {
            return Err(Error::Config(format!(
                "lambda={} exceeds p={}",
                self.lambda, self.p
            )));
        }
        if self.m > dim {
            return Err(Error::Config(format!("m={} exceeds d={dim}", self.m)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta={} must be finite and >= 0", self.beta)));
        }
        let reduced = |m: usize, random: bool| {
            if m == 0 {
                Propagation::Fresh
            } else if m == dim {
                Propagation::Carry
            } else if random {
                Propagation::RandomProjection { m }
            } else {
                Propagation::Pca { m }
            }
        };
        let (lambda, propagation, kind) = match self.mode {
            PromptMode::VptShallow => (0, Propagation::Carry, GeneratorKind::Probabilistic),
            PromptMode::VptDeep => (0, Propagation::Fresh, GeneratorKind::Probabilistic),
            PromptMode::Viapt => (self.lambda, reduced(self.m, false), GeneratorKind::Probabilistic),
            PromptMode::AblationNoPca => (self.lambda, Propagation::Carry, GeneratorKind::Probabilistic),
            PromptMode::AblationNoInstance => (0, reduced(self.m, false), GeneratorKind::Probabilistic),
            PromptMode::AblationRandomProjection => {
                (self.lambda, reduced(self.m, true), GeneratorKind::Probabilistic)
            }
            PromptMode::DirectGeneration => (self.lambda, reduced(self.m, false), GeneratorKind::Direct),
        };
        let generator = if lambda == 0 { None } else { Some(kind) };
        let plan = PromptPlan {
            p: self.p,
            lambda,
            dim,
            depth,
            propagation,
            generator,
        };
        if matches!(
            plan.propagation,
            Propagation::Pca { .. } | Propagation::RandomProjection { .. }
        ) && plan.p == 0
        {
            return Err(Error::Config("PCA propagation needs at least one prompt token".into()));
        }
        Ok(plan)
    }
}

/// How prompt outputs of layer `i−1` become prompt inputs of layer `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Propagation {
    /// Discard outputs, use fresh `[p×d]` prompts (`m = 0`).
    Fresh,
    /// Pass outputs through unchanged (`m = d`).
    Carry,
    /// Top-`m` principal coordinates plus `d − m` learnable dimensions.
    Pca { m: usize },
    /// A fixed random orthonormal `m`-dim projection plus `d − m` learnable
    /// dimensions.
    RandomProjection { m: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Emits `(μ, log σ²)`; prompts are reparameterised samples.
    Probabilistic,
    /// Emits `λ` prompt tokens directly.
    Direct,
}

/// A [`PromptConfig`] after mode overrides, bound to a backbone shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub p: usize,
    pub lambda: usize,
    pub dim: usize,
    pub depth: usize,
    pub propagation: Propagation,
    /// `None` when `λ = 0`.
    pub generator: Option<GeneratorKind>,
}

impl PromptPlan {
    /// Effective retained dimension.
    pub fn m(&self) -> usize {
        match self.propagation {
            Propagation::Fresh => 0,
            Propagation::Carry => self.dim,
            Propagation::Pca { m } | Propagation::RandomProjection { m } => m,
        }
    }

    /// Width of the learnable remainder added at layers `2..=N`.
    pub fn learnable_width(&self) -> usize {
        self.dim - self.m()
    }

    pub fn dataset_tokens(&self) -> usize {
        self.p - self.lambda
    }

    pub fn is_probabilistic(&self) -> bool {
        self.generator == Some(GeneratorKind::Probabilistic)
    }
}
