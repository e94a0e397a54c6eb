//! Trainable-parameter bookkeeping.
//!
//! Two prompt counts are reported. `prompt_params` follows the reference
//! tables for the full-scale setting:
//!
//! * prompts without instance tokens: `N·p·(d − m)`
//! * with `λ` instance tokens: `(N·p − λ)·(d − m) + λ·m`
//! * shallow prompting: `p·d`
//!
//! `instantiated_prompt_params` counts the tensors this implementation
//! actually allocates, `(p − λ)·d + (N − 1)·p·(d − m)`. The two agree when
//! `λ = p/2` and `m < d`.

use serde::Serialize;

use crate::backbone::ViTConfig;
use crate::error::Result;

use super::generator::hidden_channels;
use super::{GeneratorKind, PromptConfig, PromptMode, Propagation};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParameterAccount {
    pub mode: PromptMode,
    pub m: usize,
    pub lambda: usize,
    /// Table-convention prompt count.
    pub prompt_params: usize,
    pub instantiated_prompt_params: usize,
    pub generator_params: usize,
    pub head_params: usize,
    /// Instantiated prompts + generator + head.
    pub total_trainable: usize,
    pub backbone_params: usize,
    /// `100 · prompt_params / backbone_params`.
    pub ratio_percent: f64,
    /// Set where the table convention and the allocated tensors disagree in a
    /// way worth knowing about.
    pub note: Option<String>,
}

/// Table-convention prompt count for `depth` layers of `p` tokens.
pub fn table_prompt_params(depth: usize, p: usize, lambda: usize, dim: usize, m: usize) -> usize {
    (depth * p - lambda) * (dim - m) + lambda * m
}

/// Weights and biases of a generator over `dim`-wide tokens.
pub fn generator_parameter_count(kind: GeneratorKind, dim: usize, lambda: usize) -> usize {
    let h = hidden_channels(dim);
    let trunk = h * dim * 9 + h + h * h * 9 + h;
    match kind {
        GeneratorKind::Probabilistic => trunk + 2 * (h * dim + dim),
        GeneratorKind::Direct => trunk + h * lambda * dim + lambda * dim,
    }
}

pub fn count_parameters(cfg: &PromptConfig, vit: &ViTConfig) -> Result<ParameterAccount> {
    vit.validate()?;
    let plan = cfg.resolve(vit.dim, vit.depth)?;
    let (n, p, d, lambda, m) = (vit.depth, plan.p, vit.dim, plan.lambda, plan.m());

    let prompt_params = match cfg.mode {
        PromptMode::VptShallow => p * d,
        PromptMode::VptDeep => n * p * d,
        _ => table_prompt_params(n, p, lambda, d, m),
    };
    let carried = plan.propagation == Propagation::Carry;
    let later = if carried { 0 } else { (n - 1) * p * (d - m) };
    let instantiated = (p - lambda) * d + later;
    let generator_params = plan
        .generator
        .map(|k| generator_parameter_count(k, d, lambda))
        .unwrap_or(0);
    let head_params = vit.head_parameter_count();
    let backbone_params = vit.backbone_parameter_count();

    let note = if m == d && cfg.mode != PromptMode::VptShallow {
        Some(format!(
            "table convention omits the {} first-layer dataset tokens at m=d ({} allocated)",
            p - lambda,
            (p - lambda) * d
        ))
    } else {
        None
    };

    Ok(ParameterAccount {
        mode: cfg.mode,
        m,
        lambda,
        prompt_params,
        instantiated_prompt_params: instantiated,
        generator_params,
        head_params,
        total_trainable: instantiated + generator_params + head_params,
        backbone_params,
        ratio_percent: 100.0 * prompt_params as f64 / backbone_params as f64,
        note,
    })
}
