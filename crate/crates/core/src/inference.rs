//! Prediction strategies for instance-prompted models.
//!
//! * multi-round: average class probabilities over `R` forwards, each with
//!   fresh noise. Round `r` of an image reads that image's substream from
//!   counter `r·λ·d`, so rounds can run in any order.
//! * fixed sampling: one noise block drawn from a recorded seed before any
//!   image is seen and reused for all of them.
//! * direct: the generator emits the instance tokens; nothing is sampled.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Real, RngState, Tape, Tensor};
use crate::prompt::{forward_image, GeneratorKind, InstanceNoise, PromptModel};
use crate::training::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MultiRound,
    FixedSampling,
    Direct,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::MultiRound => "multi_round",
            Strategy::FixedSampling => "fixed_sampling",
            Strategy::Direct => "direct",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `multi`, `fixed` and `direct` as well as the full names.
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "multi" | "multi_round" => Ok(Strategy::MultiRound),
            "fixed" | "fixed_sampling" => Ok(Strategy::FixedSampling),
            "direct" => Ok(Strategy::Direct),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub strategy: Strategy,
    pub rounds: usize,
    /// Seed of the multi-round noise streams.
    pub seed: u64,
    /// Seed of the fixed noise block; required for fixed sampling.
    pub noise_seed: Option<u64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            strategy: Strategy::MultiRound,
            rounds: 5,
            seed: 0,
            noise_seed: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::MultiRound && self.rounds < 1 {
            return Err(Error::Config("multi-round inference needs rounds >= 1".into()));
        }
        if self.strategy == Strategy::FixedSampling && self.noise_seed.is_none() {
            return Err(Error::Config("fixed sampling needs a recorded noise seed".into()));
        }
        Ok(())
    }
}

fn require_sampling<T: Real>(model: &PromptModel<T>, what: &str) -> Result<()> {
    if model.plan.generator == Some(GeneratorKind::Direct) {
        return Err(Error::ModeMismatch(format!(
            "{what} needs a probabilistic generator; this model generates prompts directly"
        )));
    }
    Ok(())
}

fn probabilities<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    kernels::softmax_rows(logits).to_f64_vec()
}

/// The `[λ×d]` noise block for fixed sampling.
pub fn fixed_noise<T: Real>(model: &PromptModel<T>, noise_seed: u64) -> Tensor<T> {
    RngState::new(noise_seed).sample_gaussian(&[model.plan.lambda, model.plan.dim])
}

/// Per-round class probabilities for one image; `image_id` selects the
/// image's substream.
pub fn round_probabilities<T: Real>(
    model: &PromptModel<T>,
    image: &Tensor<T>,
    rounds: usize,
    seed: u64,
    image_id: u64,
) -> Result<Vec<Vec<f64>>> {
    require_sampling(model, "multi-round inference")?;
    if rounds < 1 {
        return Err(Error::Config("multi-round inference needs rounds >= 1".into()));
    }
    let stream = RngState::new(seed).substream(image_id);
    let per_round = (model.plan.lambda * model.plan.dim) as u64;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let mut out = Vec::with_capacity(rounds);
    for r in 0..rounds as u64 {
        let mut rng = RngState::at(stream.seed, r * per_round);
        let o = forward_image(&mut tape, image, model, &vars, InstanceNoise::Sample(&mut rng))?;
        out.push(probabilities(tape.value(o.logits)));
    }
    Ok(out)
}

/// Mean of the per-round probabilities. When every round agrees bitwise the
/// single-round vector is returned unchanged.
pub fn average_rounds(rounds: &[Vec<f64>]) -> Vec<f64> {
    let first = &rounds[0];
    let identical = rounds
        .iter()
        .all(|r| r.iter().zip(first).all(|(a, b)| a.to_bits() == b.to_bits()));
    if identical {
        return first.clone();
    }
    let inv = 1.0 / rounds.len() as f64;
    (0..first.len())
        .map(|c| rounds.iter().map(|r| r[c]).sum::<f64>() * inv)
        .collect()
}

pub fn predict_multi_round<T: Real>(
    model: &PromptModel<T>,
    image: &Tensor<T>,
    rounds: usize,
    seed: u64,
    image_id: u64,
) -> Result<Vec<f64>> {
    Ok(average_rounds(&round_probabilities(model, image, rounds, seed, image_id)?))
}

pub fn predict_fixed_sampling<T: Real>(
    model: &PromptModel<T>,
    image: &Tensor<T>,
    noise: &Tensor<T>,
) -> Result<Vec<f64>> {
    require_sampling(model, "fixed sampling")?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let o = forward_image(&mut tape, image, model, &vars, InstanceNoise::Fixed(noise))?;
    Ok(probabilities(tape.value(o.logits)))
}

pub fn predict_direct<T: Real>(model: &PromptModel<T>, image: &Tensor<T>) -> Result<Vec<f64>> {
    if model.plan.generator == Some(GeneratorKind::Probabilistic) {
        return Err(Error::ModeMismatch(
            "direct prediction needs a model trained with direct generation".into(),
        ));
    }
    let empty = Tensor::zeros(&[0, model.plan.dim]);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let o = forward_image(&mut tape, image, model, &vars, InstanceNoise::Fixed(&empty))?;
    Ok(probabilities(tape.value(o.logits)))
}

/// One line of the per-image prediction stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: usize,
    pub strategy: Strategy,
    pub probabilities: Vec<f64>,
    pub argmax: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub strategy: Strategy,
    #[serde(rename = "R")]
    pub rounds: usize,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub records: Vec<PredictionRecord>,
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Predicts every image of `split`; image ids are split positions.
pub fn evaluate<T: Real>(model: &PromptModel<T>, split: &Split<T>, cfg: &InferenceConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let noise = match cfg.strategy {
        Strategy::FixedSampling => {
            require_sampling(model, "fixed sampling")?;
            Some(fixed_noise(model, cfg.noise_seed.expect("validated")))
        }
        _ => None,
    };
    let mut records = Vec::with_capacity(split.len());
    let mut correct = 0;
    for (i, image) in split.images.iter().enumerate() {
        let p = match cfg.strategy {
            Strategy::MultiRound => predict_multi_round(model, image, cfg.rounds, cfg.seed, i as u64)?,
            Strategy::FixedSampling => predict_fixed_sampling(model, image, noise.as_ref().expect("drawn"))?,
            Strategy::Direct => predict_direct(model, image)?,
        };
        let a = argmax(&p);
        if a == split.labels[i] {
            correct += 1;
        }
        records.push(PredictionRecord {
            image_id: i,
            strategy: cfg.strategy,
            probabilities: p,
            argmax: a,
        });
    }
    let n = split.len();
    Ok(EvalReport {
        summary: EvalSummary {
            strategy: cfg.strategy,
            rounds: if cfg.strategy == Strategy::MultiRound { cfg.rounds } else { 1 },
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            n,
        },
        records,
    })
}
