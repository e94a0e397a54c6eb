use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, ViTConfig};
use crate::error::{Error, Result};
use crate::numerics::{Real, RngState, Tensor};
use crate::prompt::{PromptConfig, PromptModel};

use super::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use super::optim::OptimizerState;

pub const PROMPT_MODEL_KIND: &str = "prompt_model";
pub const BACKBONE_KIND: &str = "backbone";

/// Shapes needed to rebuild a model from an archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub vit: ViTConfig,
    pub prompt: PromptConfig,
}

/// Everything that changes during prompt tuning plus what is needed to
/// resume it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: PromptModel<T>,
    pub optimizer: OptimizerState<T>,
    pub rng: RngState,
    pub epoch: usize,
    pub step: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: PromptModel<T>, rng: RngState) -> Self {
        let optimizer = {
            let named = model.trainable();
            OptimizerState::new(named.iter().map(|(n, t)| (n.as_str(), t.shape())))
        };
        TrainState {
            model,
            optimizer,
            rng,
            epoch: 0,
            step: 0,
        }
    }

    /// Archive with `run` embedded next to the model shapes.
    pub fn to_checkpoint(&self, run: &serde_json::Value) -> Checkpoint<T> {
        let snapshot = ModelSnapshot {
            vit: self.model.vit.clone(),
            prompt: self.model.prompt.clone(),
        };
        let mut tensors: Vec<(String, Tensor<T>)> = self
            .model
            .all_named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (n, t) in &self.optimizer.first {
            tensors.push((format!("adam.m.{n}"), t.clone()));
        }
        for (n, t) in &self.optimizer.second {
            tensors.push((format!("adam.v.{n}"), t.clone()));
        }
        Checkpoint {
            meta: CheckpointMeta {
                kind: PROMPT_MODEL_KIND.into(),
                format_version: FORMAT_VERSION,
                dtype: T::DTYPE,
                epoch: self.epoch,
                step: self.step,
                rng: self.rng.clone(),
                config: serde_json::json!({
                    "model": snapshot,
                    "run": run,
                }),
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        if ckpt.meta.kind != PROMPT_MODEL_KIND {
            return Err(Error::format("kind", format!("expected {PROMPT_MODEL_KIND}, found {}", ckpt.meta.kind)));
        }
        let snapshot: ModelSnapshot = serde_json::from_value(ckpt.meta.config["model"].clone())
            .map_err(|e| Error::format("metadata.config.model", e.to_string()))?;
        let mut rng = RngState::new(0);
        let backbone = BackboneParams::init(&snapshot.vit, &mut rng)?;
        let mut model = PromptModel::init(&snapshot.vit, &snapshot.prompt, backbone, &mut rng)?;
        let mut used = 0;
        for (name, slot) in model.all_named_mut() {
            fill(slot, ckpt, &name)?;
            used += 1;
        }
        let mut state = TrainState::new(model, ckpt.meta.rng.clone());
        for (name, slot) in &mut state.optimizer.first {
            fill(slot, ckpt, &format!("adam.m.{name}"))?;
            used += 1;
        }
        for (name, slot) in &mut state.optimizer.second {
            fill(slot, ckpt, &format!("adam.v.{name}"))?;
            used += 1;
        }
        if used != ckpt.tensors.len() {
            return Err(Error::format(
                "entries",
                format!("{} entries, {used} expected for this configuration", ckpt.tensors.len()),
            ));
        }
        state.optimizer.step = ckpt.meta.step;
        state.epoch = ckpt.meta.epoch;
        state.step = ckpt.meta.step;
        Ok(state)
    }
}

fn fill<T: Real>(slot: &mut Tensor<T>, ckpt: &Checkpoint<T>, name: &str) -> Result<()> {
    let t = ckpt
        .get(name)
        .ok_or_else(|| Error::format(format!("entry `{name}`"), "missing"))?;
    if t.shape() != slot.shape() {
        return Err(Error::format(
            format!("entry `{name}`"),
            format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
        ));
    }
    *slot = t.clone();
    Ok(())
}

pub fn backbone_to_checkpoint<T: Real>(
    bb: &BackboneParams<T>,
    vit: &ViTConfig,
    run: &serde_json::Value,
    epoch: usize,
    step: u64,
) -> Checkpoint<T> {
    Checkpoint {
        meta: CheckpointMeta {
            kind: BACKBONE_KIND.into(),
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE,
            epoch,
            step,
            rng: RngState::new(0),
            config: serde_json::json!({ "vit": vit, "run": run }),
        },
        tensors: bb.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
    }
}

pub fn backbone_from_checkpoint<T: Real>(ckpt: &Checkpoint<T>) -> Result<(ViTConfig, BackboneParams<T>)> {
    if ckpt.meta.kind != BACKBONE_KIND {
        return Err(Error::format("kind", format!("expected {BACKBONE_KIND}, found {}", ckpt.meta.kind)));
    }
    let vit: ViTConfig = serde_json::from_value(ckpt.meta.config["vit"].clone())
        .map_err(|e| Error::format("metadata.config.vit", e.to_string()))?;
    let mut bb = BackboneParams::init(&vit, &mut RngState::new(0))?;
    let mut used = 0;
    for (name, slot) in bb.named_mut() {
        fill(slot, ckpt, &name)?;
        used += 1;
    }
    if used != ckpt.tensors.len() {
        return Err(Error::format("entries", format!("{} entries, {used} expected", ckpt.tensors.len())));
    }
    Ok((vit, bb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptMode;

    #[test]
    fn state_round_trips_through_archive() {
        let vit = ViTConfig::desk();
        let mut rng = RngState::new(1);
        let bb = BackboneParams::<f32>::init(&vit, &mut rng).unwrap();
        for mode in PromptMode::ALL {
            let cfg = PromptConfig::desk(vit.dim).with_mode(mode);
            let model = PromptModel::init(&vit, &cfg, bb.clone(), &mut rng).unwrap();
            let mut state = TrainState::new(model, RngState::at(4, 99));
            state.epoch = 2;
            state.step = 7;
            state.optimizer.step = 7;
            let run = serde_json::json!({"seed": 4});
            let bytes = state.to_checkpoint(&run).to_bytes().unwrap();
            let back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, state, "{mode}");
            assert_eq!(back.to_checkpoint(&run).to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn backbone_round_trip() {
        let vit = ViTConfig::desk();
        let bb = BackboneParams::<f64>::init(&vit, &mut RngState::new(2)).unwrap();
        let c = backbone_to_checkpoint(&bb, &vit, &serde_json::Value::Null, 1, 2);
        let (v2, bb2) = backbone_from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(v2, vit);
        assert_eq!(bb2, bb);
        assert!(TrainState::from_checkpoint(&c).is_err());
    }
}
