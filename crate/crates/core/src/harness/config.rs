//! Run configuration and its flat `key = value` file format.
//!
//! Lines are `key = value`; `#` starts a comment. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `vit.image_size`, `vit.patch_size`, `vit.channels`, `vit.dim`, `vit.depth`, `vit.heads`, `vit.mlp_ratio`, `vit.classes` | backbone shape |
//! | `prompt.p`, `prompt.lambda`, `prompt.m`, `prompt.beta`, `prompt.mode` | prompting |
//! | `train.lr`, `train.weight_decay`, `train.batch_size`, `train.epochs`, `train.warmup_epochs`, `train.seed`, `train.precision`, `train.clip_norm`, `train.timing` | optimisation |
//! | `infer.strategy`, `infer.rounds`, `infer.seed`, `infer.noise_seed` | prediction |
//! | `data.variant`, `data.classes`, `data.samples`, `data.image_side`, `data.block`, `data.noise`, `data.seed`, `data.path` | dataset |
//! | `backbone` | frozen backbone checkpoint |
//! | `out` | output directory |
//!
//! Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{PositionEncoding, ViTConfig};
use crate::error::{Error, Result};
use crate::inference::{InferenceConfig, Strategy};
use crate::numerics::DType;
use crate::prompt::{PromptConfig, PromptMode};
use crate::training::TrainConfig;

use super::data::{DatasetSpec, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub vit: ViTConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub data: DatasetSpec,
    /// Dataset file; generated from `data` in memory when absent.
    pub data_path: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        let vit = ViTConfig::desk();
        RunConfig {
            prompt: PromptConfig::desk(vit.dim),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            data: DatasetSpec::desk(Variant::InstanceShift),
            vit,
            data_path: None,
            backbone: None,
            out: PathBuf::from("runs/default"),
        }
    }

    /// The smallest configuration that exercises every path, for gradient
    /// checks: 8×8 images, 2×2 token grid, width 8, three layers.
    pub fn tiny() -> Self {
        let vit = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            depth: 3,
            heads: 2,
            mlp_ratio: 2,
            classes: 3,
            position: PositionEncoding::Sinusoidal,
        };
        let mut run = Self::desk();
        run.prompt = PromptConfig {
            p: 4,
            lambda: 2,
            m: 2,
            beta: 0.01,
            mode: PromptMode::Viapt,
        };
        run.train.precision = DType::F64;
        run.data = DatasetSpec {
            classes: 3,
            samples: 30,
            image_side: 8,
            ..DatasetSpec::desk(Variant::InstanceShift)
        };
        run.vit = vit;
        run.out = PathBuf::from("runs/tiny");
        run
    }

    /// ViT-B/16 with 50 prompts per layer, half of them instance tokens.
    /// Only meaningful for parameter counting.
    pub fn vit_base() -> Self {
        let mut run = Self::desk();
        run.vit = ViTConfig::vit_base();
        run.prompt = PromptConfig {
            p: 50,
            lambda: 25,
            m: 128,
            ..run.prompt
        };
        run.out = PathBuf::from("runs/vit_base");
        run
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "vit_base" | "vit-base" => Ok(Self::vit_base()),
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.prompt.resolve(self.vit.dim, self.vit.depth)?;
        self.train.validate()?;
        self.data.validate()?;
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "vit.image_size" => self.vit.image_size = num(key, v)?,
            "vit.patch_size" => self.vit.patch_size = num(key, v)?,
            "vit.channels" => self.vit.channels = num(key, v)?,
            "vit.dim" => self.vit.dim = num(key, v)?,
            "vit.depth" => self.vit.depth = num(key, v)?,
            "vit.heads" => self.vit.heads = num(key, v)?,
            "vit.mlp_ratio" => self.vit.mlp_ratio = num(key, v)?,
            "vit.classes" => self.vit.classes = num(key, v)?,
            "prompt.p" => self.prompt.p = num(key, v)?,
            "prompt.lambda" => self.prompt.lambda = num(key, v)?,
            "prompt.m" => self.prompt.m = num(key, v)?,
            "prompt.beta" => self.prompt.beta = num(key, v)?,
            "prompt.mode" => self.prompt.mode = PromptMode::from_str(v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.warmup_epochs" => self.train.warmup_epochs = num(key, v)?,
            "train.seed" => self.train.seed = num(key, v)?,
            "train.precision" => self.train.precision = DType::from_str(v).map_err(Error::Config)?,
            "train.clip_norm" => self.train.clip_norm = num(key, v)?,
            "train.timing" => self.train.timing = num(key, v)?,
            "infer.strategy" => self.inference.strategy = Strategy::from_str(v)?,
            "infer.rounds" => self.inference.rounds = num(key, v)?,
            "infer.seed" => self.inference.seed = num(key, v)?,
            "infer.noise_seed" => self.inference.noise_seed = Some(num(key, v)?),
            "data.variant" => self.data.variant = Variant::from_str(v)?,
            "data.classes" => self.data.classes = num(key, v)?,
            "data.samples" => self.data.samples = num(key, v)?,
            "data.image_side" => self.data.image_side = num(key, v)?,
            "data.block" => self.data.block = num(key, v)?,
            "data.noise" => self.data.noise = num(key, v)?,
            "data.seed" => self.data.seed = num(key, v)?,
            "data.path" => self.data_path = Some(PathBuf::from(v)),
            "backbone" => self.backbone = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every setting in `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Writes `config.json` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        fs::write(dir.join("config.json"), text + "\n")?;
        Ok(())
    }
}

fn num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` cannot take the value `{v}`")))
}
