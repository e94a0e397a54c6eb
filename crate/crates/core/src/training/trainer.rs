use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{embed_patches, forward_plain, BackboneParams, HeadParams, ViTConfig};
use crate::error::{Error, Result};
use crate::numerics::{DType, Real, RngState, Tape, Tensor, Var};
use crate::prompt::{forward_image, forward_viapt, InstanceNoise, PromptModel};

use super::loss::objective;
use super::optim::{clip_global_norm, lr_schedule, AdamW, OptimizerState};
use super::state::{backbone_to_checkpoint, TrainState};

/// Stream keys for the run's sampler.
const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const VALIDATION_NOISE_STREAM: u64 = 3;

/// Images evaluated per tape during validation.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub precision: DType,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Record wall-clock time in metrics. Off by default so metrics files
    /// are reproducible byte for byte.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 30,
            warmup_epochs: 10,
            seed: 1,
            precision: DType::F32,
            clip_norm: 1.0,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lr) || !ok(self.weight_decay) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr, weight_decay and clip_norm must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs={} exceeds epochs={}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Labelled images of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Real> Split<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Split<T> {
        Split {
            images: self.images[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub xent: f64,
    pub kl: f64,
    pub total: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Averages over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub xent: f64,
    pub kl: f64,
    pub total: f64,
    pub accuracy: f64,
    pub n: usize,
}

pub struct TrainOutcome<T> {
    pub final_state: TrainState<T>,
    pub best: TrainState<T>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub metrics: Vec<MetricRecord>,
}

/// Where training writes as it goes. With no directory everything stays in
/// memory.
#[derive(Clone, Debug, Default)]
pub struct TrainSink {
    pub dir: Option<PathBuf>,
    /// Embedded in every checkpoint.
    pub snapshot: serde_json::Value,
}

impl TrainSink {
    pub fn in_memory() -> Self {
        TrainSink::default()
    }

    pub fn to_dir(dir: &Path, snapshot: serde_json::Value) -> Self {
        TrainSink {
            dir: Some(dir.to_path_buf()),
            snapshot,
        }
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fixed validation noise for a run: one `[λ×d]` block reused for every image.
pub fn validation_noise<T: Real>(model: &PromptModel<T>, seed: u64) -> Tensor<T> {
    RngState::new(seed)
        .substream(VALIDATION_NOISE_STREAM)
        .sample_gaussian(&[model.plan.lambda, model.plan.dim])
}

/// Loss and accuracy of `model` on `split`, each image using the same
/// instance noise `z`.
pub fn evaluate_fixed<T: Real>(model: &PromptModel<T>, split: &Split<T>, z: &Tensor<T>) -> Result<EvalStats> {
    let mut stats = EvalStats::default();
    if split.is_empty() {
        return Ok(stats);
    }
    let beta = model.prompt.beta;
    let (mut xent, mut kl, mut total, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for start in (0..split.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(split.len());
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let (mut logits, mut mus, mut lvs) = (Vec::new(), Vec::new(), Vec::new());
        for img in &split.images[start..end] {
            let out = forward_image(&mut tape, img, model, &vars, InstanceNoise::Fixed(z))?;
            logits.push(out.logits);
            if let (Some(m), Some(l)) = (out.mu, out.logvar) {
                mus.push(m);
                lvs.push(l);
            }
        }
        let labels = &split.labels[start..end];
        let (lg, moments) = stack(&mut tape, &logits, &mus, &lvs)?;
        let o = objective(&mut tape, lg, labels, moments, beta)?;
        let w = (end - start) as f64;
        xent += tape.value(o.xent).item().as_f64() * w;
        kl += tape.value(o.kl).item().as_f64() * w;
        total += tape.value(o.total).item().as_f64() * w;
        let lv = tape.value(lg);
        correct += labels.iter().enumerate().filter(|(i, &l)| argmax(lv.row_slice(*i)) == l).count();
    }
    let n = split.len() as f64;
    stats.xent = xent / n;
    stats.kl = kl / n;
    stats.total = total / n;
    stats.accuracy = correct as f64 / n;
    stats.n = split.len();
    Ok(stats)
}

fn stack<T: Real>(
    tape: &mut Tape<T>,
    logits: &[Var],
    mus: &[Var],
    lvs: &[Var],
) -> Result<(Var, Option<(Var, Var)>)> {
    let lg = tape.concat_rows(logits)?;
    let moments = if mus.is_empty() {
        None
    } else {
        Some((tape.concat_rows(mus)?, tape.concat_rows(lvs)?))
    };
    Ok((lg, moments))
}

struct MetricsWriter {
    file: Option<BufWriter<File>>,
}

impl MetricsWriter {
    fn open(sink: &TrainSink) -> Result<Self> {
        let file = match &sink.dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
            }
            None => None,
        };
        Ok(MetricsWriter { file })
    }

    fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(rec).map_err(|e| Error::Contract(e.to_string()))?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(())
    }
}

/// Prompt tuning over a frozen backbone.
///
/// Each step records one tape for the whole minibatch. Instance noise for
/// image `j` of step `s` comes from its own substream, so results do not
/// depend on evaluation order. After every epoch the model is validated with
/// fixed noise; the best epoch is chosen by validation accuracy, then lower
/// validation loss, then the earlier epoch.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    model: PromptModel<T>,
    train_split: &Split<T>,
    val_split: &Split<T>,
    sink: &TrainSink,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if T::DTYPE != cfg.precision {
        return Err(Error::Config(format!(
            "run precision is {}, model is {}",
            cfg.precision.name(),
            T::DTYPE.name()
        )));
    }
    if train_split.is_empty() && cfg.epochs > 0 {
        return Err(Error::Input("training split is empty".into()));
    }
    let root = RngState::new(cfg.seed);
    let noise_root = root.substream(NOISE_STREAM);
    let mut state = TrainState::new(model, noise_root.clone());
    let mut best = state.clone();
    let mut best_epoch = 0;
    let mut best_score: Option<(f64, f64)> = None;
    let mut metrics = Vec::new();
    let mut writer = MetricsWriter::open(sink)?;
    let opt = AdamW::new(cfg.weight_decay);

    let n = train_split.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let val_z = validation_noise(&state.model, cfg.seed);
    let beta = state.model.prompt.beta;
    let started = Instant::now();
    let wall = |cfg: &TrainConfig| if cfg.timing { started.elapsed().as_secs_f64() } else { 0.0 };

    for epoch in 1..=cfg.epochs {
        let order = root.substream2(SHUFFLE_STREAM, epoch as u64).permutation(n);
        let (mut xent, mut kl, mut total, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let step = state.step;
            let mut tape = Tape::new();
            let vars = state.model.bind(&mut tape, true);
            let (mut logits, mut mus, mut lvs) = (Vec::new(), Vec::new(), Vec::new());
            for (j, &idx) in batch.iter().enumerate() {
                let mut rng = noise_root.substream2(step, j as u64);
                let e0 = embed_patches(&mut tape, &train_split.images[idx], &vars.backbone, &state.model.vit)?;
                let out = forward_viapt(&mut tape, e0, &state.model, &vars, InstanceNoise::Sample(&mut rng), None)?;
                logits.push(out.logits);
                if let (Some(m), Some(l)) = (out.mu, out.logvar) {
                    mus.push(m);
                    lvs.push(l);
                }
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train_split.labels[i]).collect();
            let (lg, moments) = stack(&mut tape, &logits, &mus, &lvs)?;
            let o = objective(&mut tape, lg, &labels, moments, beta)?;
            let loss = tape.value(o.total).item().as_f64();
            if !loss.is_finite() {
                let last = match &sink.dir {
                    Some(dir) if epoch > 1 => dir.join(LAST_GOOD_CHECKPOINT).display().to_string(),
                    _ => format!("in-memory state after epoch {}", epoch - 1),
                };
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {step}; last good checkpoint: {last}"
                )));
            }
            let grads = tape.backward(o.total)?;
            let mut named: Vec<(String, Tensor<T>)> = vars
                .trainable
                .iter()
                .map(|(name, v)| (name.clone(), grads.get_or_zeros(*v, tape.shape(*v))))
                .collect();
            drop(grads);
            clip_global_norm(&mut named, cfg.clip_norm);
            lr = lr_schedule(step as usize + 1, total_steps, warmup_steps, cfg.lr);
            let mut params = state.model.trainable_mut();
            opt.step(&mut params, &named, &mut state.optimizer, lr)?;
            state.step += 1;

            let b = batch.len() as f64;
            xent += tape.value(o.xent).item().as_f64() * b;
            kl += tape.value(o.kl).item().as_f64() * b;
            total += loss * b;
            let lv = tape.value(lg);
            correct += labels.iter().enumerate().filter(|(i, &l)| argmax(lv.row_slice(*i)) == l).count();
        }
        state.epoch = epoch;
        state.rng = RngState::at(noise_root.seed, state.step);

        let train_rec = MetricRecord {
            epoch,
            split: "train".into(),
            xent: xent / n as f64,
            kl: kl / n as f64,
            total: total / n as f64,
            accuracy: correct as f64 / n as f64,
            lr,
            wall_seconds: wall(cfg),
        };
        writer.write(&train_rec)?;
        metrics.push(train_rec);

        let v = evaluate_fixed(&state.model, val_split, &val_z)?;
        let val_rec = MetricRecord {
            epoch,
            split: "val".into(),
            xent: v.xent,
            kl: v.kl,
            total: v.total,
            accuracy: v.accuracy,
            lr,
            wall_seconds: wall(cfg),
        };
        writer.write(&val_rec)?;
        metrics.push(val_rec);

        let better = match best_score {
            None => true,
            Some((acc, loss)) => v.accuracy > acc || (v.accuracy == acc && v.total < loss),
        };
        if better {
            best_score = Some((v.accuracy, v.total));
            best = state.clone();
            best_epoch = epoch;
            if let Some(dir) = &sink.dir {
                best.to_checkpoint(&sink.snapshot).save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if let Some(dir) = &sink.dir {
            state.to_checkpoint(&sink.snapshot).save(&dir.join(LAST_GOOD_CHECKPOINT))?;
        }
    }

    if let Some(dir) = &sink.dir {
        fs::create_dir_all(dir)?;
        state.to_checkpoint(&sink.snapshot).save(&dir.join(FINAL_CHECKPOINT))?;
        if cfg.epochs == 0 {
            best.to_checkpoint(&sink.snapshot).save(&dir.join(BEST_CHECKPOINT))?;
        }
    }
    Ok(TrainOutcome {
        final_state: state,
        best,
        best_epoch,
        metrics,
    })
}

/// Trains the whole backbone plus a throwaway head on a pretext task.
pub fn pretrain_backbone<T: Real>(
    vit: &ViTConfig,
    cfg: &TrainConfig,
    data: &Split<T>,
) -> Result<(BackboneParams<T>, Vec<MetricRecord>)> {
    cfg.validate()?;
    vit.validate()?;
    let root = RngState::new(cfg.seed);
    let mut init_rng = root.substream(0);
    let mut bb = BackboneParams::init(vit, &mut init_rng)?;
    let mut head = HeadParams::init(vit.dim, vit.classes, &mut init_rng);
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= vit.classes) {
        return Err(Error::Input(format!("pretext label {bad} out of range for {} classes", vit.classes)));
    }

    let names = |bb: &BackboneParams<T>, head: &HeadParams<T>| -> Vec<(String, Vec<usize>)> {
        let mut v: Vec<(String, Vec<usize>)> =
            bb.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        v.push(("head.weight".into(), head.weight.shape().to_vec()));
        v.push(("head.bias".into(), head.bias.shape().to_vec()));
        v
    };
    let shapes = names(&bb, &head);
    let mut optimizer = OptimizerState::<T>::new(shapes.iter().map(|(n, s)| (n.as_str(), s.as_slice())));
    let opt = AdamW::new(cfg.weight_decay);
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let mut step = 0usize;
    let mut metrics = Vec::new();

    for epoch in 1..=cfg.epochs {
        let order = root.substream2(SHUFFLE_STREAM, epoch as u64).permutation(n);
        let (mut xent, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bv = bb.bind(&mut tape, vit, true);
            let hv = head.bind(&mut tape, true);
            let mut logits = Vec::with_capacity(batch.len());
            for &idx in batch {
                let e0 = embed_patches(&mut tape, &data.images[idx], &bv, vit)?;
                logits.push(forward_plain(&mut tape, e0, &bv, &hv, vit)?);
            }
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let lg = tape.concat_rows(&logits)?;
            let o = objective(&mut tape, lg, &labels, None, 0.0)?;
            let loss = tape.value(o.total).item().as_f64();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite pretext loss at epoch {epoch}, step {step}")));
            }
            let grads = tape.backward(o.total)?;
            let mut vars = bv.named();
            vars.push(("head.weight".into(), hv.weight));
            vars.push(("head.bias".into(), hv.bias));
            let mut named: Vec<(String, Tensor<T>)> = vars
                .iter()
                .map(|(name, v)| (name.clone(), grads.get_or_zeros(*v, tape.shape(*v))))
                .collect();
            clip_global_norm(&mut named, cfg.clip_norm);
            lr = lr_schedule(step + 1, total_steps, warmup_steps, cfg.lr);
            let mut params = bb.named_mut();
            params.push(("head.weight".into(), &mut head.weight));
            params.push(("head.bias".into(), &mut head.bias));
            opt.step(&mut params, &named, &mut optimizer, lr)?;
            step += 1;
            xent += loss * batch.len() as f64;
            let lv = tape.value(lg);
            correct += labels.iter().enumerate().filter(|(i, &l)| argmax(lv.row_slice(*i)) == l).count();
        }
        metrics.push(MetricRecord {
            epoch,
            split: "pretext".into(),
            xent: xent / n as f64,
            kl: 0.0,
            total: xent / n as f64,
            accuracy: correct as f64 / n as f64,
            lr,
            wall_seconds: 0.0,
        });
    }
    Ok((bb, metrics))
}

/// Saves a pretrained backbone.
pub fn save_backbone<T: Real>(
    bb: &BackboneParams<T>,
    vit: &ViTConfig,
    run: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    backbone_to_checkpoint(bb, vit, run, 0, 0).save(path)
}
