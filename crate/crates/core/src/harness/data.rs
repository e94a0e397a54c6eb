//! Synthetic image datasets and their file format.
//!
//! File layout, integers little-endian:
//!
//! ```text
//! magic   b"VIADATA\x01"
//! n, channels, side, classes   u32 each
//! images  n·channels·side·side f32
//! labels  n u16
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, RngState, Tensor};
use crate::training::Split;

pub const DATA_MAGIC: &[u8; 8] = b"VIADATA\x01";

const TEMPLATE_STREAM: u64 = 11;
const SAMPLE_STREAM: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fixed class template plus Gaussian noise.
    ClassTemplate,
    /// Template under a random per-image gain and offset; the offset's sign
    /// moves the label.
    InstanceShift,
    /// Four-way rotation labels for backbone pretraining.
    PretextRotation,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::ClassTemplate => "class_template",
            Variant::InstanceShift => "instance_shift",
            Variant::PretextRotation => "pretext_rotation",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        [Variant::ClassTemplate, Variant::InstanceShift, Variant::PretextRotation]
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown dataset variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub variant: Variant,
    /// Ignored for the rotation pretext, which always has 4.
    pub classes: usize,
    /// Total images across the 60/20/20 train/validation/test split.
    pub samples: usize,
    pub image_side: usize,
    /// Side of the square blocks templates are built from.
    pub block: usize,
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn desk(variant: Variant) -> Self {
        DatasetSpec {
            variant,
            classes: 5,
            samples: 1500,
            image_side: 16,
            block: 4,
            noise: 0.5,
            seed: 1,
        }
    }

    pub fn class_count(&self) -> usize {
        match self.variant {
            Variant::PretextRotation => 4,
            _ => self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.image_side % self.block != 0 {
            return Err(Error::Config(format!(
                "image side {} must be a multiple of block {}",
                self.image_side, self.block
            )));
        }
        let cells = (self.image_side / self.block).pow(2);
        if self.variant != Variant::PretextRotation && (self.classes < 2 || cells < 2) {
            return Err(Error::Config("need at least 2 classes and 2 template blocks".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        if self.class_count() > u16::MAX as usize {
            return Err(Error::Config("too many classes".into()));
        }
        Ok(())
    }
}

/// Single-channel images held as f32, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u16>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Train, validation and test splits in one precision.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits<T> {
    pub train: Split<T>,
    pub val: Split<T>,
    pub test: Split<T>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image<T: Real>(&self, i: usize) -> Tensor<T> {
        let n = self.pixels();
        let data = self.images[i * n..(i + 1) * n].iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::new(vec![self.channels, self.side, self.side], data).expect("stored shape")
    }

    /// Index ranges of the fixed 60/20/20 split.
    pub fn split_range(&self, which: SplitName) -> std::ops::Range<usize> {
        let n = self.len();
        let a = n * 3 / 5;
        let b = n * 4 / 5;
        match which {
            SplitName::Train => 0..a,
            SplitName::Val => a..b,
            SplitName::Test => b..n,
        }
    }

    pub fn split<T: Real>(&self, which: SplitName) -> Split<T> {
        let r = self.split_range(which);
        Split {
            images: r.clone().map(|i| self.image(i)).collect(),
            labels: r.map(|i| self.labels[i] as usize).collect(),
        }
    }

    pub fn splits<T: Real>(&self) -> DataSplits<T> {
        DataSplits {
            train: self.split(SplitName::Train),
            val: self.split(SplitName::Val),
            test: self.split(SplitName::Test),
            classes: self.classes,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.images.len() * 4 + self.labels.len() * 2);
        out.extend_from_slice(DATA_MAGIC);
        for v in [self.len(), self.channels, self.side, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.images {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.labels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != DATA_MAGIC {
            return Err(Error::format("magic", "not a dataset file"));
        }
        if bytes.len() < 24 {
            return Err(Error::format("header", "truncated"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (n, channels, side, classes) = (word(0), word(1), word(2), word(3));
        let pixels = n
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(side))
            .and_then(|v| v.checked_mul(side))
            .ok_or_else(|| Error::format("header", "sizes overflow"))?;
        let expected = 24 + pixels * 4 + n * 2;
        if bytes.len() != expected {
            return Err(Error::format(
                "length",
                format!("{} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let img_end = 24 + pixels * 4;
        let images = bytes[24..img_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels: Vec<u16> = bytes[img_end..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
            .collect();
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::format("labels", format!("label {bad} with {classes} classes")));
        }
        Ok(Dataset {
            channels,
            side,
            classes,
            images,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Zero-mean ±1 block patterns, one per class, each `side²` pixels.
pub fn templates(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let g = spec.image_side / spec.block;
    let cells = g * g;
    let mut rng = RngState::new(spec.seed).substream(TEMPLATE_STREAM);
    (0..spec.classes)
        .map(|_| {
            let order = rng.permutation(cells);
            let mut signs = vec![-1.0; cells];
            for &c in &order[..cells / 2] {
                signs[c] = 1.0;
            }
            blocks_to_image(&signs, g, spec.block)
        })
        .collect()
}

fn blocks_to_image(cells: &[f64], g: usize, block: usize) -> Vec<f64> {
    let side = g * block;
    let mut img = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            img[y * side + x] = cells[(y / block) * g + x / block];
        }
    }
    img
}

fn rotate90(img: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            out[x * side + (side - 1 - y)] = img[y * side + x];
        }
    }
    out
}

/// Label rule of the instance-shift variant: a positive offset keeps the
/// template's class, a negative one moves it half-way round.
pub fn shifted_label(template: usize, offset: f64, classes: usize) -> usize {
    if offset > 0.0 {
        template
    } else {
        (template + classes / 2) % classes
    }
}

/// Generates the dataset; identical specs give identical bytes.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let side = spec.image_side;
    let px = side * side;
    let classes = spec.class_count();
    let temps = if spec.variant == Variant::PretextRotation {
        Vec::new()
    } else {
        templates(spec)
    };
    let g = side / spec.block;
    let root = RngState::new(spec.seed).substream(SAMPLE_STREAM);
    let mut images = Vec::with_capacity(spec.samples * px);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let mut rng = root.substream(i as u64);
        let (mut img, label) = match spec.variant {
            Variant::ClassTemplate => {
                let c = rng.below(classes as u64) as usize;
                (temps[c].clone(), c)
            }
            Variant::InstanceShift => {
                let j = rng.below(classes as u64) as usize;
                let gain = 0.6 + 0.8 * rng.next_uniform();
                let magnitude = 0.3 + 0.7 * rng.next_uniform();
                let offset = if rng.next_uniform() < 0.5 { magnitude } else { -magnitude };
                let img = temps[j].iter().map(|t| gain * t + offset).collect();
                (img, shifted_label(j, offset, classes))
            }
            Variant::PretextRotation => {
                let cells: Vec<f64> = (0..g * g).map(|_| rng.uniform_symmetric(1.0)).collect();
                let mut img = blocks_to_image(&cells, g, spec.block);
                for y in 0..side {
                    let ramp = 2.0 * y as f64 / (side - 1).max(1) as f64 - 1.0;
                    for x in 0..side {
                        img[y * side + x] += 1.5 * ramp;
                    }
                }
                let k = rng.below(4) as usize;
                for _ in 0..k {
                    img = rotate90(&img, side);
                }
                (img, k)
            }
        };
        for v in img.iter_mut() {
            *v += spec.noise * rng.next_normal();
        }
        images.extend(img.iter().map(|&v| v as f32));
        labels.push(label as u16);
    }
    Ok(Dataset {
        channels: 1,
        side,
        classes,
        images,
        labels,
    })
}

fn pixels_f64(ds: &Dataset, i: usize) -> Vec<f64> {
    let n = ds.side * ds.side * ds.channels;
    ds.images[i * n..(i + 1) * n].iter().map(|&v| v as f64).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// 1-nearest-template classifier over the generating templates.
pub fn nearest_template_accuracy(spec: &DatasetSpec, ds: &Dataset, which: SplitName) -> f64 {
    let temps = templates(spec);
    let r = ds.split_range(which);
    let n = r.len().max(1);
    let correct = r
        .filter(|&i| {
            let x = pixels_f64(ds, i);
            let best = (0..temps.len())
                .min_by(|&a, &b| sq_dist(&x, &temps[a]).total_cmp(&sq_dist(&x, &temps[b])))
                .unwrap_or(0);
            best == ds.labels[i] as usize
        })
        .count();
    correct as f64 / n as f64
}

/// Template-only baseline: nearest class mean, with means taken over the
/// training split. It sees every image through one fixed prototype per class.
pub fn class_mean_accuracy(ds: &Dataset, which: SplitName) -> f64 {
    let px = ds.side * ds.side * ds.channels;
    let mut means = vec![vec![0.0; px]; ds.classes];
    let mut counts = vec![0usize; ds.classes];
    for i in ds.split_range(SplitName::Train) {
        let c = ds.labels[i] as usize;
        for (m, v) in means[c].iter_mut().zip(pixels_f64(ds, i)) {
            *m += v;
        }
        counts[c] += 1;
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let r = ds.split_range(which);
    let n = r.len().max(1);
    let correct = r
        .filter(|&i| {
            let x = pixels_f64(ds, i);
            let best = (0..ds.classes)
                .min_by(|&a, &b| sq_dist(&x, &means[a]).total_cmp(&sq_dist(&x, &means[b])))
                .unwrap_or(0);
            best == ds.labels[i] as usize
        })
        .count();
    correct as f64 / n as f64
}

/// Instance-aware oracle: for each template fit the per-image gain and offset
/// by least squares, keep the best-fitting template and read the label off
/// the fitted offset's sign.
pub fn instance_fit_accuracy(spec: &DatasetSpec, ds: &Dataset, which: SplitName) -> f64 {
    let temps = templates(spec);
    let r = ds.split_range(which);
    let n = r.len().max(1);
    let correct = r
        .filter(|&i| {
            let x = pixels_f64(ds, i);
            let px = x.len() as f64;
            let offset = x.iter().sum::<f64>() / px;
            let mut best = (f64::INFINITY, 0usize);
            for (j, t) in temps.iter().enumerate() {
                let tt: f64 = t.iter().map(|v| v * v).sum();
                let gain = x.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / tt;
                let resid: f64 = x
                    .iter()
                    .zip(t)
                    .map(|(a, b)| (a - gain * b - offset).powi(2))
                    .sum();
                if resid < best.0 {
                    best = (resid, j);
                }
            }
            shifted_label(best.1, offset, temps.len()) == ds.labels[i] as usize
        })
        .count();
    correct as f64 / n as f64
}
