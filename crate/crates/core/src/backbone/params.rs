use crate::error::{Error, Result};
use crate::numerics::{Real, RngState, Tape, Tensor, Var};

use super::{PositionEncoding, ViTConfig};

macro_rules! layer_fields {
    ($m:ident) => {
        $m! {
            ln1_gamma, ln1_beta, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_gamma, ln2_beta,
            w_fc1, b_fc1, w_fc2, b_fc2
        }
    };
}

macro_rules! define_layer {
    ($($f:ident),*) => {
        /// Weights of one pre-norm transformer block. Biases and norm affines
        /// are `[1×n]` rows; weights are `[in×out]`.
        #[derive(Clone, Debug, PartialEq)]
        pub struct LayerParams<T> {
            $(pub $f: Tensor<T>,)*
        }

        /// A block's weights recorded on a tape.
        #[derive(Clone, Debug)]
        pub struct LayerVars {
            $(pub $f: Var,)*
        }

        impl<T: Real> LayerParams<T> {
            pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
                vec![$((stringify!($f), &self.$f),)*]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
                vec![$((stringify!($f), &mut self.$f),)*]
            }

            pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> LayerVars {
                LayerVars {
                    $($f: tape.leaf(self.$f.clone(), trainable),)*
                }
            }
        }

        impl LayerVars {
            pub fn named(&self) -> Vec<(&'static str, Var)> {
                vec![$((stringify!($f), self.$f),)*]
            }
        }
    };
}

layer_fields!(define_layer);

impl<T: Real> LayerParams<T> {
    pub fn init(cfg: &ViTConfig, rng: &mut RngState) -> Self {
        let d = cfg.dim;
        let h = cfg.mlp_hidden();
        let linear = |rng: &mut RngState, fan_in: usize, fan_out: usize| {
            rng.sample_uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        LayerParams {
            ln1_gamma: Tensor::ones(&[1, d]),
            ln1_beta: Tensor::zeros(&[1, d]),
            w_q: linear(rng, d, d),
            b_q: Tensor::zeros(&[1, d]),
            w_k: linear(rng, d, d),
            b_k: Tensor::zeros(&[1, d]),
            w_v: linear(rng, d, d),
            b_v: Tensor::zeros(&[1, d]),
            w_o: linear(rng, d, d),
            b_o: Tensor::zeros(&[1, d]),
            ln2_gamma: Tensor::ones(&[1, d]),
            ln2_beta: Tensor::zeros(&[1, d]),
            w_fc1: linear(rng, d, h),
            b_fc1: Tensor::zeros(&[1, h]),
            w_fc2: linear(rng, h, d),
            b_fc2: Tensor::zeros(&[1, d]),
        }
    }
}

/// Frozen transformer weights (everything except the task head).
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    /// `[C·P·P × d]`
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub class_token: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub class_token: Var,
    /// `[k×d]` position table added to image tokens.
    pub positions: Var,
    pub layers: Vec<LayerVars>,
    pub norm_gamma: Var,
    pub norm_beta: Var,
}

impl<T: Real> BackboneParams<T> {
    pub fn init(cfg: &ViTConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        if cfg.position != PositionEncoding::Sinusoidal {
            return Err(Error::Config(
                "learned position tables are only supported for parameter counting".into(),
            ));
        }
        let d = cfg.dim;
        let fan_in = cfg.patch_dim();
        let patch_w = rng.sample_uniform(&[fan_in, d], 1.0 / (fan_in as f64).sqrt());
        let layers = (0..cfg.depth).map(|_| LayerParams::init(cfg, rng)).collect();
        Ok(BackboneParams {
            patch_w,
            patch_b: Tensor::zeros(&[1, d]),
            class_token: Tensor::zeros(&[1, d]),
            layers,
            norm_gamma: Tensor::ones(&[1, d]),
            norm_beta: Tensor::zeros(&[1, d]),
        })
    }

    /// Records every weight on `tape`; `trainable` selects pretraining versus
    /// frozen use.
    pub fn bind(&self, tape: &mut Tape<T>, cfg: &ViTConfig, trainable: bool) -> BackboneVars {
        BackboneVars {
            patch_w: tape.leaf(self.patch_w.clone(), trainable),
            patch_b: tape.leaf(self.patch_b.clone(), trainable),
            class_token: tape.leaf(self.class_token.clone(), trainable),
            positions: tape.constant(super::sinusoidal_positions(cfg.tokens(), cfg.dim)),
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            norm_gamma: tape.leaf(self.norm_gamma.clone(), trainable),
            norm_beta: tape.leaf(self.norm_beta.clone(), trainable),
        }
    }

    /// Tensors with stable names, in archive order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("backbone.patch_w".to_string(), &self.patch_w),
            ("backbone.patch_b".to_string(), &self.patch_b),
            ("backbone.class_token".to_string(), &self.class_token),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("backbone.layer{i}.{name}"), t));
            }
        }
        out.push(("backbone.norm_gamma".to_string(), &self.norm_gamma));
        out.push(("backbone.norm_beta".to_string(), &self.norm_beta));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("backbone.patch_w".to_string(), &mut self.patch_w),
            ("backbone.patch_b".to_string(), &mut self.patch_b),
            ("backbone.class_token".to_string(), &mut self.class_token),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.named_mut() {
                out.push((format!("backbone.layer{i}.{name}"), t));
            }
        }
        out.push(("backbone.norm_gamma".to_string(), &mut self.norm_gamma));
        out.push(("backbone.norm_beta".to_string(), &mut self.norm_beta));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

impl BackboneVars {
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out = vec![
            ("backbone.patch_w".to_string(), self.patch_w),
            ("backbone.patch_b".to_string(), self.patch_b),
            ("backbone.class_token".to_string(), self.class_token),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, v) in layer.named() {
                out.push((format!("backbone.layer{i}.{name}"), v));
            }
        }
        out.push(("backbone.norm_gamma".to_string(), self.norm_gamma));
        out.push(("backbone.norm_beta".to_string(), self.norm_beta));
        out
    }
}

/// Trainable linear classifier on the final class token.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    /// `[d × classes]`
    pub weight: Tensor<T>,
    /// `[1 × classes]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> HeadParams<T> {
    pub fn init(dim: usize, classes: usize, rng: &mut RngState) -> Self {
        HeadParams {
            weight: rng.sample_uniform(&[dim, classes], 1.0 / (dim as f64).sqrt()),
            bias: Tensor::zeros(&[1, classes]),
        }
    }

    pub fn zeros(dim: usize, classes: usize) -> Self {
        HeadParams {
            weight: Tensor::zeros(&[dim, classes]),
            bias: Tensor::zeros(&[1, classes]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> HeadVars {
        HeadVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }
}
