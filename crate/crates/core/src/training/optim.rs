use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [(String, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moments per trainable tensor, keyed by name in
/// parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<(String, Tensor<T>)>,
    pub second: Vec<(String, Tensor<T>)>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Self {
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (name, shape) in params {
            first.push((name.to_string(), Tensor::zeros(shape)));
            second.push((name.to_string(), Tensor::zeros(shape)));
        }
        OptimizerState {
            step: 0,
            first,
            second,
        }
    }
}

impl AdamW {
    /// One decoupled-decay Adam update. `params` and `grads` must list the
    /// same names in the same order as `state`. Every gradient is checked
    /// before anything is modified.
    pub fn step<T: Real>(
        &self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[(String, Tensor<T>)],
        state: &mut OptimizerState<T>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.first.len() {
            return Err(Error::Contract(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.first.len()
            )));
        }
        for ((pn, p), (gn, g)) in params.iter().zip(grads) {
            if pn != gn || p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient `{gn}` {:?} does not line up with parameter `{pn}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in `{gn}`")));
            }
        }

        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let (lr_t, c1_t, c2_t, eps) = (T::lit(lr), T::lit(c1), T::lit(c2), T::lit(self.eps));

        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = grads[i].1.data();
            let m = state.first[i].1.data_mut();
            let v = state.second[i].1.data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + ob1 * g[k];
                v[k] = b2 * v[k] + ob2 * g[k] * g[k];
                let m_hat = m[k] / c1_t;
                let v_hat = v[k] / c2_t;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
