//! Instance prompt generators over the image tokens `E_0`.
//!
//! Both variants share a trunk: the `k` image tokens are laid out on their
//! `√k × √k` patch grid with `d` channels, then
//! `conv(d→d/2, 3×3, pad 1) → GELU → conv(d/2→d/2, 3×3, pad 1) → mean pool`.

use crate::error::{Error, Result};
use crate::numerics::{Real, RngState, Tape, Tensor, Var};

use super::GeneratorKind;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorTrunk<T> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilisticGenerator<T> {
    pub trunk: GeneratorTrunk<T>,
    pub mu_w: Tensor<T>,
    pub mu_b: Tensor<T>,
    pub logvar_w: Tensor<T>,
    pub logvar_b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectGenerator<T> {
    pub trunk: GeneratorTrunk<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Generator<T> {
    Probabilistic(ProbabilisticGenerator<T>),
    Direct(DirectGenerator<T>),
}

/// Generator weights on a tape, in the same order as [`Generator::named`].
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub kind: GeneratorKind,
    pub vars: Vec<Var>,
}

/// Hidden channel count of the trunk.
pub fn hidden_channels(dim: usize) -> usize {
    (dim / 2).max(1)
}

fn fan_in_uniform<T: Real>(rng: &mut RngState, shape: &[usize], fan_in: usize) -> Tensor<T> {
    rng.sample_uniform(shape, 1.0 / (fan_in as f64).sqrt())
}

impl<T: Real> GeneratorTrunk<T> {
    pub fn init(dim: usize, rng: &mut RngState) -> Self {
        let h = hidden_channels(dim);
        GeneratorTrunk {
            conv1_w: fan_in_uniform(rng, &[h, dim, 3, 3], dim * 9),
            conv1_b: fan_in_uniform(rng, &[h], dim * 9),
            conv2_w: fan_in_uniform(rng, &[h, h, 3, 3], h * 9),
            conv2_b: fan_in_uniform(rng, &[h], h * 9),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("conv1_w", &mut self.conv1_w),
            ("conv1_b", &mut self.conv1_b),
            ("conv2_w", &mut self.conv2_w),
            ("conv2_b", &mut self.conv2_b),
        ]
    }
}

impl<T: Real> Generator<T> {
    pub fn init(kind: GeneratorKind, dim: usize, lambda: usize, rng: &mut RngState) -> Self {
        let h = hidden_channels(dim);
        let trunk = GeneratorTrunk::init(dim, rng);
        match kind {
            GeneratorKind::Probabilistic => Generator::Probabilistic(ProbabilisticGenerator {
                trunk,
                mu_w: fan_in_uniform(rng, &[h, dim], h),
                mu_b: fan_in_uniform(rng, &[1, dim], h),
                logvar_w: fan_in_uniform(rng, &[h, dim], h),
                logvar_b: Tensor::zeros(&[1, dim]),
            }),
            GeneratorKind::Direct => Generator::Direct(DirectGenerator {
                trunk,
                out_w: fan_in_uniform(rng, &[h, lambda * dim], h),
                out_b: fan_in_uniform(rng, &[1, lambda * dim], h),
            }),
        }
    }

    pub fn kind(&self) -> GeneratorKind {
        match self {
            Generator::Probabilistic(_) => GeneratorKind::Probabilistic,
            Generator::Direct(_) => GeneratorKind::Direct,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Generator::Probabilistic(g) => {
                let mut v = g.trunk.named();
                v.extend([
                    ("mu_w", &g.mu_w),
                    ("mu_b", &g.mu_b),
                    ("logvar_w", &g.logvar_w),
                    ("logvar_b", &g.logvar_b),
                ]);
                v
            }
            Generator::Direct(g) => {
                let mut v = g.trunk.named();
                v.extend([("out_w", &g.out_w), ("out_b", &g.out_b)]);
                v
            }
        }
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Generator::Probabilistic(g) => {
                let mut v = g.trunk.named_mut();
                v.extend([
                    ("mu_w", &mut g.mu_w),
                    ("mu_b", &mut g.mu_b),
                    ("logvar_w", &mut g.logvar_w),
                    ("logvar_b", &mut g.logvar_b),
                ]);
                v
            }
            Generator::Direct(g) => {
                let mut v = g.trunk.named_mut();
                v.extend([("out_w", &mut g.out_w), ("out_b", &mut g.out_b)]);
                v
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> GeneratorVars {
        GeneratorVars {
            kind: self.kind(),
            vars: self
                .named()
                .into_iter()
                .map(|(_, t)| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Trunk output `[1×d/2]` for image tokens `e0: [k×d]`.
fn trunk_forward<T: Real>(tape: &mut Tape<T>, e0: Var, vars: &[Var]) -> Result<Var> {
    let (k, d) = (tape.shape(e0)[0], tape.shape(e0)[1]);
    let side = (k as f64).sqrt().round() as usize;
    if side * side != k {
        return Err(Error::Config(format!(
            "instance prompts need a square token grid, got k={k}"
        )));
    }
    let channels_first = tape.transpose(e0)?;
    let grid = tape.reshape(channels_first, &[d, side, side])?;
    let h = tape.conv2d(grid, vars[0], vars[1], 1, 1)?;
    let h = tape.gelu(h);
    let h = tape.conv2d(h, vars[2], vars[3], 1, 1)?;
    let hidden = tape.shape(h)[0];
    let flat = tape.reshape(h, &[hidden, side * side])?;
    let pooled = tape.mean_cols(flat)?;
    tape.transpose(pooled)
}

/// Probabilistic generator: returns `(μ, log σ²)`, each `[1×d]`.
pub fn generator_moments<T: Real>(
    tape: &mut Tape<T>,
    e0: Var,
    g: &GeneratorVars,
) -> Result<(Var, Var)> {
    if g.kind != GeneratorKind::Probabilistic {
        return Err(Error::ModeMismatch("generator does not emit moments".into()));
    }
    let pooled = trunk_forward(tape, e0, &g.vars)?;
    let mu = tape.matmul(pooled, g.vars[4])?;
    let mu = tape.add_row(mu, g.vars[5])?;
    let logvar = tape.matmul(pooled, g.vars[6])?;
    let logvar = tape.add_row(logvar, g.vars[7])?;
    Ok((mu, logvar))
}

/// Direct generator: `λ` prompt tokens `[λ×d]`.
pub fn direct_prompts<T: Real>(
    tape: &mut Tape<T>,
    e0: Var,
    g: &GeneratorVars,
    lambda: usize,
) -> Result<Var> {
    if g.kind != GeneratorKind::Direct {
        return Err(Error::ModeMismatch("generator is not a direct generator".into()));
    }
    let d = tape.shape(e0)[1];
    let pooled = trunk_forward(tape, e0, &g.vars)?;
    let out = tape.matmul(pooled, g.vars[4])?;
    let out = tape.add_row(out, g.vars[5])?;
    if tape.shape(out)[1] != lambda * d {
        return Err(Error::Dimension(format!(
            "direct generator emits {} values, expected {}×{}",
            tape.shape(out)[1],
            lambda,
            d
        )));
    }
    tape.reshape(out, &[lambda, d])
}

/// Reparameterised instance prompts `p^i = z^i ⊙ σ + μ` with
/// `σ = exp(logvar / 2)`.
///
/// `noise` holds `z^1..z^λ` as rows of a `[λ×d]` matrix. Gradients reach the
/// generator through `μ` and `σ` only.
pub fn generate_instance_prompts<T: Real>(
    tape: &mut Tape<T>,
    e0: Var,
    g: &GeneratorVars,
    noise: &Tensor<T>,
) -> Result<(Var, Var, Var)> {
    let (mu, logvar) = generator_moments(tape, e0, g)?;
    let d = tape.shape(e0)[1];
    if !noise.is_matrix() || noise.cols() != d {
        return Err(Error::Dimension(format!(
            "noise must be [λ×{d}], got {:?}",
            noise.shape()
        )));
    }
    let half = tape.scale(logvar, T::lit(0.5));
    let sigma = tape.exp(half);
    let z = tape.constant(noise.clone());
    let scaled = tape.mul_row(z, sigma)?;
    let prompts = tape.add_row(scaled, mu)?;
    Ok((prompts, mu, logvar))
}

/// `½ Σ (μ² + exp(logvar) − 1 − logvar)` per row, `[B×d] → [B×1]`.
pub fn kl_to_standard_normal<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -T::one());
    let per_instance = tape.sum_cols(c)?;
    Ok(tape.scale(per_instance, T::lit(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(k: usize, d: usize, seed: u64) -> Tensor<f64> {
        RngState::new(seed).sample_gaussian(&[k, d])
    }

    #[test]
    fn zero_sigma_gives_mean_prompts() {
        let d = 6;
        let mut rng = RngState::new(1);
        let mut gen = Generator::<f64>::init(GeneratorKind::Probabilistic, d, 3, &mut rng);
        if let Generator::Probabilistic(g) = &mut gen {
            g.logvar_w = Tensor::zeros(&[3, d]);
            g.logvar_b = Tensor::full(&[1, d], -2000.0);
        }
        let mut tape = Tape::new();
        let e0 = tape.constant(tokens(4, d, 2));
        let gv = gen.bind(&mut tape, true);
        let z: Tensor<f64> = RngState::new(3).sample_gaussian(&[3, d]);
        let (p, mu, _) = generate_instance_prompts(&mut tape, e0, &gv, &z).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(p).row_slice(i), tape.value(mu).row_slice(0));
        }
    }

    #[test]
    fn unit_gaussian_prompts_equal_noise() {
        let d = 6;
        let mut rng = RngState::new(1);
        let mut gen = Generator::<f64>::init(GeneratorKind::Probabilistic, d, 2, &mut rng);
        if let Generator::Probabilistic(g) = &mut gen {
            g.mu_w = Tensor::zeros(&[3, d]);
            g.mu_b = Tensor::zeros(&[1, d]);
            g.logvar_w = Tensor::zeros(&[3, d]);
        }
        let mut tape = Tape::new();
        let e0 = tape.constant(tokens(9, d, 4));
        let gv = gen.bind(&mut tape, true);
        let z: Tensor<f64> = RngState::new(5).sample_gaussian(&[2, d]);
        let (p, _, _) = generate_instance_prompts(&mut tape, e0, &gv, &z).unwrap();
        assert_eq!(tape.value(p), &z);
    }

    #[test]
    fn non_square_grid_is_config_error() {
        let mut rng = RngState::new(1);
        let gen = Generator::<f64>::init(GeneratorKind::Probabilistic, 4, 1, &mut rng);
        let mut tape = Tape::new();
        let e0 = tape.constant(tokens(6, 4, 1));
        let gv = gen.bind(&mut tape, true);
        let z = Tensor::zeros(&[1, 4]);
        assert!(matches!(
            generate_instance_prompts(&mut tape, e0, &gv, &z),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn direct_output_has_lambda_rows() {
        let mut rng = RngState::new(7);
        let gen = Generator::<f64>::init(GeneratorKind::Direct, 8, 3, &mut rng);
        let mut tape = Tape::new();
        let e0 = tape.constant(tokens(4, 8, 1));
        let gv = gen.bind(&mut tape, true);
        let p = direct_prompts(&mut tape, e0, &gv, 3).unwrap();
        assert_eq!(tape.shape(p), &[3, 8]);
    }

    #[test]
    fn kl_closed_form_values() {
        let mut tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::zeros(&[1, 4]));
        let lv = tape.constant(Tensor::zeros(&[1, 4]));
        let kl = kl_to_standard_normal(&mut tape, mu, lv).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);

        let mu = tape.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let lv = tape.constant(Tensor::zeros(&[1, 1]));
        let kl = kl_to_standard_normal(&mut tape, mu, lv).unwrap();
        assert_eq!(tape.value(kl).item(), 0.5);
    }
}
