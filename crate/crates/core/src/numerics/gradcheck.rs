//! Central finite differences, used to check analytic gradients.

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Default step for central differences in f64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely (scaled by this
/// floor) rather than relative to the gradient.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` with respect to every entry of `x`.
pub fn numeric_gradient(
    x: &Tensor<f64>,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Compares the tape gradient of a scalar-valued graph against central
/// differences for each input. Returns the per-input maximum relative error.
///
/// `build` receives a tape and one trainable leaf per input and must return a
/// scalar node.
pub fn check_graph(
    inputs: &[Tensor<f64>],
    step: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.param(v.clone())).collect();
        let out = build(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut errors = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.shape());
        let mut values = inputs.to_vec();
        let numeric = numeric_gradient(input, step, |probe| {
            values[k] = probe.clone();
            eval(&values)
        })?;
        errors.push(max_relative_error(&analytic, &numeric));
    }
    Ok(errors)
}
