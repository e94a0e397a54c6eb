use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::prompt::kl_to_standard_normal;

/// Scalar loss components on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub xent: Var,
    pub kl: Var,
}

/// `xent + β·kl` for a batch.
///
/// `logits` is `[B×C]`. `moments` holds the per-instance generator outputs
/// `(μ, logvar)`, each `[B×d]`; without them the KL term is exactly zero.
/// Both terms are batch means. Reductions run over features first, then over
/// instances in batch order.
pub fn objective<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    moments: Option<(Var, Var)>,
    beta: f64,
) -> Result<Objective> {
    let (b, c) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    if labels.len() != b || b == 0 {
        return Err(Error::Input(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let inv_b = T::one() / T::lit(b as f64);

    let mut mask = Tensor::zeros(&[b, c]);
    for (i, &l) in labels.iter().enumerate() {
        mask.set(i, l, T::one());
    }
    let mask = tape.constant(mask);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, mask)?;
    let per_instance = tape.sum_cols(picked)?;
    let summed = tape.sum(per_instance);
    let xent = tape.scale(summed, -inv_b);

    let kl = match moments {
        Some((mu, logvar)) => {
            let per_instance = kl_to_standard_normal(tape, mu, logvar)?;
            let summed = tape.sum(per_instance);
            tape.scale(summed, inv_b)
        }
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let weighted = tape.scale(kl, T::lit(beta));
    let total = tape.add(xent, weighted)?;
    Ok(Objective { total, xent, kl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[3, 5]));
        let o = objective(&mut tape, logits, &[0, 2, 4], None, 0.01).unwrap();
        assert!((tape.value(o.xent).item() - 5f64.ln()).abs() < 1e-15);
        assert_eq!(tape.value(o.kl).item(), 0.0);
        assert_eq!(tape.value(o.total).item(), tape.value(o.xent).item());
    }

    #[test]
    fn matches_closed_forms() {
        let mut rng = RngState::new(4);
        let (b, c, d) = (4, 3, 5);
        let l: Tensor<f64> = rng.sample_gaussian(&[b, c]);
        let mu: Tensor<f64> = rng.sample_gaussian(&[b, d]);
        let lv: Tensor<f64> = rng.sample_gaussian(&[b, d]);
        let labels = [2, 0, 1, 1];
        let beta = 0.3;
        let mut tape = Tape::new();
        let (lv_, mu_, l_) = (tape.constant(lv.clone()), tape.constant(mu.clone()), tape.constant(l.clone()));
        let o = objective(&mut tape, l_, &labels, Some((mu_, lv_)), beta).unwrap();

        let mut xent = 0.0;
        let mut kl = 0.0;
        for i in 0..b {
            let row = l.row_slice(i);
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            xent += lse - row[labels[i]];
            for j in 0..d {
                let (m, v) = (mu.at(i, j), lv.at(i, j));
                kl += 0.5 * (m * m + v.exp() - 1.0 - v);
            }
        }
        xent /= b as f64;
        kl /= b as f64;
        assert!((tape.value(o.xent).item() - xent).abs() < 1e-10);
        assert!((tape.value(o.kl).item() - kl).abs() < 1e-10);
        assert!((tape.value(o.total).item() - (xent + beta * kl)).abs() < 1e-10);
    }

    #[test]
    fn kl_gradients_have_closed_form() {
        let mut rng = RngState::new(8);
        let (b, d) = (3, 4);
        let mu: Tensor<f64> = rng.sample_gaussian(&[b, d]);
        let lv: Tensor<f64> = rng.sample_gaussian(&[b, d]);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[b, 2]));
        let (m, v) = (tape.param(mu.clone()), tape.param(lv.clone()));
        let o = objective(&mut tape, logits, &[0, 1, 0], Some((m, v)), 1.0).unwrap();
        let g = tape.backward(o.kl).unwrap();
        let gm = g.get(m).unwrap();
        let gv = g.get(v).unwrap();
        for k in 0..b * d {
            assert!((gm.data()[k] - mu.data()[k] / b as f64).abs() < 1e-10);
            let expect = (lv.data()[k].exp() - 1.0) / (2.0 * b as f64);
            assert!((gv.data()[k] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn bad_label_is_input_error() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(objective(&mut tape, logits, &[3], None, 0.0), Err(Error::Input(_))));
    }
}
