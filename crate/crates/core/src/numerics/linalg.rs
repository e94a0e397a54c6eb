//! Small dense helpers: Gram–Schmidt completion and random orthonormal bases.

use crate::error::{Error, Result};

use super::{Real, RngState, Tensor};

/// Replaces every column with `valid[j] == false` by a unit vector orthogonal
/// to all columns already valid. Each replacement is the standard basis
/// vector with the largest residual after projection, lowest index on ties;
/// while fewer than `dim` directions are taken that residual has squared
/// norm at least `(dim − taken) / dim`. Deterministic.
pub(crate) fn complete_orthonormal(cols: &mut [Vec<f64>], valid: &[bool], dim: usize) {
    let mut accepted: Vec<Vec<f64>> = cols
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|(c, _)| c.clone())
        .collect();
    for (j, col) in cols.iter_mut().enumerate() {
        if valid[j] {
            continue;
        }
        assert!(accepted.len() < dim, "cannot complete basis beyond dimension {dim}");
        let mut best: Option<(f64, Vec<f64>)> = None;
        for candidate in 0..dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            // Two passes of modified Gram–Schmidt keep the result orthogonal
            // to working precision.
            for _ in 0..2 {
                for q in &accepted {
                    let proj: f64 = e.iter().zip(q).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().map_or(true, |(n, _)| norm > *n) {
                best = Some((norm, e));
            }
        }
        let (norm, mut e) = best.expect("dim > 0");
        e.iter_mut().for_each(|x| *x /= norm);
        accepted.push(e.clone());
        *col = e;
    }
}

/// Orthonormalises the columns of `a: [d×m]` (thin QR, `Q` only).
pub fn orthonormalize_columns<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, m) = (a.rows(), a.cols());
    if m > d {
        return Err(Error::Dimension(format!(
            "cannot orthonormalise {m} columns in dimension {d}"
        )));
    }
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(m);
    for j in 0..m {
        let mut v: Vec<f64> = (0..d).map(|i| a.at(i, j).as_f64()).collect();
        for _ in 0..2 {
            for prev in &q {
                let proj: f64 = v.iter().zip(prev).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(prev).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(format!(
                "column {j} is linearly dependent on earlier columns"
            )));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    let mut out = Tensor::zeros(&[d, m]);
    for (j, col) in q.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out.set(i, j, T::lit(x));
        }
    }
    Ok(out)
}

/// A `[d×m]` basis drawn by orthonormalising a standard Gaussian matrix.
pub fn random_orthonormal<T: Real>(rng: &mut RngState, d: usize, m: usize) -> Result<Tensor<T>> {
    let g: Tensor<T> = rng.sample_gaussian(&[d, m]);
    orthonormalize_columns(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::matmul_tn;

    #[test]
    fn completes_a_direction_equally_far_from_every_axis() {
        // The complement of (½, ½, ½, ½): every axis keeps only half its length.
        let h = 0.5;
        let mut cols = vec![
            vec![h, h, -h, -h],
            vec![h, -h, h, -h],
            vec![h, -h, -h, h],
            vec![0.0; 4],
        ];
        complete_orthonormal(&mut cols, &[true, true, true, false], 4);
        for (x, &y) in cols[3].iter().zip(&[h, h, h, h]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn random_basis_is_orthonormal() {
        let mut rng = RngState::new(5);
        let q: Tensor<f64> = random_orthonormal(&mut rng, 9, 4).unwrap();
        let gram = matmul_tn(&q, &q).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn completion_fills_missing_columns() {
        let mut cols = vec![vec![0.6, 0.8, 0.0], vec![0.0; 3], vec![0.0; 3]];
        complete_orthonormal(&mut cols, &[true, false, false], 3);
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }
}
