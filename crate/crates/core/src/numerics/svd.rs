//! Truncated singular value decomposition by one-sided Jacobi rotations.
//!
//! The rotations run on whichever of `M` or `Mᵀ` has fewer columns, in f64
//! regardless of the tensor precision. Singular vectors belonging to
//! (numerically) zero singular values are completed to an orthonormal set
//! with Gram–Schmidt over the standard basis, so the returned bases are
//! orthonormal even for rank-deficient input.

use crate::error::{Error, Result};

use super::linalg::complete_orthonormal;
use super::{Real, Tensor};

/// `M ≈ U · diag(S) · Vᵀ` restricted to the leading `m` triplets.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    /// `[p×m]`
    pub u: Tensor<T>,
    /// `[m]`, non-negative and non-increasing.
    pub s: Tensor<T>,
    /// `[d×m]`, orthonormal columns.
    pub v: Tensor<T>,
    /// Number of singular values above the zero threshold.
    pub rank: usize,
    pub sweeps: usize,
}

const ROTATION_TOL: f64 = 1e-15;

/// Leading `m` singular triplets of `matrix: [p×d]`.
///
/// Each column of `V` has its largest-magnitude entry positive; `U` is flipped
/// together with it.
pub fn svd_topk<T: Real>(matrix: &Tensor<T>, m: usize) -> Result<Svd<T>> {
    if !matrix.is_matrix() {
        return Err(Error::Dimension(format!(
            "svd expects a matrix, got {:?}",
            matrix.shape()
        )));
    }
    let (p, d) = (matrix.rows(), matrix.cols());
    if m > p.min(d) {
        return Err(Error::Config(format!(
            "svd_topk: m={m} exceeds min(p, d)={}",
            p.min(d)
        )));
    }
    if !matrix.is_finite() {
        return Err(Error::Numeric("svd input contains non-finite values".into()));
    }
    let full = jacobi_svd(&matrix.to_f64_vec(), p, d)?;

    let u = columns_to_tensor(&full.u[..m], p);
    let v = columns_to_tensor(&full.v[..m], d);
    let s = Tensor::new(vec![m], full.s[..m].iter().map(|&x| T::lit(x)).collect())?;
    Ok(Svd {
        u,
        s,
        v,
        rank: full.rank,
        sweeps: full.sweeps,
    })
}

/// Full thin decomposition in f64 with `min(p, d)` triplets, as column lists.
pub(crate) struct ThinSvd {
    pub u: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub rank: usize,
    pub sweeps: usize,
}

pub(crate) fn jacobi_svd(data: &[f64], p: usize, d: usize) -> Result<ThinSvd> {
    let k = p.min(d);
    if k == 0 {
        return Ok(ThinSvd {
            u: vec![],
            s: vec![],
            v: vec![],
            rank: 0,
            sweeps: 0,
        });
    }
    // Orthogonalise the columns of `a` (`rows × n`, stored by column).
    let transposed = p < d;
    let (rows, n) = if transposed { (d, p) } else { (p, d) };
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..rows)
                .map(|i| if transposed { data[j * d + i] } else { data[i * d + j] })
                .collect()
        })
        .collect();
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let cap = 100 * k;
    let mut sweeps = 0;
    loop {
        if sweeps >= cap {
            return Err(Error::Numeric(format!(
                "jacobi svd did not converge after {sweeps} sweeps"
            )));
        }
        sweeps += 1;
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                let gamma = dot(&a[i], &a[j]);
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, i, j, c, s);
                rotate(&mut w, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut triplets: Vec<(f64, usize)> = a
        .iter()
        .enumerate()
        .map(|(j, col)| (dot(col, col).sqrt(), j))
        .collect();
    triplets.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    triplets.truncate(k);

    let smax = triplets.first().map_or(0.0, |t| t.0);
    let threshold = smax * (p.max(d) as f64) * f64::EPSILON;
    let rank = triplets.iter().take_while(|t| t.0 > threshold && t.0 > 0.0).count();

    let mut s = Vec::with_capacity(k);
    let mut left = Vec::with_capacity(k);
    let mut right = Vec::with_capacity(k);
    for (idx, &(sigma, j)) in triplets.iter().enumerate() {
        let keep = idx < rank;
        s.push(if keep { sigma } else { 0.0 });
        // `a` columns are σ·(left vectors of the working matrix); `w` holds
        // its right vectors.
        let scaled: Vec<f64> = if keep {
            a[j].iter().map(|x| x / sigma).collect()
        } else {
            vec![0.0; rows]
        };
        if transposed {
            right.push(scaled);
            left.push(w[j].clone());
        } else {
            left.push(scaled);
            right.push(w[j].clone());
        }
    }
    let valid: Vec<bool> = (0..k).map(|i| i < rank).collect();
    if transposed {
        complete_orthonormal(&mut right, &valid, d);
        complete_orthonormal(&mut left, &vec![true; k], p);
    } else {
        complete_orthonormal(&mut left, &valid, p);
    }

    for (uc, vc) in left.iter_mut().zip(right.iter_mut()) {
        let pivot = vc
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            vc.iter_mut().for_each(|x| *x = -*x);
            uc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(ThinSvd {
        u: left,
        s,
        v: right,
        rank,
        sweeps,
    })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(j);
    let (ci, cj) = (&mut head[i], &mut tail[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn columns_to_tensor<T: Real>(cols: &[Vec<f64>], rows: usize) -> Tensor<T> {
    let n = cols.len();
    let mut data = vec![T::zero(); rows * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            data[i * n + j] = T::lit(x);
        }
    }
    Tensor::matrix(rows, n, data).expect("column layout")
}
