//! Per-instance PCA of prompt outputs.
//!
//! The `p` prompt tokens of one instance are the samples and the `d` features
//! are the variables. The mean and basis are constants for differentiation;
//! gradients reach `Z` through the coordinate product only.

use crate::error::{Error, Result};
use crate::numerics::linalg::complete_orthonormal;
use crate::numerics::svd::jacobi_svd;
use crate::numerics::{kernels, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection<T> {
    /// Token mean `[1×d]`.
    pub mean: Tensor<T>,
    /// Orthonormal basis `[d×m]`, principal directions first.
    pub basis: Tensor<T>,
    /// `(Z − mean) · basis`, `[p×m]`. Columns at or beyond `rank` are exact
    /// zeros.
    pub coordinates: Tensor<T>,
    /// Rank of the centred tokens.
    pub rank: usize,
    /// Sum of the top-`m` eigenvalues of the sample covariance
    /// `ZcᵀZc / (p − 1)`.
    pub retained_variance: f64,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl<T: Real> PcaProjection<T> {
    pub fn m(&self) -> usize {
        self.basis.cols()
    }

    pub fn retained_fraction(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.retained_variance / self.total_variance
        } else {
            1.0
        }
    }

    /// `mean + coordinates · basisᵀ`, `[p×d]`.
    pub fn reconstruct(&self) -> Result<Tensor<T>> {
        let back = kernels::matmul_nt(&self.coordinates, &self.basis)?;
        let d = self.mean.len();
        let m = self.mean.data();
        Tensor::new(
            back.shape().to_vec(),
            back.data().iter().enumerate().map(|(i, &v)| v + m[i % d]).collect(),
        )
    }
}

/// Fits the top-`m` principal subspace of `z: [p×d]` and projects onto it.
pub fn pca_project<T: Real>(z: &Tensor<T>, m: usize) -> Result<PcaProjection<T>> {
    if !z.is_matrix() {
        return Err(Error::Dimension(format!("pca expects a matrix, got {:?}", z.shape())));
    }
    let (p, d) = (z.rows(), z.cols());
    if m == 0 || m > d {
        return Err(Error::Config(format!("pca needs 1 <= m <= d={d}, got m={m}")));
    }
    if p == 0 {
        return Err(Error::Config("pca needs at least one token".into()));
    }
    let mean = column_mean(z);
    let centered = subtract_row(z, &mean);

    let svd = jacobi_svd(&centered.to_f64_vec(), p, d)?;
    let k = p.min(d);
    let take = m.min(k);
    let mut cols: Vec<Vec<f64>> = svd.v[..take].to_vec();
    cols.resize(m, vec![0.0; d]);
    let mut valid = vec![true; take];
    valid.resize(m, false);
    complete_orthonormal(&mut cols, &valid, d);
    for col in cols.iter_mut().skip(take) {
        let pivot = col.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
        if pivot < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let mut basis = Tensor::zeros(&[d, m]);
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            basis.set(i, j, T::lit(x));
        }
    }

    let rank = svd.rank.min(m);
    let coordinates = masked_coordinates(&centered, &basis, rank)?;
    let denom = if p > 1 { (p - 1) as f64 } else { 1.0 };
    let retained_variance = svd.s[..take].iter().map(|s| s * s).sum::<f64>() / denom;
    let total_variance = centered.to_f64_vec().iter().map(|x| x * x).sum::<f64>() / denom;

    Ok(PcaProjection {
        mean,
        basis,
        coordinates,
        rank,
        retained_variance,
        total_variance,
    })
}

fn column_mean<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let (p, d) = (z.rows(), z.cols());
    let mut mean = vec![T::zero(); d];
    for i in 0..p {
        for (m, &v) in mean.iter_mut().zip(z.row_slice(i)) {
            *m = *m + v;
        }
    }
    let inv = T::one() / T::lit(p as f64);
    mean.iter_mut().for_each(|m| *m = *m * inv);
    Tensor::row(mean)
}

/// `z + (−row)` per row; identical bits to the tape's `add_row` with the
/// negated mean.
fn subtract_row<T: Real>(z: &Tensor<T>, row: &Tensor<T>) -> Tensor<T> {
    let d = row.len();
    let r = row.data();
    let data = z.data().iter().enumerate().map(|(i, &v)| v + (-r[i % d])).collect();
    Tensor::new(z.shape().to_vec(), data).expect("shape preserved")
}

fn masked_coordinates<T: Real>(centered: &Tensor<T>, basis: &Tensor<T>, rank: usize) -> Result<Tensor<T>> {
    let (p, m) = (centered.rows(), basis.cols());
    let kept = kernels::matmul(centered, &basis.slice_cols(0, rank)?)?;
    if rank == m {
        return Ok(kept);
    }
    Tensor::concat_cols(&[&kept, &Tensor::zeros(&[p, m - rank])])
}

/// Records `(Z − mean) · basis` on the tape with mean and basis as constants,
/// zero-filling columns at or beyond `rank`. Produces exactly the values in
/// `proj.coordinates` when `z` holds the tokens `proj` was fitted on.
pub fn project_on_tape<T: Real>(tape: &mut Tape<T>, z: Var, proj: &PcaProjection<T>) -> Result<Var> {
    let p = tape.shape(z)[0];
    let m = proj.m();
    let neg_mean = tape.constant(proj.mean.map(|v| -v));
    let centered = tape.add_row(z, neg_mean)?;
    let basis = tape.constant(proj.basis.slice_cols(0, proj.rank)?);
    let kept = tape.matmul(centered, basis)?;
    if proj.rank == m {
        return Ok(kept);
    }
    let zeros = tape.constant(Tensor::zeros(&[p, m - proj.rank]));
    tape.concat_cols(&[kept, zeros])
}

/// Projection of `z` onto a fixed orthonormal `basis: [d×m]` after per-instance
/// centring. No rank masking.
pub fn random_projection<T: Real>(z: &Tensor<T>, basis: &Tensor<T>) -> Result<PcaProjection<T>> {
    let (p, d) = (z.rows(), z.cols());
    if basis.rows() != d {
        return Err(Error::Dimension(format!(
            "projection basis has {} rows, tokens have width {d}",
            basis.rows()
        )));
    }
    let mean = column_mean(z);
    let centered = subtract_row(z, &mean);
    let coordinates = kernels::matmul(&centered, basis)?;
    let denom = if p > 1 { (p - 1) as f64 } else { 1.0 };
    let retained_variance = coordinates.to_f64_vec().iter().map(|x| x * x).sum::<f64>() / denom;
    let total_variance = centered.to_f64_vec().iter().map(|x| x * x).sum::<f64>() / denom;
    Ok(PcaProjection {
        mean,
        basis: basis.clone(),
        coordinates,
        rank: basis.cols(),
        retained_variance,
        total_variance,
    })
}

/// `[coordinates | learnable]` along the feature axis.
pub fn assemble_combined<T: Real>(
    tape: &mut Tape<T>,
    coordinates: Var,
    learnable: Var,
    dim: usize,
) -> Result<Var> {
    let (cp, cm) = (tape.shape(coordinates)[0], tape.shape(coordinates)[1]);
    let (lp, lw) = (tape.shape(learnable)[0], tape.shape(learnable)[1]);
    if cp != lp || cm + lw != dim {
        return Err(Error::Dimension(format!(
            "combined prompt needs [p×m] and [p×(d−m)] with d={dim}, got [{cp}×{cm}] and [{lp}×{lw}]"
        )));
    }
    if lw == 0 {
        return Ok(coordinates);
    }
    if cm == 0 {
        return Ok(learnable);
    }
    tape.concat_cols(&[coordinates, learnable])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    #[test]
    fn exact_rank_two_affine_subspace_reconstructs() {
        let mut rng = RngState::new(11);
        let a: Tensor<f64> = rng.sample_gaussian(&[7, 2]);
        let b: Tensor<f64> = rng.sample_gaussian(&[2, 5]);
        let offset: Tensor<f64> = rng.sample_gaussian(&[1, 5]);
        let base = kernels::matmul(&a, &b).unwrap();
        let z = Tensor::new(
            base.shape().to_vec(),
            base.data().iter().enumerate().map(|(i, v)| v + offset.data()[i % 5]).collect(),
        )
        .unwrap();
        let proj = pca_project(&z, 2).unwrap();
        assert_eq!(proj.rank, 2);
        let rec = proj.reconstruct().unwrap();
        for (x, y) in rec.data().iter().zip(z.data()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn full_width_is_an_isometry() {
        let z: Tensor<f64> = RngState::new(4).sample_gaussian(&[9, 4]);
        let proj = pca_project(&z, 4).unwrap();
        let mean = proj.mean.clone();
        let centered = subtract_row(&z, &mean);
        let before = centered.frobenius_sq();
        let after = proj.coordinates.frobenius_sq();
        assert!((before - after).abs() < 1e-10 * before);
    }

    #[test]
    fn trailing_columns_beyond_rank_are_exact_zeros() {
        let z: Tensor<f64> = RngState::new(8).sample_gaussian(&[3, 10]);
        let proj = pca_project(&z, 6).unwrap();
        assert_eq!(proj.rank, 2);
        for i in 0..3 {
            for j in 2..6 {
                assert_eq!(proj.coordinates.at(i, j).to_bits(), 0.0f64.to_bits());
            }
        }
    }

    #[test]
    fn tape_projection_matches_fit() {
        let z: Tensor<f32> = RngState::new(2).sample_gaussian(&[8, 12]);
        let proj = pca_project(&z, 5).unwrap();
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let c = project_on_tape(&mut tape, zv, &proj).unwrap();
        assert!(tape.value(c).bitwise_eq(&proj.coordinates));
    }

    #[test]
    fn m_out_of_range_is_config_error() {
        let z = Tensor::<f64>::zeros(&[3, 4]);
        assert!(matches!(pca_project(&z, 5), Err(Error::Config(_))));
        assert!(matches!(pca_project(&z, 0), Err(Error::Config(_))));
    }

    #[test]
    fn combined_prompt_round_trip() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(RngState::new(1).sample_gaussian(&[4, 3]));
        let l = tape.constant(RngState::new(2).sample_gaussian(&[4, 5]));
        let combined = assemble_combined(&mut tape, c, l, 8).unwrap();
        let v = tape.value(combined).clone();
        assert_eq!(&v.slice_cols(0, 3).unwrap(), tape.value(c));
        assert_eq!(&v.slice_cols(3, 8).unwrap(), tape.value(l));
        assert!(assemble_combined(&mut tape, c, l, 9).is_err());
    }
}
