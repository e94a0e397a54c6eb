//! Plain tensor kernels shared by the tape's forward and backward passes.

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// `a · b` for `a: [r×s]`, `b: [s×t]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix(a, "matmul lhs")?;
    check_matrix(b, "matmul rhs")?;
    let (r, s) = (a.rows(), a.cols());
    let (s2, t) = (b.rows(), b.cols());
    if s != s2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: [{r}×{s}] · [{s2}×{t}]"
        )));
    }
    let mut out = vec![T::zero(); r * t];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..r {
        let orow = &mut out[i * t..(i + 1) * t];
        for k in 0..s {
            let aik = ad[i * s + k];
            if aik == T::zero() {
                continue;
            }
            let brow = &bd[k * t..(k + 1) * t];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    Tensor::matrix(r, t, out)
}

/// `a · bᵀ` for `a: [r×s]`, `b: [t×s]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix(a, "matmul_nt lhs")?;
    check_matrix(b, "matmul_nt rhs")?;
    let (r, s) = (a.rows(), a.cols());
    let (t, s2) = (b.rows(), b.cols());
    if s != s2 {
        return Err(Error::Dimension(format!(
            "matmul_nt inner extents differ: [{r}×{s}] · [{t}×{s2}]ᵀ"
        )));
    }
    let mut out = Vec::with_capacity(r * t);
    for i in 0..r {
        let arow = a.row_slice(i);
        for j in 0..t {
            let brow = b.row_slice(j);
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out.push(acc);
        }
    }
    Tensor::matrix(r, t, out)
}

/// `aᵀ · b` for `a: [s×r]`, `b: [s×t]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix(a, "matmul_tn lhs")?;
    check_matrix(b, "matmul_tn rhs")?;
    let (s, r) = (a.rows(), a.cols());
    let (s2, t) = (b.rows(), b.cols());
    if s != s2 {
        return Err(Error::Dimension(format!(
            "matmul_tn inner extents differ: [{s}×{r}]ᵀ · [{s2}×{t}]"
        )));
    }
    let mut out = vec![T::zero(); r * t];
    let (ad, bd) = (a.data(), b.data());
    for k in 0..s {
        let brow = &bd[k * t..(k + 1) * t];
        for i in 0..r {
            let aki = ad[k * r + i];
            if aki == T::zero() {
                continue;
            }
            let orow = &mut out[i * t..(i + 1) * t];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    }
    Tensor::matrix(r, t, out)
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row_slice(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    Tensor::matrix(r, c, out).expect("shape preserved")
}

/// Row-wise log-softmax, `x - max - ln Σ exp(x - max)`.
pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row_slice(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln();
        out.extend(row.iter().map(|&v| v - max - lse));
    }
    Tensor::matrix(r, c, out).expect("shape preserved")
}

/// Per-row normalisation without the affine part. Returns `(x̂, 1/σ)`.
pub fn normalize_rows<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let (r, c) = (x.rows(), x.cols());
    let n = T::lit(c as f64);
    let mut out = Vec::with_capacity(r * c);
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row_slice(i);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        out.extend(row.iter().map(|&v| (v - mean) * is));
    }
    (Tensor::matrix(r, c, out).expect("shape preserved"), inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Geometry of a 2-D convolution over a `[C×H×W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects [C×H×W] input and [O×C×kh×kw] kernel, got {input:?} and {kernel:?}"
            )));
        }
        if kernel[1] != input[0] {
            return Err(Error::Dimension(format!(
                "conv2d kernel expects {} input channels, input has {}",
                kernel[1], input[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let g = ConvGeometry {
            in_channels: input[0],
            out_channels: kernel[0],
            height: input[1],
            width: input[2],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            padding,
        };
        if g.height + 2 * padding < g.kernel_h || g.width + 2 * padding < g.kernel_w {
            return Err(Error::Dimension("conv2d kernel larger than padded input".into()));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(ky, kx)`, if
    /// inside the unpadded input.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (id, kd, bd) = (input.data(), kernel.data(), bias.data());
    let mut out = vec![T::zero(); g.out_channels * oh * ow];
    for o in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bd[o];
                for c in 0..g.in_channels {
                    for ky in 0..g.kernel_h {
                        for kx in 0..g.kernel_w {
                            if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                                let w = kd[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                                acc = acc + w * id[(c * g.height + y) * g.width + x];
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![g.out_channels, oh, ow], out).expect("conv output shape")
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (id, kd, gd) = (input.data(), kernel.data(), grad_out.data());
    let mut gi = vec![T::zero(); id.len()];
    let mut gk = vec![T::zero(); kd.len()];
    let mut gb = vec![T::zero(); g.out_channels];
    for o in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = gd[(o * oh + oy) * ow + ox];
                gb[o] = gb[o] + go;
                for c in 0..g.in_channels {
                    for ky in 0..g.kernel_h {
                        for kx in 0..g.kernel_w {
                            if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                                let ki = ((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                                let ii = (c * g.height + y) * g.width + x;
                                gk[ki] = gk[ki] + go * id[ii];
                                gi[ii] = gi[ii] + go * kd[ki];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gi).expect("shape"),
        Tensor::new(kernel.shape().to_vec(), gk).expect("shape"),
        Tensor::new(vec![g.out_channels], gb).expect("shape"),
    )
}

fn check_matrix<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if !t.is_matrix() {
        return Err(Error::Dimension(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let m = Tensor::<f64>::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![4.0, 0.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(3), &m).unwrap(), m);
    }

    #[test]
    fn hand_checked_product() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn inner_mismatch_is_dimension_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_variants_agree() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 2.0]]).unwrap();
        let nt = matmul_nt(&a, &b).unwrap();
        assert_eq!(nt, matmul(&a, &b.transpose()).unwrap());
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, matmul(&a.transpose(), &b).unwrap());
    }

    #[test]
    fn softmax_uniform_for_equal_inputs() {
        let x = Tensor::<f64>::full(&[1, 7], 3.25);
        let s = softmax_rows(&x);
        for &v in s.data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let x = Tensor::<f64>::full(&[2, 5], -1.5);
        let (xhat, inv_std) = normalize_rows(&x, 1e-5);
        assert!(xhat.data().iter().all(|&v| v == 0.0));
        assert!(inv_std.iter().all(|v| v.is_finite()));
    }
}
