//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value and the recipe for its
//! vector-Jacobian product. [`Tape::backward`] sweeps the nodes in reverse
//! insertion order, which is a valid reverse topological order because a node
//! can only refer to nodes recorded before it.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeometry};
use super::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used to prove that gradient checks
/// catch broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    Gelu,
    Softmax,
    LayerNorm,
    Matmul,
}

enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    Sum(Var),
    SumCols(Var),
    MeanRows(Var),
    MeanCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Select(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
}

/// A single forward/backward recording. Not shared across threads.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<BackwardFault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    trainable: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Iterates the gradients of trainable leaves.
    pub fn trainable(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter(|(i, _)| self.trainable[*i])
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    /// Records a frozen leaf. No gradient is stored for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf that is trainable or frozen according to `trainable`.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatmulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn check_row_broadcast(&self, x: Var, row: Var, what: &str) -> Result<(usize, usize)> {
        let xv = self.value(x);
        let rv = self.value(row);
        if !xv.is_matrix() || rv.len() != xv.cols() {
            return Err(Error::Dimension(format!(
                "{what}: cannot broadcast {:?} over rows of {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        Ok((xv.rows(), xv.cols()))
    }

    /// Adds a row vector (`[1×c]` or `[c]`) to every row of `x: [r×c]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check_row_broadcast(x, row, "add_row")?;
        let rv = self.value(row).data();
        let xv = self.value(x).data();
        let data = (0..r * c).map(|i| xv[i] + rv[i % c]).collect();
        let value = Tensor::matrix(r, c, data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    /// Multiplies every row of `x: [r×c]` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check_row_broadcast(x, row, "mul_row")?;
        let rv = self.value(row).data();
        let xv = self.value(x).data();
        let data = (0..r * c).map(|i| xv[i] * rv[i % c]).collect();
        let value = Tensor::matrix(r, c, data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let rg = self.rg(x);
        self.push(value, Op::Log(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.expect_matrix(x, "softmax")?;
        let value = kernels::softmax_rows(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.expect_matrix(x, "log_softmax")?;
        let value = kernels::log_softmax_rows(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// Per-token layer normalisation with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.expect_matrix(x, "layer_norm")?;
        let c = self.value(x).cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Dimension(format!(
                "layer_norm affine width must be {c}"
            )));
        }
        let (xhat, inv_std) = kernels::normalize_rows(self.value(x), eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data = xhat
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % c] + b[i % c])
            .collect();
        let value = Tensor::new(xhat.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// 2-D convolution of `input: [C×H×W]` by `kernel: [O×C×kh×kw]` plus
    /// `bias: [O]` (any shape with `O` elements).
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geometry = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        if self.value(bias).len() != geometry.out_channels {
            return Err(Error::Dimension(format!(
                "conv2d bias must have {} entries",
                geometry.out_channels
            )));
        }
        let value = kernels::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            &geometry,
        );
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// `[r×c] → [r×1]`: sums each row.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        self.expect_matrix(x, "sum_cols")?;
        let xv = self.value(x);
        let data = (0..xv.rows())
            .map(|i| xv.row_slice(i).iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let value = Tensor::matrix(xv.rows(), 1, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumCols(x), rg))
    }

    /// `[r×c] → [1×c]`: averages over rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.expect_matrix(x, "mean_rows")?;
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 {
            return Err(Error::Dimension("mean over zero rows".into()));
        }
        let mut data = vec![T::zero(); c];
        for i in 0..r {
            for (d, &v) in data.iter_mut().zip(xv.row_slice(i)) {
                *d = *d + v;
            }
        }
        let inv = T::one() / T::lit(r as f64);
        data.iter_mut().for_each(|d| *d = *d * inv);
        let value = Tensor::matrix(1, c, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// `[r×c] → [r×1]`: averages each row.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        self.expect_matrix(x, "mean_cols")?;
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if c == 0 {
            return Err(Error::Dimension("mean over zero columns".into()));
        }
        let inv = T::one() / T::lit(c as f64);
        let data = (0..r)
            .map(|i| xv.row_slice(i).iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let value = Tensor::matrix(r, 1, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanCols(x), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_rows(&values)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_cols(&values)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.expect_matrix(x, "transpose")?;
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Picks one entry (flat row-major index) as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if index >= xv.len() {
            return Err(Error::Dimension(format!(
                "select index {index} outside {:?}",
                xv.shape()
            )));
        }
        let value = Tensor::scalar(xv.data()[index]);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Select(x, index), rg))
    }

    fn expect_matrix(&self, x: Var, what: &str) -> Result<()> {
        if !self.value(x).is_matrix() {
            return Err(Error::Dimension(format!(
                "{what} expects a matrix, got {:?}",
                self.value(x).shape()
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let trainable = self.nodes.iter().map(|n| n.trainable).collect();
        Ok(Gradients { grads, trainable })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.len(), self.value(v).len());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn faulty(&self, which: BackwardFault) -> bool {
        self.fault == Some(which)
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.rg(*a) {
                    let mut ga = kernels::matmul_nt(g, self.value(*b))?;
                    if self.faulty(BackwardFault::Matmul) {
                        ga.scale_in_place(T::lit(1.5));
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = kernels::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatmulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    let ga = kernels::matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = kernels::matmul_tn(g, self.value(*a))?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*row) {
                    let gr = column_sums(g);
                    let shaped = gr.into_reshaped(self.shape(*row))?;
                    self.accumulate(grads, *row, shaped);
                }
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row).data();
                let c = rv.len();
                if self.rg(*x) {
                    let gx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().enumerate().map(|(i, &v)| v * rv[i % c]).collect(),
                    )?;
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*row) {
                    let xv = self.value(*x).data();
                    let mut gr = vec![T::zero(); c];
                    for (i, (&gv, &xv)) in g.data().iter().zip(xv).enumerate() {
                        gr[i % c] = gr[i % c] + gv * xv;
                    }
                    let shaped = Tensor::new(self.shape(*row).to_vec(), gr)?;
                    self.accumulate(grads, *row, shaped);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(out, |a, b| a * b)?),
            Op::Log(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |a, b| a / b)?)
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |a, b| two * a * b)?)
            }
            Op::Softmax(x) => {
                let (r, c) = (out.rows(), out.cols());
                let mut gx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let dot = y.iter().zip(gy).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    gx.extend(y.iter().zip(gy).map(|(&p, &q)| p * (q - dot)));
                }
                let mut gx = Tensor::matrix(r, c, gx)?;
                if self.faulty(BackwardFault::Softmax) {
                    gx.scale_in_place(T::lit(1.5));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let (r, c) = (out.rows(), out.cols());
                let mut gx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gy = g.row_slice(i);
                    let total = gy.iter().fold(T::zero(), |a, &q| a + q);
                    gx.extend(y.iter().zip(gy).map(|(&ly, &q)| q - ly.exp() * total));
                }
                self.accumulate(grads, *x, Tensor::matrix(r, c, gx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = (xhat.rows(), xhat.cols());
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let n = T::lit(c as f64);
                    let mut gx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let xh = xhat.row_slice(i);
                        let gy = g.row_slice(i);
                        // dxhat = g ⊙ γ
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..c {
                            let d = gy[j] * gam[j];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xh[j];
                        }
                        for j in 0..c {
                            let d = gy[j] * gam[j];
                            gx.push(inv_std[i] * (d - sum_d / n - xh[j] * sum_dx / n));
                        }
                    }
                    let mut gx = Tensor::matrix(r, c, gx)?;
                    if self.faulty(BackwardFault::LayerNorm) {
                        gx.scale_in_place(T::lit(1.5));
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*gamma) {
                    let prod = g.zip_map(xhat, |a, b| a * b)?;
                    let gg = column_sums(&prod).into_reshaped(self.shape(*gamma))?;
                    self.accumulate(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    let gb = column_sums(g).into_reshaped(self.shape(*beta))?;
                    self.accumulate(grads, *beta, gb);
                }
            }
            Op::Gelu(x) => {
                let mut gx = g.zip_map(self.value(*x), |a, v| a * kernels::gelu_grad(v))?;
                if self.faulty(BackwardFault::Gelu) {
                    gx.scale_in_place(T::lit(1.5));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let (gi, gk, gb) =
                    kernels::conv2d_backward(self.value(*input), self.value(*kernel), g, geometry);
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *kernel, gk);
                let gb = gb.into_reshaped(self.shape(*bias))?;
                self.accumulate(grads, *bias, gb);
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::SumCols(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let data = (0..r * c).map(|i| g.data()[i / c]).collect();
                self.accumulate(grads, *x, Tensor::matrix(r, c, data)?);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let inv = T::one() / T::lit(r as f64);
                let data = (0..r * c).map(|i| g.data()[i % c] * inv).collect();
                self.accumulate(grads, *x, Tensor::matrix(r, c, data)?);
            }
            Op::MeanCols(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let inv = T::one() / T::lit(c as f64);
                let data = (0..r * c).map(|i| g.data()[i / c] * inv).collect();
                self.accumulate(grads, *x, Tensor::matrix(r, c, data)?);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice_rows(start, start + rows)?);
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice_cols(start, start + cols)?);
                    }
                    start += cols;
                }
            }
            Op::SliceRows(x, start) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.shape());
                    let c = xv.cols();
                    let off = start * c;
                    gx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SliceCols(x, start) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    let w = g.cols();
                    let mut gx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        gx.data_mut()[i * c + start..i * c + start + w]
                            .copy_from_slice(g.row_slice(i));
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Select(x, index) => {
                let mut gx = Tensor::zeros(self.shape(*x));
                gx.data_mut()[*index] = g.item();
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(g.row_slice(i)) {
            *o = *o + v;
        }
    }
    Tensor::row(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::ones(&[2, 3]));
        let x = tape.constant(Tensor::ones(&[3, 1]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
        assert_eq!(grads.trainable().count(), 1);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(w, w).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
    }
}
