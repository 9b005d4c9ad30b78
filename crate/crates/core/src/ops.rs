//! Differentiable primitives with explicit forward and backward passes.
//!
//! Convolutions are 3x3 cross-correlations (no kernel flip) with stride 1
//! and zero padding 1, so spatial size is preserved. Work is split across
//! batch samples with rayon; per-sample weight gradients are summed in
//! sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Weights `(c_out, c_in, 3, 3)` and one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayerParams<T> {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        ConvLayerParams {
            weights: Tensor::zeros(Shape::new(c_out, c_in, KERNEL, KERNEL)),
            bias: vec![T::zero(); c_out],
        }
    }

    pub fn new(weights: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let s = weights.shape();
        if s.h != KERNEL || s.w != KERNEL {
            return Err(Error::shape("conv params", "3x3 kernel", format!("{}x{}", s.h, s.w)));
        }
        if bias.len() != s.n {
            return Err(Error::shape("conv params", format!("{} biases", s.n), bias.len()));
        }
        Ok(ConvLayerParams { weights, bias })
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().c
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayerParams<U> {
        ConvLayerParams {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|b| U::from_f64_lossy(b.to_f64_lossy())).collect(),
        }
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Unrolls one `(c, h, w)` sample into a `(c*9, h*w)` patch matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let plane = h * w;
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * TAPS + ky * KERNEL + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let ix = x as isize + kx as isize - 1;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { line[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let plane = h * w;
    x.fill(T::zero());
    for ci in 0..c {
        let dst = &mut x[ci * plane..(ci + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * TAPS + ky * KERNEL + kx) * plane;
                let src = &cols[row..row + plane];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for x in 0..w {
                        let ix = x as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] = line[ix as usize] + src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_input<T: Scalar>(op: &'static str, input: &Tensor<T>, params: &ConvLayerParams<T>) -> Result<()> {
    let s = input.shape();
    if s.c != params.c_in() {
        return Err(Error::shape(op, format!("{} input channels", params.c_in()), s));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape(op, "spatial dims >= 1", s));
    }
    Ok(())
}

pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvLayerParams<T>) -> Result<Tensor<T>> {
    check_conv_input("conv2d_forward", input, params)?;
    let s = input.shape();
    let (c_in, c_out, plane) = (s.c, params.c_out(), s.plane());
    let k = c_in * TAPS;
    let out_shape = Shape::new(s.n, c_out, s.h, s.w);
    let mut out = Tensor::zeros(out_shape);
    let w = params.weights.data();

    out.data_mut().par_chunks_mut(c_out * plane).enumerate().for_each_init(
        || vec![T::zero(); k * plane],
        |cols, (n, dst)| {
            im2col(input.sample(n), c_in, s.h, s.w, cols);
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(params.bias[o]);
            }
            T::gemm(
                c_out,
                k,
                plane,
                T::one(),
                w,
                (k as isize, 1),
                cols,
                (plane as isize, 1),
                T::one(),
                dst,
                (plane as isize, 1),
            );
        },
    );
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(input: &Tensor<T>, params: &ConvLayerParams<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    check_conv_input("conv2d_backward", input, params)?;
    let s = input.shape();
    let (c_in, c_out, plane) = (s.c, params.c_out(), s.plane());
    let expected = Shape::new(s.n, c_out, s.h, s.w);
    if grad_out.shape() != expected {
        return Err(Error::shape("conv2d_backward", expected, grad_out.shape()));
    }
    let k = c_in * TAPS;
    let w = params.weights.data();

    // (grad_input sample, grad_weights, grad_bias) per sample
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let g = grad_out.sample(n);
            let mut cols = vec![T::zero(); k * plane];
            im2col(input.sample(n), c_in, s.h, s.w, &mut cols);

            let mut gw = vec![T::zero(); c_out * k];
            // gw = g (c_out x plane) * cols^T (plane x k)
            T::gemm(
                c_out,
                plane,
                k,
                T::one(),
                g,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                T::zero(),
                &mut gw,
                (k as isize, 1),
            );
            let gb: Vec<T> = g.chunks(plane).map(|c| c.iter().copied().sum()).collect();

            // grad cols = w^T (k x c_out) * g (c_out x plane)
            T::gemm(
                k,
                c_out,
                plane,
                T::one(),
                w,
                (1, k as isize),
                g,
                (plane as isize, 1),
                T::zero(),
                &mut cols,
                (plane as isize, 1),
            );
            let mut gi = vec![T::zero(); c_in * plane];
            col2im(&cols, c_in, s.h, s.w, &mut gi);
            (gi, gw, gb)
        })
        .collect();

    let mut grad_input = Vec::with_capacity(s.len());
    let mut grad_w = vec![T::zero(); c_out * k];
    let mut grad_b = vec![T::zero(); c_out];
    for (gi, gw, gb) in per_sample {
        grad_input.extend_from_slice(&gi);
        for (acc, v) in grad_w.iter_mut().zip(gw) {
            *acc = *acc + v;
        }
        for (acc, v) in grad_b.iter_mut().zip(gb) {
            *acc = *acc + v;
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(s, grad_input)?,
        weights: Tensor::from_vec(params.weights.shape(), grad_w)?,
        bias: grad_b,
    })
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the input is strictly positive; the
/// subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape("relu_backward", input.shape(), grad_out.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add_forward", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Both summands receive the incoming gradient unchanged.
pub fn add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// Mean over the batch of per-sample squared-error sums, and its gradient
/// `2 (pred - target) / n`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", target.shape(), pred.shape()));
    }
    let n = pred.shape().n;
    if n == 0 {
        return Ok((T::zero(), Tensor::zeros(pred.shape())));
    }
    let batch = T::from_usize(n).expect("batch size fits the float type");
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    let two = T::one() + T::one();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        loss = loss + d * d;
        grad.push(two * d / batch);
    }
    Ok((loss / batch, Tensor::from_vec(pred.shape(), grad)?))
}
