//! Forward and backward kernels for the graph operations.
//!
//! These are plain functions over [`Tensor`]s; [`crate::autodiff::Graph`]
//! records which ones ran and replays the backward halves.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Stride, dilation and zero-padding of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvParams {
            stride,
            dilation,
            padding,
        }
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams::new(1, 1, 0)
    }
}

fn out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Option<usize> {
    let span = (kernel - 1) * dilation + 1;
    let padded = input + 2 * padding;
    if span > padded {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

/// Output shape of `conv2d`, validating channel counts and kernel extents.
pub fn conv2d_shape(input: Shape, weight: Shape, bias: Shape, p: ConvParams) -> Result<Shape> {
    if p.stride == 0 || p.dilation == 0 {
        return Err(Error::config(format!(
            "conv2d stride and dilation must be positive (stride {}, dilation {})",
            p.stride, p.dilation
        )));
    }
    if input.c != weight.c {
        return Err(Error::config(format!(
            "conv2d input has {} channels but weight {weight} expects C_in = {}",
            input.c, weight.c
        )));
    }
    if bias.numel() != weight.n {
        return Err(Error::config(format!(
            "conv2d bias {bias} does not match C_out = {}",
            weight.n
        )));
    }
    let oh = out_extent(input.h, weight.h, p.stride, p.dilation, p.padding);
    let ow = out_extent(input.w, weight.w, p.stride, p.dilation, p.padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Shape::new(input.n, weight.n, oh, ow),
        _ => Err(Error::config(format!(
            "conv2d kernel {}x{} with dilation {} exceeds padded input {}x{} (padding {})",
            weight.h,
            weight.w,
            p.dilation,
            input.h + 2 * p.padding,
            input.w + 2 * p.padding,
            p.padding
        ))),
    }
}

/// Unfolds batch item `n` of `input` into a `(C·kH·kW) × (oH·oW)` matrix.
fn im2col<T: Element>(
    input: &Tensor<T>,
    n: usize,
    kh: usize,
    kw: usize,
    out: Shape,
    p: ConvParams,
    cols: &mut [T],
) {
    let s = input.shape();
    let ohw = out.h * out.w;
    let block = input.item_block(n);
    for c in 0..s.c {
        let plane = &block[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..out.h {
                    let iy = (oy * p.stride + ki * p.dilation) as isize - p.padding as isize;
                    let line = &mut dst[oy * out.w..(oy + 1) * out.w];
                    if iy < 0 || iy >= s.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * p.stride + kj * p.dilation) as isize - p.padding as isize;
                        *v = if ix < 0 || ix >= s.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into item `n` of `grad`.
fn col2im<T: Element>(
    cols: &[T],
    n: usize,
    kh: usize,
    kw: usize,
    out: Shape,
    p: ConvParams,
    grad: &mut Tensor<T>,
) {
    let s = grad.shape();
    let ohw = out.h * out.w;
    let len = s.c * s.h * s.w;
    let block = &mut grad.data_mut()[n * len..(n + 1) * len];
    for c in 0..s.c {
        let plane = &mut block[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..out.h {
                    let iy = (oy * p.stride + ki * p.dilation) as isize - p.padding as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..out.w {
                        let ix = (ox * p.stride + kj * p.dilation) as isize - p.padding as isize;
                        if ix >= 0 && ix < s.w as isize {
                            line[ix as usize] += src[oy * out.w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let out_shape = conv2d_shape(input.shape(), ws, bias.shape(), p)?;
    let ckk = ws.c * ws.h * ws.w;
    let ohw = out_shape.h * out_shape.w;
    let mut out = Tensor::zeros(out_shape);
    let mut cols = vec![T::zero(); ckk * ohw];
    let item_len = out_shape.c * ohw;
    for n in 0..out_shape.n {
        im2col(input, n, ws.h, ws.w, out_shape, p, &mut cols);
        let dst = &mut out.data_mut()[n * item_len..(n + 1) * item_len];
        T::gemm(
            ws.n,
            ckk,
            ohw,
            weight.data(),
            (ckk as isize, 1),
            &cols,
            (ohw as isize, 1),
            T::zero(),
            dst,
        );
        for (co, chunk) in dst.chunks_exact_mut(ohw).enumerate() {
            let b = bias.data()[co];
            for v in chunk {
                *v += b;
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to input, weight and bias.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    p: ConvParams,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ws = weight.shape();
    let out_shape = grad_out.shape();
    let ckk = ws.c * ws.h * ws.w;
    let ohw = out_shape.h * out_shape.w;
    let item_len = out_shape.c * ohw;

    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(ws);
    let mut grad_b = Tensor::zeros(Shape {
        n: ws.n,
        c: 1,
        h: 1,
        w: 1,
    });
    let mut cols = vec![T::zero(); ckk * ohw];
    let mut dcols = vec![T::zero(); ckk * ohw];

    for n in 0..out_shape.n {
        let g = &grad_out.data()[n * item_len..(n + 1) * item_len];
        im2col(input, n, ws.h, ws.w, out_shape, p, &mut cols);
        // dW += dY · colsᵀ
        T::gemm(
            ws.n,
            ohw,
            ckk,
            g,
            (ohw as isize, 1),
            &cols,
            (1, ohw as isize),
            T::one(),
            grad_w.data_mut(),
        );
        // dcols = Wᵀ · dY
        T::gemm(
            ckk,
            ws.n,
            ohw,
            weight.data(),
            (1, ckk as isize),
            g,
            (ohw as isize, 1),
            T::zero(),
            &mut dcols,
        );
        col2im(&dcols, n, ws.h, ws.w, out_shape, p, &mut grad_in);
        for (co, chunk) in g.chunks_exact(ohw).enumerate() {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            grad_b.data_mut()[co] += acc;
        }
    }
    (grad_in, grad_w, grad_b)
}

pub fn relu_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Output shape of `maxpool2d`; every window must overlap the input.
pub fn maxpool2d_shape(
    input: Shape,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Shape> {
    if kernel == 0 || stride == 0 {
        return Err(Error::config(format!(
            "maxpool2d kernel and stride must be positive (kernel {kernel}, stride {stride})"
        )));
    }
    if padding >= kernel {
        return Err(Error::config(format!(
            "maxpool2d padding {padding} >= kernel {kernel}: border windows would lie entirely outside the input"
        )));
    }
    let oh = out_extent(input.h, kernel, stride, 1, padding);
    let ow = out_extent(input.w, kernel, stride, 1, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Shape::new(input.n, input.c, oh, ow),
        _ => Err(Error::config(format!(
            "maxpool2d kernel {kernel} exceeds padded input {}x{}",
            input.h + 2 * padding,
            input.w + 2 * padding
        ))),
    }
}

/// Sliding-window max with −∞ padding.
///
/// Returns the pooled tensor and, per output element, the flat input index
/// that won. Ties go to the lowest linear index.
pub fn maxpool2d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    let out_shape = maxpool2d_shape(s, kernel, stride, padding)?;
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; out_shape.numel()];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.offset(n, c, 0, 0);
            let plane = input.plane(n, c);
            for oy in 0..out_shape.h {
                let y0 = (oy * stride) as isize - padding as isize;
                let ys = y0.max(0) as usize;
                let ye = ((y0 + kernel as isize) as usize).min(s.h);
                for ox in 0..out_shape.w {
                    let x0 = (ox * stride) as isize - padding as isize;
                    let xs = x0.max(0) as usize;
                    let xe = ((x0 + kernel as isize) as usize).min(s.w);
                    let mut best = ys * s.w + xs;
                    let mut best_v = plane[best];
                    for y in ys..ye {
                        for x in xs..xe {
                            let v = plane[y * s.w + x];
                            if v > best_v {
                                best_v = v;
                                best = y * s.w + x;
                            }
                        }
                    }
                    out.data_mut()[o] = best_v;
                    argmax[o] = base + best;
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<T: Element>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    grad
}

pub fn upsample_nearest_forward<T: Element>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::config("upsample factor must be positive"));
    }
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * factor, s.w * factor)?;
    let mut out = Tensor::zeros(out_shape);
    let ow = out_shape.w;
    let dst = out.data_mut();
    for nc in 0..s.n * s.c {
        let src = &input.data()[nc * s.h * s.w..(nc + 1) * s.h * s.w];
        let plane = &mut dst[nc * out_shape.h * ow..(nc + 1) * out_shape.h * ow];
        for y in 0..out_shape.h {
            let row = &src[(y / factor) * s.w..(y / factor + 1) * s.w];
            for (x, v) in plane[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = row[x / factor];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest_backward<T: Element>(
    input_shape: Shape,
    factor: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let gs = grad_out.shape();
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for nc in 0..gs.n * gs.c {
        let src = &grad_out.data()[nc * gs.h * gs.w..(nc + 1) * gs.h * gs.w];
        let plane =
            &mut g[nc * input_shape.h * input_shape.w..(nc + 1) * input_shape.h * input_shape.w];
        for y in 0..gs.h {
            for x in 0..gs.w {
                plane[(y / factor) * input_shape.w + x / factor] += src[y * gs.w + x];
            }
        }
    }
    grad
}

/// Elementwise sum, accumulated left to right.
pub fn sum_forward<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::config("elementwise_sum needs at least one input"))?;
    let shape = first.shape();
    let mut out = (*first).clone();
    for (i, t) in inputs.iter().enumerate().skip(1) {
        if t.shape() != shape {
            return Err(Error::config(format!(
                "elementwise_sum input {i} has shape {} but input 0 has {shape}",
                t.shape()
            )));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(
            Shape::new(shape.0, shape.1, shape.2, shape.3).unwrap(),
            data.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn conv_channel_mismatch_names_dimensions() {
        let x = t((1, 2, 3, 3), &[0.0; 18]);
        let w = t((1, 3, 1, 1), &[0.0; 3]);
        let b = t((1, 1, 1, 1), &[0.0]);
        let err = conv2d_forward(&x, &w, &b, ConvParams::default()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("2 channels") && msg.contains("C_in = 3"),
            "{msg}"
        );
    }

    #[test]
    fn conv_kernel_larger_than_padded_input() {
        let x = t((1, 1, 3, 3), &[0.0; 9]);
        let w = t((1, 1, 3, 3), &[0.0; 9]);
        let b = t((1, 1, 1, 1), &[0.0]);
        assert!(conv2d_forward(&x, &w, &b, ConvParams::new(1, 2, 0)).is_err());
        assert!(conv2d_forward(&x, &w, &b, ConvParams::new(1, 2, 1)).is_ok());
    }

    #[test]
    fn conv_output_size_formula() {
        let s = conv2d_shape(
            Shape::new(1, 1, 24, 24).unwrap(),
            Shape::new(4, 1, 3, 3).unwrap(),
            Shape::new(4, 1, 1, 1).unwrap(),
            ConvParams::new(2, 1, 1),
        )
        .unwrap();
        assert_eq!((s.h, s.w), (12, 12));
    }

    #[test]
    fn maxpool_window_outside_input_rejected() {
        let s = Shape::new(1, 1, 4, 4).unwrap();
        assert!(maxpool2d_shape(s, 2, 1, 2).is_err());
        assert!(maxpool2d_shape(s, 3, 1, 1).is_ok());
    }

    #[test]
    fn maxpool_tie_goes_to_lowest_index() {
        let x = t((1, 1, 2, 2), &[5.0, 5.0, 5.0, 5.0]);
        let (_, arg) = maxpool2d_forward(&x, 2, 2, 0).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn sum_rejects_mismatched_shapes() {
        let a = t((1, 1, 2, 2), &[0.0; 4]);
        let b = t((1, 1, 1, 4), &[0.0; 4]);
        assert!(sum_forward(&[&a, &b]).is_err());
        assert!(sum_forward::<f64>(&[]).is_err());
    }
}
