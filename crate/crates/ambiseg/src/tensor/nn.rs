//! Layer kernels for the denoiser: convolution, group normalization, SiLU,
//! linear maps, nearest-neighbor upsampling and channel concatenation.
//!
//! Convolutions run through im2col plus a row-parallel GEMM. Each output row
//! is reduced in a fixed order, so results do not depend on the worker count.

use rayon::prelude::*;

use super::{elem, Element, Tensor};
use crate::error::{Error, Result};

const GROUP_NORM_EPS: f64 = 1e-5;

/// Minimum multiply count before a GEMM fans out to the thread pool.
const PAR_GEMM_THRESHOLD: usize = 65_536;

/// out[m,n] += a[m,k] . b[k,n], all row-major.
fn gemm_acc<T: Element>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let body = |(row, out_row): (usize, &mut [T])| {
        for p in 0..k {
            let w = a[row * k + p];
            if w == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, v) in out_row.iter_mut().zip(b_row) {
                *o = *o + w * *v;
            }
        }
    };
    if m * k * n >= PAR_GEMM_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

/// out[m,n] += a[m,p] . b[n,p]^T (dot products of rows), all row-major.
fn gemm_abt_acc<T: Element>(out: &mut [T], a: &[T], b: &[T], m: usize, n: usize, p: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    let body = |(row, out_row): (usize, &mut [T])| {
        let a_row = &a[row * p..(row + 1) * p];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * p..(j + 1) * p];
            let dot: T = a_row.iter().zip(b_row).map(|(x, y)| *x * *y).sum();
            *o = *o + dot;
        }
    };
    if m * n * p >= PAR_GEMM_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

struct ConvDims {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kernel: usize,
    pad: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn conv_dims<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<ConvDims> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 4 || kshape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects 4-d input and kernel, got {ishape:?} and {kshape:?}"
        )));
    }
    if ishape[1] != kshape[1] {
        return Err(Error::Shape(format!(
            "conv2d: input has {} channels, kernel expects {}",
            ishape[1], kshape[1]
        )));
    }
    if kshape[2] != kshape[3] || kshape[2] % 2 == 0 {
        return Err(Error::Shape(format!(
            "conv2d: kernel must be square with odd size, got {}x{}",
            kshape[2], kshape[3]
        )));
    }
    if bias.shape() != [kshape[0]] {
        return Err(Error::Shape(format!(
            "conv2d: bias shape {:?} does not match {} output channels",
            bias.shape(),
            kshape[0]
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!(
            "conv2d: stride must be 1 or 2, got {stride}"
        )));
    }
    let kernel_size = kshape[2];
    let pad = kernel_size / 2;
    let (h, w) = (ishape[2], ishape[3]);
    let out_h = (h + 2 * pad - kernel_size) / stride + 1;
    let out_w = (w + 2 * pad - kernel_size) / stride + 1;
    Ok(ConvDims {
        batch: ishape[0],
        in_ch: ishape[1],
        h,
        w,
        out_ch: kshape[0],
        kernel: kernel_size,
        pad,
        stride,
        out_h,
        out_w,
    })
}

/// Patch matrix for one sample: rows are (channel, dy, dx), columns are
/// output positions. Out-of-bounds taps read zero padding.
fn im2col<T: Element>(sample: &[T], d: &ConvDims, cols: &mut [T]) {
    debug_assert_eq!(cols.len(), d.patch() * d.out_hw());
    let mut row = 0;
    for c in 0..d.in_ch {
        let plane = &sample[c * d.h * d.w..(c + 1) * d.h * d.w];
        for dy in 0..d.kernel {
            for dx in 0..d.kernel {
                let dst = &mut cols[row * d.out_hw()..(row + 1) * d.out_hw()];
                let mut idx = 0;
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + dy) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        dst[idx..idx + d.out_w].fill(T::zero());
                        idx += d.out_w;
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.out_w {
                        let ix = (ox * d.stride + dx) as isize - d.pad as isize;
                        dst[idx] = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter patch-space gradients back onto the image.
fn col2im_acc<T: Element>(cols: &[T], d: &ConvDims, sample: &mut [T]) {
    let mut row = 0;
    for c in 0..d.in_ch {
        let plane = &mut sample[c * d.h * d.w..(c + 1) * d.h * d.w];
        for dy in 0..d.kernel {
            for dx in 0..d.kernel {
                let src = &cols[row * d.out_hw()..(row + 1) * d.out_hw()];
                let mut idx = 0;
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + dy) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        idx += d.out_w;
                        continue;
                    }
                    let base = iy as usize * d.w;
                    for ox in 0..d.out_w {
                        let ix = (ox * d.stride + dx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            let p = base + ix as usize;
                            plane[p] = plane[p] + src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2-d cross-correlation with same-padding and stride 1 or 2.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernel, bias, stride)?;
    let sample_in = d.in_ch * d.h * d.w;
    let sample_out = d.out_ch * d.out_hw();
    let mut out = vec![T::zero(); d.batch * sample_out];
    let mut cols = vec![T::zero(); d.patch() * d.out_hw()];
    for n in 0..d.batch {
        im2col(&input.data()[n * sample_in..(n + 1) * sample_in], &d, &mut cols);
        let out_n = &mut out[n * sample_out..(n + 1) * sample_out];
        gemm_acc(out_n, kernel.data(), &cols, d.out_ch, d.patch(), d.out_hw());
        for (o, chunk) in out_n.chunks_mut(d.out_hw()).enumerate() {
            let b = bias.data()[o];
            for v in chunk.iter_mut() {
                *v = *v + b;
            }
        }
    }

    let shape = vec![d.batch, d.out_ch, d.out_h, d.out_w];
    let (input_c, kernel_c) = (input.clone(), kernel.clone());
    let (need_in, need_k, need_b) = (input.tracks_grad(), kernel.tracks_grad(), bias.tracks_grad());
    Ok(Tensor::from_op(
        shape,
        out,
        vec![input.clone(), kernel.clone(), bias.clone()],
        move |g| {
            let mut grad_in = if need_in {
                vec![T::zero(); input_c.numel()]
            } else {
                Vec::new()
            };
            let mut grad_k = if need_k {
                vec![T::zero(); kernel_c.numel()]
            } else {
                Vec::new()
            };
            let mut grad_b = if need_b {
                vec![T::zero(); d.out_ch]
            } else {
                Vec::new()
            };
            let mut cols = vec![T::zero(); d.patch() * d.out_hw()];
            let mut gcols = vec![T::zero(); d.patch() * d.out_hw()];
            for n in 0..d.batch {
                let g_n = &g[n * sample_out..(n + 1) * sample_out];
                if need_b {
                    for (o, chunk) in g_n.chunks(d.out_hw()).enumerate() {
                        let s: T = chunk.iter().copied().sum();
                        grad_b[o] = grad_b[o] + s;
                    }
                }
                if need_k {
                    im2col(
                        &input_c.data()[n * sample_in..(n + 1) * sample_in],
                        &d,
                        &mut cols,
                    );
                    gemm_abt_acc(&mut grad_k, g_n, &cols, d.out_ch, d.patch(), d.out_hw());
                }
                if need_in {
                    gcols.fill(T::zero());
                    // grad cols = kernel^T . g, built row by row to keep
                    // the reduction order fixed.
                    for o in 0..d.out_ch {
                        let g_row = &g_n[o * d.out_hw()..(o + 1) * d.out_hw()];
                        for r in 0..d.patch() {
                            let w = kernel_c.data()[o * d.patch() + r];
                            if w == T::zero() {
                                continue;
                            }
                            let dst = &mut gcols[r * d.out_hw()..(r + 1) * d.out_hw()];
                            for (dv, gv) in dst.iter_mut().zip(g_row) {
                                *dv = *dv + w * *gv;
                            }
                        }
                    }
                    col2im_acc(
                        &gcols,
                        &d,
                        &mut grad_in[n * sample_in..(n + 1) * sample_in],
                    );
                }
            }
            vec![grad_in, grad_k, grad_b]
        },
    ))
}

/// Group normalization over `[N,C,H,W]` with per-channel affine parameters.
pub fn group_norm<T: Element>(
    input: &Tensor<T>,
    groups: usize,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ishape = input.shape();
    if ishape.len() != 4 {
        return Err(Error::Shape(format!(
            "group_norm expects 4-d input, got {ishape:?}"
        )));
    }
    let (batch, channels, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {channels} channels not divisible by {groups} groups"
        )));
    }
    if scale.shape() != [channels] || shift.shape() != [channels] {
        return Err(Error::Shape(format!(
            "group_norm: affine parameters must have shape [{channels}]"
        )));
    }
    let group_ch = channels / groups;
    let group_len = group_ch * h * w;
    let hw = h * w;
    let eps = elem::<T>(GROUP_NORM_EPS);

    let mut out = vec![T::zero(); input.numel()];
    let mut inv_std = vec![T::zero(); batch * groups];
    let mut means = vec![T::zero(); batch * groups];
    for n in 0..batch {
        for gi in 0..groups {
            let start = n * channels * hw + gi * group_len;
            let slice = &input.data()[start..start + group_len];
            let inv_len = T::one() / elem::<T>(group_len as f64);
            let mean: T = slice.iter().copied().sum::<T>() * inv_len;
            let var: T = slice
                .iter()
                .map(|x| (*x - mean) * (*x - mean))
                .sum::<T>()
                * inv_len;
            let istd = T::one() / (var + eps).sqrt();
            means[n * groups + gi] = mean;
            inv_std[n * groups + gi] = istd;
            for (k, x) in slice.iter().enumerate() {
                let c = gi * group_ch + k / hw;
                out[start + k] = (*x - mean) * istd * scale.data()[c] + shift.data()[c];
            }
        }
    }

    let (input_c, scale_c) = (input.clone(), scale.clone());
    let (need_in, need_scale, need_shift) =
        (input.tracks_grad(), scale.tracks_grad(), shift.tracks_grad());
    Ok(Tensor::from_op(
        ishape.to_vec(),
        out,
        vec![input.clone(), scale.clone(), shift.clone()],
        move |g| {
            let mut grad_in = if need_in {
                vec![T::zero(); input_c.numel()]
            } else {
                Vec::new()
            };
            let mut grad_scale = if need_scale {
                vec![T::zero(); channels]
            } else {
                Vec::new()
            };
            let mut grad_shift = if need_shift {
                vec![T::zero(); channels]
            } else {
                Vec::new()
            };
            let inv_len = T::one() / elem::<T>(group_len as f64);
            let mut xhat = vec![T::zero(); group_len];
            let mut dxhat = vec![T::zero(); group_len];
            for n in 0..batch {
                for gi in 0..groups {
                    let start = n * channels * hw + gi * group_len;
                    let x = &input_c.data()[start..start + group_len];
                    let gg = &g[start..start + group_len];
                    let mean = means[n * groups + gi];
                    let istd = inv_std[n * groups + gi];
                    for k in 0..group_len {
                        xhat[k] = (x[k] - mean) * istd;
                    }
                    if need_scale || need_shift {
                        for k in 0..group_len {
                            let c = gi * group_ch + k / hw;
                            if need_scale {
                                grad_scale[c] = grad_scale[c] + gg[k] * xhat[k];
                            }
                            if need_shift {
                                grad_shift[c] = grad_shift[c] + gg[k];
                            }
                        }
                    }
                    if need_in {
                        for k in 0..group_len {
                            let c = gi * group_ch + k / hw;
                            dxhat[k] = gg[k] * scale_c.data()[c];
                        }
                        let sum1: T = dxhat.iter().copied().sum();
                        let sum2: T = dxhat.iter().zip(&xhat).map(|(a, b)| *a * *b).sum();
                        for k in 0..group_len {
                            grad_in[start + k] =
                                istd * (dxhat[k] - (sum1 + xhat[k] * sum2) * inv_len);
                        }
                    }
                }
            }
            vec![grad_in, grad_scale, grad_shift]
        },
    ))
}

/// SiLU activation `x * sigmoid(x)`.
pub fn silu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    fn sigmoid<T: Element>(x: T) -> T {
        T::one() / (T::one() + (-x).exp())
    }
    let data = input.data().iter().map(|x| *x * sigmoid(*x)).collect();
    let src = input.clone();
    let tracked = input.tracks_grad();
    Tensor::from_op(
        input.shape().to_vec(),
        data,
        vec![input.clone()],
        move |g| {
            vec![if tracked {
                g.iter()
                    .zip(src.data())
                    .map(|(g, x)| {
                        let s = sigmoid(*x);
                        *g * s * (T::one() + *x * (T::one() - s))
                    })
                    .collect()
            } else {
                Vec::new()
            }]
        },
    )
}

/// Affine map on the trailing axis: `[.., I] -> [.., O]` with weight `[O, I]`.
pub fn linear<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if wshape.len() != 2 {
        return Err(Error::Shape(format!(
            "linear: weight must be 2-d, got {wshape:?}"
        )));
    }
    let (out_dim, in_dim) = (wshape[0], wshape[1]);
    if ishape.is_empty() || *ishape.last().unwrap() != in_dim {
        return Err(Error::Shape(format!(
            "linear: input shape {ishape:?} incompatible with weight {wshape:?}"
        )));
    }
    if bias.shape() != [out_dim] {
        return Err(Error::Shape(format!(
            "linear: bias shape {:?} does not match {out_dim} outputs",
            bias.shape()
        )));
    }
    let rows = input.numel() / in_dim;
    let mut out = vec![T::zero(); rows * out_dim];
    gemm_abt_acc(&mut out, input.data(), weight.data(), rows, out_dim, in_dim);
    for chunk in out.chunks_mut(out_dim) {
        for (v, b) in chunk.iter_mut().zip(bias.data()) {
            *v = *v + *b;
        }
    }
    let mut oshape = ishape.to_vec();
    *oshape.last_mut().unwrap() = out_dim;

    let (input_c, weight_c) = (input.clone(), weight.clone());
    let (need_in, need_w, need_b) = (input.tracks_grad(), weight.tracks_grad(), bias.tracks_grad());
    Ok(Tensor::from_op(
        oshape,
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        move |g| {
            let mut grad_in = if need_in {
                vec![T::zero(); input_c.numel()]
            } else {
                Vec::new()
            };
            let mut grad_w = if need_w {
                vec![T::zero(); weight_c.numel()]
            } else {
                Vec::new()
            };
            let mut grad_b = if need_b {
                vec![T::zero(); out_dim]
            } else {
                Vec::new()
            };
            if need_in {
                // dIn[r,i] = sum_o g[r,o] w[o,i]
                gemm_acc(&mut grad_in, g, weight_c.data(), rows, out_dim, in_dim);
            }
            if need_w {
                // dW[o,i] = sum_r g[r,o] in[r,i], accumulated row-serially.
                for r in 0..rows {
                    let in_row = &input_c.data()[r * in_dim..(r + 1) * in_dim];
                    for o in 0..out_dim {
                        let gv = g[r * out_dim + o];
                        if gv == T::zero() {
                            continue;
                        }
                        let dst = &mut grad_w[o * in_dim..(o + 1) * in_dim];
                        for (dw, x) in dst.iter_mut().zip(in_row) {
                            *dw = *dw + gv * *x;
                        }
                    }
                }
            }
            if need_b {
                for chunk in g.chunks(out_dim) {
                    for (db, gv) in grad_b.iter_mut().zip(chunk) {
                        *db = *db + *gv;
                    }
                }
            }
            vec![grad_in, grad_w, grad_b]
        },
    ))
}

/// Nearest-neighbor 2x spatial upsampling of `[N,C,H,W]`.
pub fn upsample_nearest_2x<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let ishape = input.shape();
    if ishape.len() != 4 {
        return Err(Error::Shape(format!(
            "upsample expects 4-d input, got {ishape:?}"
        )));
    }
    let (batch, channels, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); batch * channels * oh * ow];
    for nc in 0..batch * channels {
        let src = &input.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    let tracked = input.tracks_grad();
    let in_numel = input.numel();
    Ok(Tensor::from_op(
        vec![batch, channels, oh, ow],
        out,
        vec![input.clone()],
        move |g| {
            vec![if tracked {
                let mut grad = vec![T::zero(); in_numel];
                for nc in 0..batch * channels {
                    let gs = &g[nc * oh * ow..(nc + 1) * oh * ow];
                    let gd = &mut grad[nc * h * w..(nc + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            let p = (y / 2) * w + x / 2;
                            gd[p] = gd[p] + gs[y * ow + x];
                        }
                    }
                }
                grad
            } else {
                Vec::new()
            }]
        },
    ))
}

/// Concatenate two `[N,C,H,W]` tensors along the channel axis.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::Shape(format!(
            "concat_channels: incompatible shapes {sa:?} and {sb:?}"
        )));
    }
    let (batch, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let mut out = Vec::with_capacity((ca + cb) * batch * hw);
    for n in 0..batch {
        out.extend_from_slice(&a.data()[n * ca * hw..(n + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[n * cb * hw..(n + 1) * cb * hw]);
    }
    let (need_a, need_b) = (a.tracks_grad(), b.tracks_grad());
    Ok(Tensor::from_op(
        vec![batch, ca + cb, sa[2], sa[3]],
        out,
        vec![a.clone(), b.clone()],
        move |g| {
            let mut ga = if need_a {
                Vec::with_capacity(batch * ca * hw)
            } else {
                Vec::new()
            };
            let mut gb = if need_b {
                Vec::with_capacity(batch * cb * hw)
            } else {
                Vec::new()
            };
            for n in 0..batch {
                let base = n * (ca + cb) * hw;
                if need_a {
                    ga.extend_from_slice(&g[base..base + ca * hw]);
                }
                if need_b {
                    gb.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
            }
            vec![ga, gb]
        },
    ))
}

/// Add a per-sample, per-channel bias `[N,C]` to a `[N,C,H,W]` activation.
pub fn add_channel_bias<T: Element>(input: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let ishape = input.shape();
    if ishape.len() != 4 {
        return Err(Error::Shape(format!(
            "add_channel_bias expects 4-d input, got {ishape:?}"
        )));
    }
    let (batch, channels, hw) = (ishape[0], ishape[1], ishape[2] * ishape[3]);
    if bias.shape() != [batch, channels] {
        return Err(Error::Shape(format!(
            "add_channel_bias: bias shape {:?}, expected [{batch}, {channels}]",
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(input.numel());
    for (nc, chunk) in input.data().chunks(hw).enumerate() {
        let b = bias.data()[nc];
        out.extend(chunk.iter().map(|v| *v + b));
    }
    let (need_in, need_b) = (input.tracks_grad(), bias.tracks_grad());
    Ok(Tensor::from_op(
        ishape.to_vec(),
        out,
        vec![input.clone(), bias.clone()],
        move |g| {
            vec![
                if need_in { g.to_vec() } else { Vec::new() },
                if need_b {
                    g.chunks(hw).map(|c| c.iter().copied().sum()).collect()
                } else {
                    Vec::new()
                },
            ]
        },
    ))
}
