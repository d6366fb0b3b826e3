//! Float reference kernels. Deliberately naive; loop order is part of the
//! contract because it fixes the float summation order.

use crate::error::{Error, Result};
use crate::graph::{same_out, same_pad_before, ConvAttrs, ConvMode, ResizeScale};
use crate::tensor::{Dims, Tensor};

/// Direct convolution with same padding.
///
/// `kernels` is laid out `[out][ky][kx][in]` (depthwise: `[c][ky][kx][1]`).
/// Loop nest: output channel, output pixel, input channel, kernel tap; the
/// bias is added after the reduction.
pub fn conv2d_naive(input: &Tensor, kernels: &[f32], bias: Option<&[f32]>, attrs: &ConvAttrs) -> Result<Tensor> {
    let (dims, acc) = conv2d_f64(input, kernels, bias, attrs)?;
    Tensor::new(dims, acc.into_iter().map(|v| v as f32).collect())
}

/// Same as [`conv2d_naive`] but returns the f64 sums before the final cast.
/// Products of dequantized fixed-point values are exact here, which makes
/// this the reference for the integer datapath.
pub fn conv2d_f64(
    input: &Tensor,
    kernels: &[f32],
    bias: Option<&[f32]>,
    attrs: &ConvAttrs,
) -> Result<(Dims, Vec<f64>)> {
    let d = input.dims();
    let k = attrs.kernel;
    let (stride, dil) = (attrs.stride, attrs.dilation);
    let c_out = attrs.out_channels;
    let expect = attrs.weight_count(d.channels);
    if kernels.len() != expect {
        return Err(Error::InvalidOperand(format!("expected {expect} kernel weights, got {}", kernels.len())));
    }
    if attrs.mode == ConvMode::Depthwise && c_out != d.channels {
        return Err(Error::InvalidOperand("depthwise conv needs out_channels = in_channels".into()));
    }
    if attrs.mode == ConvMode::Pointwise && (k != 1 || dil != 1) {
        return Err(Error::InvalidOperand("pointwise conv needs K = 1, D = 1".into()));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::InvalidOperand(format!("expected {c_out} bias values, got {}", b.len())));
        }
    }
    let extent = attrs.effective_kernel();
    let out_dims = Dims::new(same_out(d.height, stride), same_out(d.width, stride), c_out);
    let pad_y = same_pad_before(d.height, stride, extent) as isize;
    let pad_x = same_pad_before(d.width, stride, extent) as isize;
    let src = input.data();
    let mut out = vec![0.0f64; out_dims.len()];
    let tap = |y: usize, x: usize, ky: usize, kx: usize| -> Option<(usize, usize)> {
        let iy = (y * stride) as isize - pad_y + (ky * dil) as isize;
        let ix = (x * stride) as isize - pad_x + (kx * dil) as isize;
        if iy < 0 || ix < 0 || iy >= d.height as isize || ix >= d.width as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    };

    for no in 0..c_out {
        for y in 0..out_dims.height {
            for x in 0..out_dims.width {
                let mut acc = 0.0f64;
                match attrs.mode {
                    ConvMode::Depthwise => {
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some((iy, ix)) = tap(y, x, ky, kx) {
                                    let w = kernels[(no * k + ky) * k + kx];
                                    acc += src[d.index(iy, ix, no)] as f64 * w as f64;
                                }
                            }
                        }
                    }
                    ConvMode::Standard | ConvMode::Pointwise => {
                        for ni in 0..d.channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    if let Some((iy, ix)) = tap(y, x, ky, kx) {
                                        let w = kernels[((no * k + ky) * k + kx) * d.channels + ni];
                                        acc += src[d.index(iy, ix, ni)] as f64 * w as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[no] as f64;
                }
                out[out_dims.index(y, x, no)] = acc;
            }
        }
    }
    Ok((out_dims, out))
}

pub fn batch_norm(input: &Tensor, scale: &[f32], shift: &[f32]) -> Result<Tensor> {
    let c = input.dims().channels;
    if scale.len() != c || shift.len() != c {
        return Err(Error::InvalidOperand(format!("batch norm needs {c} scale/shift values")));
    }
    let mut out = input.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *v = scale[ch] * *v + shift[ch];
    }
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let d = input.dims();
    let mut sums = vec![0.0f64; d.channels];
    for px in input.data().chunks(d.channels) {
        for (s, &v) in sums.iter_mut().zip(px) {
            *s += v as f64;
        }
    }
    let n = d.pixels() as f64;
    Tensor::new(Dims::new(1, 1, d.channels), sums.into_iter().map(|s| (s / n) as f32).collect())
        .expect("channel count is non-zero")
}

/// Half-pixel-center bilinear resize to an explicit size.
///
/// Source coordinate is `(dst + 0.5) * in / out - 0.5`, clamped to the valid
/// range; channels are interpolated independently.
pub fn resize_to(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let d = input.dims();
    let out_dims = Dims::new(out_h, out_w, d.channels);
    out_dims.validate()?;
    let axis = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Tensor::zeros(out_dims);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, d.height, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, d.width, out_w);
            for c in 0..d.channels {
                let top = (1.0 - fx) * input.get(y0, x0, c) as f64 + fx * input.get(y0, x1, c) as f64;
                let bot = (1.0 - fx) * input.get(y1, x0, c) as f64 + fx * input.get(y1, x1, c) as f64;
                out.set(y, x, c, ((1.0 - fy) * top + fy * bot) as f32);
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize(input: &Tensor, scale: ResizeScale) -> Result<Tensor> {
    let d = input.dims();
    if scale == ResizeScale::Half && (!d.height.is_multiple_of(2) || !d.width.is_multiple_of(2)) {
        return Err(Error::InvalidOperand(format!("half-size resize needs even dims, got {d}")));
    }
    resize_to(input, scale.apply(d.height), scale.apply(d.width))
}

pub fn elem_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidOperand(format!("ElemAdd operands {} and {}", a.dims(), b.dims())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.dims(), data)
}

/// Element-wise product; a `1x1xC` operand broadcasts over the other.
pub fn elem_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (full, other) = if b.dims().pixels() == 1 && a.dims().pixels() != 1 { (a, b) } else { (b, a) };
    let (fd, od) = (full.dims(), other.dims());
    if fd.channels != od.channels || (od != fd && od.pixels() != 1) {
        return Err(Error::InvalidOperand(format!("ElemMul operands {fd} and {od}")));
    }
    let c = fd.channels;
    let data = full
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let o = if od == fd { other.data()[i] } else { other.data()[i % c] };
            v * o
        })
        .collect();
    Tensor::new(fd, data)
}

pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidOperand("empty concat".into()))?.dims();
    if parts.iter().any(|p| p.dims().height != first.height || p.dims().width != first.width) {
        return Err(Error::InvalidOperand("concat operands differ spatially".into()));
    }
    let channels = parts.iter().map(|p| p.dims().channels).sum();
    let mut data = Vec::with_capacity(first.pixels() * channels);
    for px in 0..first.pixels() {
        for p in parts {
            let c = p.dims().channels;
            data.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(first.with_channels(channels), data)
}
