//! 2-D convolution and its adjoint, lowered to GEMM through im2col.
//!
//! Weights are `[C_out, C_in, k, k]` for convolution. A transposed
//! convolution reuses the layout of the convolution it is the adjoint of,
//! so its weight is `[C_in, C_out, k, k]` where `C_in` is the channel count
//! of its own input.

use crate::error::{arg_err, shape_err, GradError, Result};
use crate::gemm::gemm;
use crate::{Real, Tensor};

/// Geometry of one convolution window sweep over a `[C, H, W]` plane.
#[derive(Clone, Copy, Debug)]
struct Sweep {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Sweep {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    full.checked_sub(2 * padding).filter(|&e| e > 0)
}

fn im2col(x: &[Real], sw: &Sweep, cols: &mut [Real]) {
    let (k, s, p) = (sw.kernel, sw.stride as isize, sw.padding as isize);
    let ncols = sw.cols();
    let mut row = 0;
    for c in 0..sw.channels {
        let plane = &x[c * sw.height * sw.width..(c + 1) * sw.height * sw.width];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..sw.out_h {
                    let iy = oy as isize * s - p + ki as isize;
                    let line = &mut dst[oy * sw.out_w..(oy + 1) * sw.out_w];
                    if iy < 0 || iy >= sw.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * sw.width..(iy as usize + 1) * sw.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        *v = if ix >= 0 && ix < sw.width as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add of `cols` back onto the `[C, H, W]` plane (adjoint of im2col).
fn col2im(cols: &[Real], sw: &Sweep, x: &mut [Real]) {
    let (k, s, p) = (sw.kernel, sw.stride as isize, sw.padding as isize);
    let ncols = sw.cols();
    let mut row = 0;
    for c in 0..sw.channels {
        let plane = &mut x[c * sw.height * sw.width..(c + 1) * sw.height * sw.width];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..sw.out_h {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= sw.height as isize {
                        continue;
                    }
                    let line = &src[oy * sw.out_w..(oy + 1) * sw.out_w];
                    let dst = &mut plane[iy as usize * sw.width..(iy as usize + 1) * sw.width];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < sw.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_weight(
    op: &'static str,
    weight: &Tensor,
    in_channels: usize,
) -> Result<(usize, usize, usize)> {
    let (wo, wi, kh, kw) = weight.dims4(op)?;
    if kh != kw {
        return Err(shape_err(op, format!("only square kernels are supported, got {kh}x{kw}")));
    }
    if wi != in_channels {
        return Err(shape_err(
            op,
            format!("weight expects {wi} input channels but input has {in_channels}"),
        ));
    }
    Ok((wo, wi, kh))
}

fn conv_sweep(
    op: &'static str,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Sweep> {
    if stride == 0 {
        return Err(arg_err(op, "stride must be at least 1"));
    }
    let extent = |e: usize| {
        conv_out_extent(e, k, stride, padding).ok_or_else(|| GradError::Extent {
            op,
            detail: format!("kernel {k} exceeds padded extent {} (padding {padding})", e + 2 * padding),
        })
    };
    Ok(Sweep {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        out_h: extent(h)?,
        out_w: extent(w)?,
    })
}

/// Forward 2-D cross-correlation with optional per-channel bias.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (n, c, h, w) = input.dims4(OP)?;
    let (co, _, k) = check_weight(OP, weight, c)?;
    if let Some(b) = bias {
        if b.len() != co {
            return Err(shape_err(OP, format!("bias has {} entries, expected {co}", b.len())));
        }
    }
    let sw = conv_sweep(OP, c, h, w, k, stride, padding)?;
    let (rows, ncols) = (sw.rows(), sw.cols());
    let mut out = vec![0.0; n * co * ncols];
    let mut cols = if sw.is_pointwise() { Vec::new() } else { vec![0.0; rows * ncols] };
    let in_per = c * h * w;
    for b_idx in 0..n {
        let x = &input.data()[b_idx * in_per..(b_idx + 1) * in_per];
        let y = &mut out[b_idx * co * ncols..(b_idx + 1) * co * ncols];
        if let Some(b) = bias {
            for (o, chunk) in y.chunks_mut(ncols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[o]);
            }
        }
        let src: &[Real] = if sw.is_pointwise() {
            x
        } else {
            im2col(x, &sw, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(co, rows, ncols, 1.0, weight.data(), false, src, false, beta, y);
    }
    Tensor::new(&[n, co, sw.out_h, sw.out_w], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    const OP: &str = "conv2d_backward";
    let (n, c, h, w) = input.dims4(OP)?;
    let (co, _, k) = check_weight(OP, weight, c)?;
    let sw = conv_sweep(OP, c, h, w, k, stride, padding)?;
    if grad_out.shape() != [n, co, sw.out_h, sw.out_w] {
        return Err(shape_err(OP, format!("upstream gradient has shape {:?}", grad_out.shape())));
    }
    let (rows, ncols) = (sw.rows(), sw.cols());
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; co];
    let pointwise = sw.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * ncols] };
    let mut gcols = if pointwise { Vec::new() } else { vec![0.0; rows * ncols] };
    let in_per = c * h * w;
    for b_idx in 0..n {
        let x = &input.data()[b_idx * in_per..(b_idx + 1) * in_per];
        let gy = &grad_out.data()[b_idx * co * ncols..(b_idx + 1) * co * ncols];
        for (o, chunk) in gy.chunks(ncols).enumerate() {
            gb[o] += chunk.iter().sum::<Real>();
        }
        let gxb = &mut gx[b_idx * in_per..(b_idx + 1) * in_per];
        if pointwise {
            gemm(co, ncols, rows, 1.0, gy, false, x, true, 1.0, &mut gw);
            gemm(rows, co, ncols, 1.0, weight.data(), true, gy, false, 0.0, gxb);
        } else {
            im2col(x, &sw, &mut cols);
            gemm(co, ncols, rows, 1.0, gy, false, &cols, true, 1.0, &mut gw);
            gemm(rows, co, ncols, 1.0, weight.data(), true, gy, false, 0.0, &mut gcols);
            col2im(&gcols, &sw, gxb);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), gx)?,
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[co], gb)?,
    })
}

/// Geometry of the convolution whose adjoint a transposed convolution is.
fn transposed_sweep(
    op: &'static str,
    out_c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Sweep> {
    if stride == 0 {
        return Err(arg_err(op, "stride must be at least 1"));
    }
    let extent = |e: usize| {
        conv_transpose_out_extent(e, k, stride, padding).ok_or_else(|| GradError::Extent {
            op,
            detail: format!("(({e} - 1) * {stride} + {k} - 2 * {padding}) is not positive"),
        })
    };
    let (oh, ow) = (extent(h)?, extent(w)?);
    Ok(Sweep {
        channels: out_c,
        height: oh,
        width: ow,
        kernel: k,
        stride,
        padding,
        out_h: h,
        out_w: w,
    })
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same weight.
pub fn transposed_conv2d(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "transposed_conv2d";
    let (n, ci, h, w) = input.dims4(OP)?;
    let (wi, co, kh, kw) = weight.dims4(OP)?;
    if kh != kw {
        return Err(shape_err(OP, "only square kernels are supported"));
    }
    if wi != ci {
        return Err(shape_err(
            OP,
            format!("weight expects {wi} input channels but input has {ci}"),
        ));
    }
    let sw = transposed_sweep(OP, co, h, w, kh, stride, padding)?;
    let (rows, ncols) = (sw.rows(), sw.cols());
    let out_per = co * sw.height * sw.width;
    let mut out = vec![0.0; n * out_per];
    let mut cols = vec![0.0; rows * ncols];
    for b_idx in 0..n {
        let x = &input.data()[b_idx * ci * ncols..(b_idx + 1) * ci * ncols];
        gemm(rows, ci, ncols, 1.0, weight.data(), true, x, false, 0.0, &mut cols);
        col2im(&cols, &sw, &mut out[b_idx * out_per..(b_idx + 1) * out_per]);
    }
    Tensor::new(&[n, co, sw.height, sw.width], out)
}

/// Gradients of [`transposed_conv2d`] with respect to input and weight.
pub fn transposed_conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    const OP: &str = "transposed_conv2d_backward";
    let (n, ci, h, w) = input.dims4(OP)?;
    let (_, co, k, _) = weight.dims4(OP)?;
    let sw = transposed_sweep(OP, co, h, w, k, stride, padding)?;
    if grad_out.shape() != [n, co, sw.height, sw.width] {
        return Err(shape_err(OP, format!("upstream gradient has shape {:?}", grad_out.shape())));
    }
    let (rows, ncols) = (sw.rows(), sw.cols());
    let out_per = co * sw.height * sw.width;
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut cols = vec![0.0; rows * ncols];
    for b_idx in 0..n {
        let gy = &grad_out.data()[b_idx * out_per..(b_idx + 1) * out_per];
        im2col(gy, &sw, &mut cols);
        let x = &input.data()[b_idx * ci * ncols..(b_idx + 1) * ci * ncols];
        gemm(ci, rows, ncols, 1.0, weight.data(), false, &cols, false, 0.0, &mut gx[b_idx * ci * ncols..(b_idx + 1) * ci * ncols]);
        gemm(ci, ncols, rows, 1.0, x, false, &cols, true, 1.0, &mut gw);
    }
    Ok((Tensor::new(input.shape(), gx)?, Tensor::new(weight.shape(), gw)?))
}
