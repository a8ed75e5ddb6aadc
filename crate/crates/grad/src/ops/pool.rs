use crate::error::{arg_err, Result};
use crate::{Real, Tensor};

/// Output extent of max pooling along one axis.
///
/// In ceil mode the last window may hang over the border and is clipped,
/// matching the classic Caffe convention used by FCN/HED style networks.
pub fn pool_out_extent(input: usize, window: usize, stride: usize, ceil_mode: bool) -> Option<usize> {
    if window == 0 || stride == 0 || window > input {
        return None;
    }
    let span = input - window;
    Some(if ceil_mode {
        span.div_ceil(stride) + 1
    } else {
        span / stride + 1
    })
}

/// Max pooling; returns the output together with the flat input index of the
/// selected element for every output value (first occurrence on ties).
pub fn maxpool2d(
    input: &Tensor,
    window: usize,
    stride: usize,
    ceil_mode: bool,
) -> Result<(Tensor, Vec<u32>)> {
    const OP: &str = "maxpool2d";
    let (n, c, h, w) = input.dims4(OP)?;
    if window == 0 || stride == 0 {
        return Err(arg_err(OP, "window and stride must be at least 1"));
    }
    let extent = |e: usize| {
        pool_out_extent(e, window, stride, ceil_mode)
            .ok_or_else(|| arg_err(OP, format!("window {window} larger than input extent {e}")))
    };
    let (oh, ow) = (extent(h)?, extent(w)?);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let y0 = oy * stride;
            let y1 = (y0 + window).min(h);
            for ox in 0..ow {
                let x0 = ox * stride;
                let x1 = (x0 + window).min(w);
                let mut best = Real::NEG_INFINITY;
                let mut best_idx = base + y0 * w + x0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let idx = base + yy * w + xx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gx[idx as usize] += g;
    }
    Tensor::new(input_shape, gx)
}
