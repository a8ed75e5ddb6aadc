use crate::error::{arg_err, shape_err, Result};
use crate::{Real, Tensor};

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Window `[offset, offset + th) x [offset, offset + tw)` of every plane of `big`.
pub fn crop_align(big: &Tensor, target_hw: (usize, usize), offset: (usize, usize)) -> Result<Tensor> {
    const OP: &str = "crop_align";
    let (n, c, h, w) = big.dims4(OP)?;
    let (th, tw) = target_hw;
    let (oy, ox) = offset;
    if oy + th > h || ox + tw > w {
        return Err(arg_err(
            OP,
            format!("offset ({oy}, {ox}) with target {th}x{tw} exceeds source {h}x{w}"),
        ));
    }
    let src = big.data();
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in 0..n * c {
        for y in 0..th {
            let row = plane * h * w + (y + oy) * w + ox;
            out.extend_from_slice(&src[row..row + tw]);
        }
    }
    Tensor::new(&[n, c, th, tw], out)
}

pub fn crop_align_backward(
    big_shape: &[usize],
    offset: (usize, usize),
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (n, c, th, tw) = grad_out.dims4("crop_align_backward")?;
    let (h, w) = (big_shape[2], big_shape[3]);
    let mut gx = vec![0.0; big_shape.iter().product()];
    let g = grad_out.data();
    for plane in 0..n * c {
        for y in 0..th {
            let row = plane * h * w + (y + offset.0) * w + offset.1;
            let src = &g[(plane * th + y) * tw..(plane * th + y + 1) * tw];
            for (d, s) in gx[row..row + tw].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::new(big_shape, gx)
}

/// How several equally sized maps are merged into one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FuseMode {
    /// Per-element maximum across inputs.
    EltwiseMax,
    /// Per-element sum across inputs.
    EltwiseSum,
    /// Stacking along the channel axis.
    Concat,
}

impl FuseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FuseMode::EltwiseMax => "eltwise_max",
            FuseMode::EltwiseSum => "eltwise_sum",
            FuseMode::Concat => "concat",
        }
    }
}

/// Forward fuse; for `EltwiseMax` also returns the winning input per element.
pub fn fuse(inputs: &[&Tensor], mode: FuseMode) -> Result<(Tensor, Vec<u8>)> {
    const OP: &str = "fuse";
    let first = *inputs.first().ok_or_else(|| arg_err(OP, "no inputs"))?;
    if inputs.len() > u8::MAX as usize {
        return Err(arg_err(OP, "too many inputs"));
    }
    match mode {
        FuseMode::EltwiseMax | FuseMode::EltwiseSum => {
            for t in inputs {
                if t.shape() != first.shape() {
                    return Err(shape_err(
                        OP,
                        format!("{:?} vs {:?}", first.shape(), t.shape()),
                    ));
                }
            }
            let mut out = first.data().to_vec();
            let mut arg = Vec::new();
            if mode == FuseMode::EltwiseMax {
                arg = vec![0u8; out.len()];
                for (i, t) in inputs.iter().enumerate().skip(1) {
                    for ((o, a), &v) in out.iter_mut().zip(arg.iter_mut()).zip(t.data()) {
                        if v > *o {
                            *o = v;
                            *a = i as u8;
                        }
                    }
                }
            } else {
                for t in &inputs[1..] {
                    for (o, &v) in out.iter_mut().zip(t.data()) {
                        *o += v;
                    }
                }
            }
            Ok((Tensor::new(first.shape(), out)?, arg))
        }
        FuseMode::Concat => {
            let (n, _, h, w) = first.dims4(OP)?;
            let mut total_c = 0;
            for t in inputs {
                let (tn, tc, th, tw) = t.dims4(OP)?;
                if (tn, th, tw) != (n, h, w) {
                    return Err(shape_err(
                        OP,
                        format!("concat needs equal N/H/W: {:?} vs {:?}", first.shape(), t.shape()),
                    ));
                }
                total_c += tc;
            }
            let mut out = Vec::with_capacity(n * total_c * h * w);
            for b in 0..n {
                for t in inputs {
                    let per = t.shape()[1] * h * w;
                    out.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
                }
            }
            Ok((Tensor::new(&[n, total_c, h, w], out)?, Vec::new()))
        }
    }
}

pub fn fuse_backward(
    shapes: &[Vec<usize>],
    mode: FuseMode,
    argmax: &[u8],
    grad_out: &Tensor,
) -> Result<Vec<Tensor>> {
    let g = grad_out.data();
    match mode {
        FuseMode::EltwiseMax => {
            let mut grads: Vec<Vec<Real>> = shapes.iter().map(|_| vec![0.0; g.len()]).collect();
            for (i, (&a, &v)) in argmax.iter().zip(g).enumerate() {
                grads[a as usize][i] = v;
            }
            shapes.iter().zip(grads).map(|(s, d)| Tensor::new(s, d)).collect()
        }
        FuseMode::EltwiseSum => shapes.iter().map(|s| Tensor::new(s, g.to_vec())).collect(),
        FuseMode::Concat => {
            let (n, total_c, h, w) = grad_out.dims4("fuse_backward")?;
            let mut grads: Vec<Vec<Real>> = shapes
                .iter()
                .map(|s| Vec::with_capacity(s.iter().product()))
                .collect();
            for b in 0..n {
                let mut c0 = 0;
                for (s, d) in shapes.iter().zip(grads.iter_mut()) {
                    let per = s[1] * h * w;
                    let start = (b * total_c + c0) * h * w;
                    d.extend_from_slice(&g[start..start + per]);
                    c0 += s[1];
                }
            }
            shapes.iter().zip(grads).map(|(s, d)| Tensor::new(s, d)).collect()
        }
    }
}
