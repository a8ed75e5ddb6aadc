use crate::error::{arg_err, shape_err, Result};
use crate::{Real, Tensor};

/// Mean multinomial logistic loss over all pixels of `scores` (`[N, K, H, W]`)
/// given per-pixel class indices in `labels` (`[N, H, W]`, stored as reals).
///
/// Returns the loss and its gradient with respect to `scores`.
pub fn softmax_multinomial_loss(scores: &Tensor, labels: &Tensor) -> Result<(Real, Tensor)> {
    const OP: &str = "softmax_multinomial_loss";
    let (n, k, h, w) = scores.dims4(OP)?;
    if k < 2 {
        return Err(arg_err(OP, format!("need at least 2 classes, got {k}")));
    }
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(shape_err(
            OP,
            format!("labels {:?} do not cover scores {:?}", labels.shape(), scores.shape()),
        ));
    }
    let count = (n * plane) as Real;
    let s = scores.data();
    let mut grad = vec![0.0; s.len()];
    let mut total = 0.0;
    let mut probs = vec![0.0; k];
    for b in 0..n {
        for p in 0..plane {
            let raw = labels.data()[b * plane + p];
            let y = raw as usize;
            if raw < 0.0 || raw.fract() != 0.0 || y >= k {
                return Err(arg_err(OP, format!("label {raw} outside [0, {k})")));
            }
            let at = |j: usize| (b * k + j) * plane + p;
            let max = (0..k).map(|j| s[at(j)]).fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for (j, pr) in probs.iter_mut().enumerate() {
                *pr = (s[at(j)] - max).exp();
                z += *pr;
            }
            total += z.ln() - (s[at(y)] - max);
            for (j, pr) in probs.iter().enumerate() {
                let onehot = if j == y { 1.0 } else { 0.0 };
                grad[at(j)] = (pr / z - onehot) / count;
            }
        }
    }
    Ok((total / count, Tensor::new(scores.shape(), grad)?))
}

/// Per-pixel softmax over the class axis of `[N, K, H, W]` scores.
pub fn softmax_channels(scores: &Tensor) -> Result<Tensor> {
    let (n, k, h, w) = scores.dims4("softmax")?;
    let plane = h * w;
    let s = scores.data();
    let mut out = vec![0.0; s.len()];
    for b in 0..n {
        for p in 0..plane {
            let at = |j: usize| (b * k + j) * plane + p;
            let max = (0..k).map(|j| s[at(j)]).fold(Real::NEG_INFINITY, Real::max);
            let z: Real = (0..k).map(|j| (s[at(j)] - max).exp()).sum();
            for j in 0..k {
                out[at(j)] = (s[at(j)] - max).exp() / z;
            }
        }
    }
    Tensor::new(scores.shape(), out)
}
