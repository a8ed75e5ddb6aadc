//! Grid targets of the slice detector and its coverage + corner loss.

use volseg_grad::{Real, Tensor};

use crate::error::{invalid, Result};

/// Per-cell coverage and bounding-box corners for one slice. Corners are in
/// pixels relative to the cell's top-left corner, as `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    pub grid_h: usize,
    pub grid_w: usize,
    pub cell_size: usize,
    pub coverage: Vec<Real>,
    pub corner1: Vec<[Real; 2]>,
    pub corner2: Vec<[Real; 2]>,
}

impl DetectionTargets {
    pub fn empty(grid_h: usize, grid_w: usize, cell_size: usize) -> Self {
        let n = grid_h * grid_w;
        Self {
            grid_h,
            grid_w,
            cell_size,
            coverage: vec![0.0; n],
            corner1: vec![[0.0; 2]; n],
            corner2: vec![[0.0; 2]; n],
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Decode one item of a detector head `[N, 5, gh, gw]` (corners in cell
    /// units) into pixel-unit targets.
    pub fn from_head(head: &Tensor, item: usize, cell_size: usize) -> Result<Self> {
        let (n, c, gh, gw) = head.dims4("from_head")?;
        if c != super::DETECTOR_OUTPUTS || item >= n {
            return Err(invalid(format!("head of shape {:?} has no item {item}", head.shape())));
        }
        let plane = gh * gw;
        let d = &head.data()[item * c * plane..(item + 1) * c * plane];
        let s = cell_size as Real;
        Ok(Self {
            grid_h: gh,
            grid_w: gw,
            cell_size,
            coverage: d[..plane].to_vec(),
            corner1: (0..plane).map(|i| [d[plane + i] * s, d[2 * plane + i] * s]).collect(),
            corner2: (0..plane).map(|i| [d[3 * plane + i] * s, d[4 * plane + i] * s]).collect(),
        })
    }
}

/// Loss value and gradients with respect to every predicted quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionLoss {
    pub value: Real,
    pub d_coverage: Vec<Real>,
    pub d_corner1: Vec<[Real; 2]>,
    pub d_corner2: Vec<[Real; 2]>,
}

fn sign(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `F = 1/(2n) * sum_i [ (c_g - c_p)^2 + c_g * (|P1_g - P1_p|_1 + |P2_g - P2_p|_1) ]`
/// over the `n` cells. The corner term only counts covered cells; the
/// subgradient at corner ties is zero.
pub fn detection_loss(truth: &DetectionTargets, pred: &DetectionTargets) -> Result<DetectionLoss> {
    if (truth.grid_h, truth.grid_w) != (pred.grid_h, pred.grid_w) || truth.cells() == 0 {
        return Err(invalid(format!(
            "grid {}x{} does not match prediction grid {}x{}",
            truth.grid_h, truth.grid_w, pred.grid_h, pred.grid_w
        )));
    }
    let n = truth.cells() as Real;
    let mut value = 0.0;
    let mut d_coverage = vec![0.0; truth.cells()];
    let mut d_corner1 = vec![[0.0; 2]; truth.cells()];
    let mut d_corner2 = vec![[0.0; 2]; truth.cells()];
    for i in 0..truth.cells() {
        let diff = truth.coverage[i] - pred.coverage[i];
        value += diff * diff;
        d_coverage[i] = -diff / n;
        if truth.coverage[i] > 0.0 {
            let w = truth.coverage[i];
            for a in 0..2 {
                let e1 = pred.corner1[i][a] - truth.corner1[i][a];
                let e2 = pred.corner2[i][a] - truth.corner2[i][a];
                value += w * (e1.abs() + e2.abs());
                d_corner1[i][a] = w * sign(e1) / (2.0 * n);
                d_corner2[i][a] = w * sign(e2) / (2.0 * n);
            }
        }
    }
    Ok(DetectionLoss {
        value: value / (2.0 * n),
        d_coverage,
        d_corner1,
        d_corner2,
    })
}

/// Mean detection loss over a batch of head outputs and the gradient with
/// respect to the head tensor (corner channels in cell units).
pub fn detection_loss_head(head: &Tensor, truths: &[DetectionTargets]) -> Result<(Real, Tensor)> {
    let (n, c, gh, gw) = head.dims4("detection_loss_head")?;
    if truths.len() != n {
        return Err(invalid(format!("{} targets for a batch of {n}", truths.len())));
    }
    let plane = gh * gw;
    let mut grad = vec![0.0; head.len()];
    let mut total = 0.0;
    for (item, truth) in truths.iter().enumerate() {
        let pred = DetectionTargets::from_head(head, item, truth.cell_size)?;
        let l = detection_loss(truth, &pred)?;
        total += l.value;
        let s = truth.cell_size as Real / n as Real;
        let g = &mut grad[item * c * plane..(item + 1) * c * plane];
        for i in 0..plane {
            g[i] = l.d_coverage[i] / n as Real;
            g[plane + i] = l.d_corner1[i][0] * s;
            g[2 * plane + i] = l.d_corner1[i][1] * s;
            g[3 * plane + i] = l.d_corner2[i][0] * s;
            g[4 * plane + i] = l.d_corner2[i][1] * s;
        }
    }
    Ok((total / n as Real, Tensor::new(head.shape(), grad)?))
}
