//! From detector output to a segmentation region: grid target rasterization,
//! candidate decoding and grouping, the z-run rule for the 3D region,
//! physical-margin expansion and in-plane resampling.

use serde::{Deserialize, Serialize};

use crate::arch::detection::DetectionTargets;
use crate::error::{invalid, Result};
use crate::grad::Real;
use crate::volume::Volume;

/// Axis-aligned box on slice `z` covering `[xmin, xmax) x [ymin, ymax)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub z: usize,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    pub score: f64,
}

impl BBox2D {
    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin).max(0.0) * (self.ymax - self.ymin).max(0.0)
    }

    pub fn iou(&self, other: &BBox2D) -> f64 {
        let w = (self.xmax.min(other.xmax) - self.xmin.max(other.xmin)).max(0.0);
        let h = (self.ymax.min(other.ymax) - self.ymin.max(other.ymin)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn intersects_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
        let w = (self.xmax.min(x1) - self.xmin.max(x0)).max(0.0);
        let h = (self.ymax.min(y1) - self.ymin.max(y0)).max(0.0);
        w * h
    }
}

/// Region handed from detection to segmentation. `z` bounds are inclusive,
/// in-plane bounds half-open, all in voxel indices of the source volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi3D {
    pub zmin: usize,
    pub zmax: usize,
    pub xmin: usize,
    pub xmax: usize,
    pub ymin: usize,
    pub ymax: usize,
    pub source_extents: [usize; 3],
    pub spacing: [f64; 3],
    pub margins_mm: [f64; 2],
}

impl Roi3D {
    pub fn width(&self) -> usize {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> usize {
        self.ymax - self.ymin
    }

    pub fn depth(&self) -> usize {
        self.zmax - self.zmin + 1
    }

    pub fn is_degenerate(&self) -> bool {
        self.xmax <= self.xmin || self.ymax <= self.ymin || self.zmax < self.zmin
    }
}

/// Coverage and corner targets of one slice: a cell is covered iff its
/// rectangle overlaps a box (with positive area); covered cells carry the
/// corners of the box overlapping them most, relative to the cell origin.
pub fn rasterize_grid_labels(boxes: &[BBox2D], width: usize, height: usize, cell_size: usize) -> DetectionTargets {
    let (gw, gh) = (width / cell_size, height / cell_size);
    let mut t = DetectionTargets::empty(gh, gw, cell_size);
    let c = cell_size as f64;
    for gy in 0..gh {
        for gx in 0..gw {
            let (x0, y0) = (gx as f64 * c, gy as f64 * c);
            let best = boxes
                .iter()
                .map(|b| (b.intersects_rect(x0, y0, x0 + c, y0 + c), b))
                .filter(|(a, _)| *a > 0.0)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, b)) = best {
                let i = gy * gw + gx;
                t.coverage[i] = 1.0;
                t.corner1[i] = [(b.xmin - x0) as Real, (b.ymin - y0) as Real];
                t.corner2[i] = [(b.xmax - x0) as Real, (b.ymax - y0) as Real];
            }
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub coverage_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { coverage_threshold: 0.5, iou_threshold: 0.5 }
    }
}

/// Boxes from the cells whose coverage reaches the threshold, grouped
/// greedily in order of decreasing coverage. A box joins the first group for
/// which the coverage-weighted mean including it keeps IoU at or above the
/// grouping threshold with every member; each group yields its weighted mean
/// with the best member coverage as score.
pub fn decode_candidates(
    pred: &DetectionTargets,
    z: usize,
    width: usize,
    height: usize,
    cfg: DecodeConfig,
) -> Vec<BBox2D> {
    let c = pred.cell_size as f64;
    let mut rects = Vec::new();
    for gy in 0..pred.grid_h {
        for gx in 0..pred.grid_w {
            let i = gy * pred.grid_w + gx;
            let cov = pred.coverage[i] as f64;
            if !(cov >= cfg.coverage_threshold) {
                continue;
            }
            let (x0, y0) = (gx as f64 * c, gy as f64 * c);
            let (ax, ay) = (x0 + pred.corner1[i][0] as f64, y0 + pred.corner1[i][1] as f64);
            let (bx, by) = (x0 + pred.corner2[i][0] as f64, y0 + pred.corner2[i][1] as f64);
            let b = BBox2D {
                z,
                xmin: ax.min(bx).clamp(0.0, width as f64),
                ymin: ay.min(by).clamp(0.0, height as f64),
                xmax: ax.max(bx).clamp(0.0, width as f64),
                ymax: ay.max(by).clamp(0.0, height as f64),
                score: cov.min(1.0),
            };
            if b.area() > 0.0 && b.xmin.is_finite() && b.ymin.is_finite() {
                rects.push(b);
            }
        }
    }
    group_boxes(rects, cfg.iou_threshold)
}

fn weighted_mean(members: &[BBox2D]) -> BBox2D {
    let total: f64 = members.iter().map(|b| b.score.max(1e-12)).sum();
    let avg = |f: fn(&BBox2D) -> f64| members.iter().map(|b| f(b) * b.score.max(1e-12)).sum::<f64>() / total;
    BBox2D {
        z: members[0].z,
        xmin: avg(|b| b.xmin),
        ymin: avg(|b| b.ymin),
        xmax: avg(|b| b.xmax),
        ymax: avg(|b| b.ymax),
        score: members.iter().map(|b| b.score).fold(0.0, f64::max),
    }
}

/// Greedy grouping used by [`decode_candidates`].
pub fn group_boxes(mut rects: Vec<BBox2D>, iou_threshold: f64) -> Vec<BBox2D> {
    // Stable: ties keep raster order.
    rects.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<(Vec<BBox2D>, BBox2D)> = Vec::new();
    for r in rects {
        let mut placed = false;
        for (members, rep) in groups.iter_mut() {
            let mut trial = members.clone();
            trial.push(r);
            let mean = weighted_mean(&trial);
            if trial.iter().all(|m| m.iou(&mean) >= iou_threshold) {
                *members = trial;
                *rep = mean;
                placed = true;
                break;
            }
        }
        if !placed {
            groups.push((vec![r], r));
        }
    }
    groups.into_iter().map(|(_, rep)| rep).collect()
}

/// Slice intervals (inclusive) of the 3D regions. Candidate slices separated
/// by fewer than `run_length` empty slices belong to the same group; a group
/// becomes a region when it spans at least `run_length` slices. Each region
/// runs from its first to its last candidate slice.
pub fn reconstruct_roi_z(presence: &[bool], run_length: usize) -> Vec<(usize, usize)> {
    let run_length = run_length.max(1);
    let mut out = Vec::new();
    let mut group: Option<(usize, usize)> = None;
    for z in (0..presence.len()).filter(|&z| presence[z]) {
        group = match group {
            Some((a, b)) if z - b - 1 < run_length => Some((a, z)),
            Some(done) => {
                if done.1 - done.0 + 1 >= run_length {
                    out.push(done);
                }
                Some((z, z))
            }
            None => Some((z, z)),
        };
    }
    if let Some((a, b)) = group {
        if b - a + 1 >= run_length {
            out.push((a, b));
        }
    }
    out
}

/// The interval with the most slices; ties go to the earlier one.
pub fn largest_interval(intervals: &[(usize, usize)]) -> Option<(usize, usize)> {
    intervals
        .iter()
        .copied()
        .fold(None, |best: Option<(usize, usize)>, iv| match best {
            Some(b) if b.1 - b.0 >= iv.1 - iv.0 => Some(b),
            _ => Some(iv),
        })
}

/// Grow the in-plane bounds by `round(margin / spacing)` pixels per border,
/// clamped to the source extents.
pub fn expand_and_clamp(roi: &Roi3D, margin_x_mm: f64, margin_y_mm: f64) -> Roi3D {
    let px = (margin_x_mm / roi.spacing[0]).round().max(0.0) as usize;
    let py = (margin_y_mm / roi.spacing[1]).round().max(0.0) as usize;
    Roi3D {
        xmin: roi.xmin.saturating_sub(px),
        xmax: (roi.xmax + px).min(roi.source_extents[0]),
        ymin: roi.ymin.saturating_sub(py),
        ymax: (roi.ymax + py).min(roi.source_extents[1]),
        margins_mm: [margin_x_mm, margin_y_mm],
        ..*roi
    }
}

/// Region covering the given slice boxes (their in-plane hull) over `z_range`.
pub fn roi_from_boxes(boxes: &[BBox2D], z_range: (usize, usize), volume: &Volume) -> Option<Roi3D> {
    let inside: Vec<&BBox2D> = boxes.iter().filter(|b| (z_range.0..=z_range.1).contains(&b.z)).collect();
    if inside.is_empty() {
        return None;
    }
    let [nx, ny, _] = volume.extents();
    let xmin = inside.iter().map(|b| b.xmin).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let ymin = inside.iter().map(|b| b.ymin).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let xmax = (inside.iter().map(|b| b.xmax).fold(0.0, f64::max).ceil() as usize).min(nx);
    let ymax = (inside.iter().map(|b| b.ymax).fold(0.0, f64::max).ceil() as usize).min(ny);
    let roi = Roi3D {
        zmin: z_range.0,
        zmax: z_range.1,
        xmin,
        xmax,
        ymin,
        ymax,
        source_extents: volume.extents(),
        spacing: volume.spacing(),
        margins_mm: [0.0, 0.0],
    };
    (!roi.is_degenerate()).then_some(roi)
}

/// Bilinear resize of a `w x h` row-major plane to `tw x th` with corner
/// alignment: output `(i, j)` samples source `(i (w-1)/(tw-1), j (h-1)/(th-1))`.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, tw: usize, th: usize) -> Vec<f64> {
    let map = |i: usize, t: usize, s: usize| -> (usize, usize, f64) {
        if t <= 1 || s <= 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (s - 1) as f64 / (t - 1) as f64;
        let lo = (pos.floor() as usize).min(s - 1);
        let hi = (lo + 1).min(s - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = vec![0.0; tw * th];
    for j in 0..th {
        let (y0, y1, fy) = map(j, th, h);
        for i in 0..tw {
            let (x0, x1, fx) = map(i, tw, w);
            let a = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let b = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[j * tw + i] = a * (1.0 - fy) + b * fy;
        }
    }
    out
}

/// Crop `roi` out of `volume` and resize every slice to `target_xy` squared.
/// Slice count is unchanged; in-plane spacing scales by `extent / target_xy`.
pub fn resample_roi(volume: &Volume, roi: &Roi3D, target_xy: usize) -> Result<Volume> {
    let [nx, ny, nz] = volume.extents();
    if roi.is_degenerate() || roi.xmax > nx || roi.ymax > ny || roi.zmax >= nz || target_xy == 0 {
        return Err(invalid(format!(
            "region x {}..{} y {}..{} z {}..={} is empty or outside {nx}x{ny}x{nz}",
            roi.xmin, roi.xmax, roi.ymin, roi.ymax, roi.zmin, roi.zmax
        )));
    }
    let (w, h) = (roi.width(), roi.height());
    let mut out = Vec::with_capacity(target_xy * target_xy * roi.depth());
    let mut crop = vec![0.0; w * h];
    for z in roi.zmin..=roi.zmax {
        let s = volume.slice(z);
        for y in 0..h {
            let row = (roi.ymin + y) * nx + roi.xmin;
            crop[y * w..(y + 1) * w].copy_from_slice(&s[row..row + w]);
        }
        if w == target_xy && h == target_xy {
            out.extend_from_slice(&crop);
        } else {
            out.extend(resize_bilinear(&crop, w, h, target_xy, target_xy));
        }
    }
    let sp = volume.spacing();
    let spacing = [
        sp[0] * w as f64 / target_xy as f64,
        sp[1] * h as f64 / target_xy as f64,
        sp[2],
    ];
    let origin = volume.origin();
    let origin = [
        origin[0] + roi.xmin as f64 * sp[0],
        origin[1] + roi.ymin as f64 * sp[1],
        origin[2] + roi.zmin as f64 * sp[2],
    ];
    Ok(Volume::new([target_xy, target_xy, roi.depth()], spacing, out, volume.kind())?.with_origin(origin))
}

/// Inverse of [`resample_roi`] for probability maps: resize each slice back
/// to the region's extents and place it into a zero volume of the source grid.
pub fn paste_roi(resampled: &Volume, roi: &Roi3D) -> Result<Volume> {
    let [tw, th, tz] = resampled.extents();
    if tz != roi.depth() {
        return Err(invalid(format!("{tz} slices for a region of depth {}", roi.depth())));
    }
    let [nx, ny, nz] = roi.source_extents;
    let mut out = vec![0.0; nx * ny * nz];
    let (w, h) = (roi.width(), roi.height());
    for k in 0..tz {
        let back = resize_bilinear(resampled.slice(k), tw, th, w, h);
        let z = roi.zmin + k;
        for y in 0..h {
            let dst = (z * ny + roi.ymin + y) * nx + roi.xmin;
            out[dst..dst + w].copy_from_slice(&back[y * w..(y + 1) * w]);
        }
    }
    Volume::new(roi.source_extents, roi.spacing, out, resampled.kind())
}
