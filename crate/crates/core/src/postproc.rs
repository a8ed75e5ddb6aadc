//! Probability volume to binary mask: z smoothing, 1D k-means, cluster
//! binarization and largest connected component.

use std::collections::VecDeque;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::volume::{ValueKind, Volume};

/// Gaussian width along z, in slices.
pub const SMOOTH_SIGMA_SLICES: f64 = 2.0;
pub const DEFAULT_CLUSTERS: usize = 6;

/// Gaussian filter along z (sigma 2 slices, truncated at 3 sigma). Near the
/// first and last slice the kernel is renormalised over the slices that
/// exist. Output is clipped to [0, 1].
pub fn smooth_z(prob: &Volume) -> Volume {
    let [nx, ny, nz] = prob.extents();
    let radius = (3.0 * SMOOTH_SIGMA_SLICES).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * SMOOTH_SIGMA_SLICES * SMOOTH_SIGMA_SLICES)).exp())
        .collect();
    let plane = nx * ny;
    let src = prob.voxels();
    let mut out = vec![0.0; src.len()];
    for z in 0..nz as isize {
        let lo = (z - radius).max(0);
        let hi = (z + radius).min(nz as isize - 1);
        let norm: f64 = (lo..=hi).map(|k| weights[(k - z + radius) as usize]).sum();
        let dst = &mut out[z as usize * plane..(z as usize + 1) * plane];
        for k in lo..=hi {
            let w = weights[(k - z + radius) as usize] / norm;
            let s = &src[k as usize * plane..(k as usize + 1) * plane];
            for (d, v) in dst.iter_mut().zip(s) {
                *d += w * v;
            }
        }
        dst.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Volume::new(prob.extents(), prob.spacing(), out, ValueKind::Probability)
        .expect("clipped values are probabilities")
        .with_origin(prob.origin())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Ascending.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Sum of squared distances after each iteration.
    pub objective: Vec<f64>,
    pub warnings: Vec<String>,
}

fn nearest(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = (v - c).abs();
        if d < dist {
            dist = d;
            best = j;
        }
    }
    best
}

/// Deterministic initial centroids: value at rank `floor((j + 0.5) / k * n)`
/// of the sorted input.
pub fn quantile_init(values: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (0..k)
        .map(|j| sorted[(((j as f64 + 0.5) / k as f64 * n as f64).floor() as usize).min(n - 1)])
        .collect()
}

/// Lloyd's algorithm on scalars from [`quantile_init`]. Ties go to the lower
/// centroid index; an empty cluster is moved onto the point farthest from its
/// current centroid. With fewer than `k` distinct values, `k` is reduced.
pub fn kmeans_1d(values: &[f64], k: usize, max_iters: usize) -> Result<KMeans> {
    if values.is_empty() {
        return Err(invalid("k-means needs at least one value"));
    }
    if k == 0 {
        return Err(invalid("k-means needs k >= 1"));
    }
    let mut warnings = Vec::new();
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k_eff = if distinct.len() < k {
        let msg = format!("only {} distinct values; using k = {}", distinct.len(), distinct.len());
        log::warn!("{msg}");
        warnings.push(msg);
        distinct.len()
    } else {
        k
    };
    let mut centroids = quantile_init(values, k_eff);
    let mut assignment = vec![usize::MAX; values.len()];
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for (a, &v) in assignment.iter_mut().zip(values) {
            let j = nearest(v, &centroids);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        reseed_empty(values, &mut centroids, &mut assignment);
        let mut sums = vec![0.0; k_eff];
        let mut counts = vec![0usize; k_eff];
        for (&a, &v) in assignment.iter().zip(values) {
            sums[a] += v;
            counts[a] += 1;
        }
        for j in 0..k_eff {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        objective.push(sse(values, &centroids, &assignment));
        if !changed && iterations > 1 {
            break;
        }
    }
    // Report centroids in ascending order with assignments relabelled to match.
    let mut order: Vec<usize> = (0..k_eff).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
    let mut rank = vec![0; k_eff];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r;
    }
    Ok(KMeans {
        centroids: order.iter().map(|&j| centroids[j]).collect(),
        assignment: assignment.iter().map(|&a| rank[a]).collect(),
        iterations,
        objective,
        warnings,
    })
}

fn sse(values: &[f64], centroids: &[f64], assignment: &[usize]) -> f64 {
    values.iter().zip(assignment).map(|(v, &a)| (v - centroids[a]).powi(2)).sum()
}

fn reseed_empty(values: &[f64], centroids: &mut [f64], assignment: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        // Farthest point from its own centroid, among clusters that can spare one.
        let far = values
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assignment[*i]] > 1)
            .max_by(|(i, a), (j, b)| {
                let da = (*a - centroids[assignment[*i]]).abs();
                let db = (*b - centroids[assignment[*j]]).abs();
                da.total_cmp(&db).then(j.cmp(i))
            })
            .map(|(i, _)| i);
        let Some(i) = far else { return };
        centroids[empty] = values[i];
        assignment[i] = empty;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizePolicy {
    /// Everything except the lowest-centroid cluster is foreground.
    #[default]
    DropLowest,
    /// Only the highest-centroid cluster is foreground.
    KeepHighest,
}

impl FromStr for BinarizePolicy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop_lowest" => Ok(Self::DropLowest),
            "keep_highest" => Ok(Self::KeepHighest),
            _ => Err(CoreError::Config(format!("unknown policy `{s}`; use drop_lowest or keep_highest"))),
        }
    }
}

/// Foreground flags from cluster labels (labels index ascending centroids).
/// A single cluster is all foreground under either policy.
pub fn binarize_clusters(assignment: &[usize], centroids: &[f64], policy: BinarizePolicy) -> Vec<bool> {
    let k = centroids.len();
    if k <= 1 {
        log::warn!("single cluster: every voxel becomes foreground");
        return vec![true; assignment.len()];
    }
    assignment
        .iter()
        .map(|&a| match policy {
            BinarizePolicy::DropLowest => a != 0,
            BinarizePolicy::KeepHighest => a == k - 1,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    #[default]
    TwentySix,
}

impl FromStr for Connectivity {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6" => Ok(Self::Six),
            "26" => Ok(Self::TwentySix),
            _ => Err(CoreError::Config(format!("connectivity must be 6 or 26, got `{s}`"))),
        }
    }
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Keep only the largest connected foreground component (ties: the one whose
/// first voxel in z, y, x scan order comes first).
pub fn largest_component(mask: &Volume, connectivity: Connectivity) -> Volume {
    let [nx, ny, nz] = mask.extents();
    let fg: Vec<bool> = mask.voxels().iter().map(|&v| v == 1.0).collect();
    let mut label = vec![0u32; fg.len()];
    let offsets = connectivity.offsets();
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for seed in 0..fg.len() {
        if !fg[seed] || label[seed] != 0 {
            continue;
        }
        next += 1;
        label[seed] = next;
        queue.push_back(seed);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = ((i % nx) as isize, ((i / nx) % ny) as isize, (i / (nx * ny)) as isize);
            for o in &offsets {
                let (a, b, c) = (x + o[0], y + o[1], z + o[2]);
                if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                    continue;
                }
                let j = a as usize + nx * (b as usize + ny * c as usize);
                if fg[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    let voxels = label
        .iter()
        .map(|&l| if best.1 != 0 && l == best.1 { 1.0 } else { 0.0 })
        .collect();
    Volume::new(mask.extents(), mask.spacing(), voxels, ValueKind::Mask)
        .expect("binary")
        .with_origin(mask.origin())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocConfig {
    pub clusters: usize,
    pub max_iters: usize,
    pub policy: BinarizePolicy,
    pub connectivity: Connectivity,
    pub smooth: bool,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            clusters: DEFAULT_CLUSTERS,
            max_iters: 100,
            policy: BinarizePolicy::DropLowest,
            connectivity: Connectivity::TwentySix,
            smooth: true,
        }
    }
}

/// Full chain from a probability volume to a single-component mask.
pub fn postprocess(prob: &Volume, cfg: &PostprocConfig) -> Result<Volume> {
    if prob.kind() != ValueKind::Probability {
        return Err(invalid("post-processing expects a probability volume"));
    }
    let smoothed = if cfg.smooth { smooth_z(prob) } else { prob.clone() };
    let km = kmeans_1d(smoothed.voxels(), cfg.clusters, cfg.max_iters)?;
    let fg = binarize_clusters(&km.assignment, &km.centroids, cfg.policy);
    let binary = Volume::new(
        prob.extents(),
        prob.spacing(),
        fg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        ValueKind::Mask,
    )?
    .with_origin(prob.origin());
    Ok(largest_component(&binary, cfg.connectivity))
}
