//! Overlap measures between a segmentation and its reference, detection
//! slice miss rate and observer statistics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::Volume;

/// Overlap of a source segmentation `S` with the truth `T`. Undefined ratios
/// (empty `T` or empty `S`) are NaN and explained in `diagnostics`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total_overlap: f64,
    pub jaccard: f64,
    pub dice: f64,
    #[serde(rename = "fn")]
    pub fn_rate: f64,
    #[serde(rename = "fp")]
    pub fp_rate: f64,
    #[serde(rename = "rvd")]
    pub relative_volume_diff: f64,
    pub source_voxels: usize,
    pub truth_voxels: usize,
    pub intersection_voxels: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

pub const METRIC_COLUMNS: [&str; 6] = ["total_overlap", "jaccard", "dice", "fn", "fp", "rvd"];

impl MetricsReport {
    pub fn from_counts(source: usize, truth: usize, intersection: usize) -> Self {
        let (s, t, i) = (source as f64, truth as f64, intersection as f64);
        let union = s + t - i;
        let mut diagnostics = Vec::new();
        let ratio = |num: f64, den: f64, what: &str, diagnostics: &mut Vec<String>| {
            if den == 0.0 {
                diagnostics.push(format!("{what} undefined"));
                f64::NAN
            } else {
                num / den
            }
        };
        let total_overlap = ratio(i, t, "total overlap: empty truth", &mut diagnostics);
        let fn_rate = ratio(t - i, t, "false negative rate: empty truth", &mut diagnostics);
        let fp_rate = ratio(s - i, s, "false positive rate: empty segmentation", &mut diagnostics);
        let jaccard = ratio(i, union, "jaccard: both masks empty", &mut diagnostics);
        let dice = ratio(2.0 * i, s + t, "dice: both masks empty", &mut diagnostics);
        let relative_volume_diff = ratio((s - t).abs(), t, "volume difference: empty truth", &mut diagnostics);
        Self {
            total_overlap,
            jaccard,
            dice,
            fn_rate,
            fp_rate,
            relative_volume_diff,
            source_voxels: source,
            truth_voxels: truth,
            intersection_voxels: intersection,
            diagnostics,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.total_overlap,
            self.jaccard,
            self.dice,
            self.fn_rate,
            self.fp_rate,
            self.relative_volume_diff,
        ]
    }

    pub fn csv_header() -> String {
        format!("dataset,{}", METRIC_COLUMNS.join(","))
    }

    pub fn csv_row(&self, dataset: &str) -> String {
        let vals: Vec<String> = self.values().iter().map(|v| format!("{v}")).collect();
        format!("{dataset},{}", vals.join(","))
    }
}

/// Voxel-count overlap between two binary volumes on the same grid. Since the
/// voxel volume is common to both, ratios of physical volumes equal ratios of
/// counts.
pub fn overlap_report(source: &Volume, truth: &Volume) -> Result<MetricsReport> {
    if !source.same_grid(truth) {
        return Err(invalid(format!(
            "segmentation {:?} and truth {:?} differ in extents",
            source.extents(),
            truth.extents()
        )));
    }
    Ok(overlap_counts(source.voxels(), truth.voxels()))
}

pub fn overlap_counts(source: &[f64], truth: &[f64]) -> MetricsReport {
    let (mut s, mut t, mut i) = (0, 0, 0);
    for (&a, &b) in source.iter().zip(truth) {
        let (a, b) = (a == 1.0, b == 1.0);
        s += a as usize;
        t += b as usize;
        i += (a && b) as usize;
    }
    MetricsReport::from_counts(s, t, i)
}

/// Fraction of truth slices (inclusive interval) outside the predicted
/// interval; a missing prediction misses everything.
pub fn detection_slice_fnr(predicted: Option<(usize, usize)>, truth: (usize, usize)) -> Result<f64> {
    if truth.1 < truth.0 {
        return Err(invalid("empty truth interval"));
    }
    let total = (truth.1 - truth.0 + 1) as f64;
    let Some((p0, p1)) = predicted else { return Ok(1.0) };
    let covered = (truth.0..=truth.1).filter(|z| (p0..=p1).contains(z)).count() as f64;
    Ok((total - covered) / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverStats {
    pub initial: MeanStd,
    pub last: MeanStd,
    /// Mean interval rounded to the nearest slice; the reference for
    /// detection miss rates.
    pub reference: (usize, usize),
}

pub fn observer_stats(selections: &[(usize, usize)]) -> Result<ObserverStats> {
    if selections.len() < 2 {
        return Err(invalid(format!("need at least 2 observers, got {}", selections.len())));
    }
    let first: Vec<f64> = selections.iter().map(|s| s.0 as f64).collect();
    let last: Vec<f64> = selections.iter().map(|s| s.1 as f64).collect();
    let initial = mean_std(&first);
    let last = mean_std(&last);
    Ok(ObserverStats {
        initial,
        last,
        reference: (initial.mean.round() as usize, last.mean.round() as usize),
    })
}

/// Mean and sample standard deviation of each metric over reports; undefined
/// (NaN) entries are skipped per metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub count: usize,
    pub total_overlap: MeanStd,
    pub jaccard: MeanStd,
    pub dice: MeanStd,
    #[serde(rename = "fn")]
    pub fn_rate: MeanStd,
    #[serde(rename = "fp")]
    pub fp_rate: MeanStd,
    #[serde(rename = "rvd")]
    pub relative_volume_diff: MeanStd,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(invalid("nothing to aggregate"));
    }
    let column = |k: usize| {
        let vals: Vec<f64> = reports.iter().map(|r| r.values()[k]).filter(|v| v.is_finite()).collect();
        mean_std(&vals)
    };
    Ok(AggregateReport {
        count: reports.len(),
        total_overlap: column(0),
        jaccard: column(1),
        dice: column(2),
        fn_rate: column(3),
        fp_rate: column(4),
        relative_volume_diff: column(5),
    })
}

impl AggregateReport {
    pub fn as_pairs(&self) -> [(&'static str, MeanStd); 6] {
        [
            ("total_overlap", self.total_overlap),
            ("jaccard", self.jaccard),
            ("dice", self.dice),
            ("fn", self.fn_rate),
            ("fp", self.fp_rate),
            ("rvd", self.relative_volume_diff),
        ]
    }
}
