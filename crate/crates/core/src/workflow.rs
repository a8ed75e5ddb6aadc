//! Dataset assembly, training objectives and the detect/segment chains that
//! tie the networks to volumes.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::arch::detection::{detection_loss_head, DetectionTargets};
use crate::arch::{self, ArchName, NetworkSpec, Scale};
use crate::detect::{
    decode_candidates, expand_and_clamp, largest_interval, paste_roi, rasterize_grid_labels, reconstruct_roi_z,
    resample_roi, roi_from_boxes, BBox2D, DecodeConfig, Roi3D,
};
use crate::config::KvConfig;
use crate::error::{invalid, CoreError, Result};
use crate::grad::{Activations, NodeId, ParamStore, Real, Tensor};
use crate::metrics::{aggregate, detection_slice_fnr, observer_stats, overlap_report, AggregateReport, MetricsReport};
use crate::optim::{train, Objective, TrainConfig, TrainReport};
use crate::phantom::{mask_to_bboxes, validation_split, FoldPlan, Phantom};
use crate::postproc::{postprocess, PostprocConfig};
use crate::volume::{ValueKind, Volume};

/// Network inputs are raw intensities times this factor.
pub const INTENSITY_SCALE: Real = 0.01;

/// Slices processed per forward pass at inference.
const INFER_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub margin_x_mm: f64,
    pub margin_y_mm: f64,
    pub run_length: usize,
    /// In-plane size the region is resampled to before segmentation.
    pub target_xy: usize,
    /// Slices added on both sides of the truth span when a region is derived
    /// from a mask rather than from detections.
    pub z_margin: usize,
    pub validation_fraction: f64,
    pub decode: DecodeConfig,
    pub postproc: PostprocConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            margin_x_mm: 110.0,
            margin_y_mm: 80.0,
            run_length: 10,
            target_xy: 64,
            z_margin: 2,
            validation_fraction: 0.1,
            decode: DecodeConfig::default(),
            postproc: PostprocConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Consume the pipeline keys of `kv`, leaving the rest for other readers.
    pub fn take_from(mut self, kv: &mut KvConfig) -> Result<Self> {
        macro_rules! field {
            ($key:literal, $dst:expr) => {
                if let Some(v) = kv.take($key)? {
                    $dst = v;
                }
            };
        }
        field!("margin_x_mm", self.margin_x_mm);
        field!("margin_y_mm", self.margin_y_mm);
        field!("run_length", self.run_length);
        field!("target_xy", self.target_xy);
        field!("z_margin", self.z_margin);
        field!("validation_fraction", self.validation_fraction);
        field!("coverage_threshold", self.decode.coverage_threshold);
        field!("iou_threshold", self.decode.iou_threshold);
        field!("clusters", self.postproc.clusters);
        field!("max_iters", self.postproc.max_iters);
        field!("policy", self.postproc.policy);
        field!("connectivity", self.postproc.connectivity);
        field!("smooth", self.postproc.smooth);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(self.margin_x_mm >= 0.0 && self.margin_y_mm >= 0.0) {
            return bad("margins must be non-negative");
        }
        if self.run_length == 0 || self.target_xy == 0 || self.postproc.clusters == 0 {
            return bad("run_length, target_xy and clusters must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

fn scaled(plane: &[f64]) -> Vec<Real> {
    plane.iter().map(|&v| v as Real * INTENSITY_SCALE).collect()
}

fn batch_tensor(planes: &[&[Real]], h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        data.extend_from_slice(p);
    }
    Ok(Tensor::new(&[planes.len(), 1, h, w], data)?)
}

/// Region a detector would ideally report for `mask`: the in-plane hull of
/// the foreground over its slice span widened by `z_margin`, then expanded by
/// the physical margins.
pub fn truth_roi(mask: &Volume, cfg: &PipelineConfig) -> Option<Roi3D> {
    let boxes: Vec<BBox2D> = mask_to_bboxes(mask).into_iter().flatten().collect();
    let z0 = boxes.first()?.z;
    let z1 = boxes.last()?.z;
    let nz = mask.nz();
    let mut roi = roi_from_boxes(&boxes, (z0, z1), mask)?;
    roi.zmin = z0.saturating_sub(cfg.z_margin);
    roi.zmax = (z1 + cfg.z_margin).min(nz - 1);
    Some(expand_and_clamp(&roi, cfg.margin_x_mm, cfg.margin_y_mm))
}

/// One segmentation training slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Vec<Real>,
    pub label: Vec<Real>,
}

/// Resampled slices of the truth region with their binary labels.
pub fn segmentation_samples(p: &Phantom, cfg: &PipelineConfig) -> Result<Vec<SegSample>> {
    let roi = truth_roi(&p.mask, cfg).ok_or_else(|| invalid("phantom has an empty mask"))?;
    let image = resample_roi(&p.image, &roi, cfg.target_xy)?;
    let mask = resample_roi(&p.mask.clone().with_kind(ValueKind::Probability)?, &roi, cfg.target_xy)?;
    Ok((0..image.nz())
        .map(|k| SegSample {
            image: scaled(image.slice(k)),
            label: mask.slice(k).iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        })
        .collect())
}

/// Summed loss of every loss node (fused output plus side outputs) over a
/// batch of slices.
pub struct SegObjective<'a> {
    pub net: &'a NetworkSpec,
    pub side: usize,
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

impl SegObjective<'_> {
    fn batch(&self, samples: &[&SegSample]) -> Result<(Tensor, Tensor)> {
        let s = self.side;
        let images: Vec<&[Real]> = samples.iter().map(|x| x.image.as_slice()).collect();
        let mut labels = Vec::with_capacity(samples.len() * s * s);
        for x in samples {
            labels.extend_from_slice(&x.label);
        }
        Ok((batch_tensor(&images, s, s)?, Tensor::new(&[samples.len(), s, s], labels)?))
    }

    fn losses(&self, params: &ParamStore, samples: &[&SegSample]) -> Result<(Activations, Real)> {
        let (x, y) = self.batch(samples)?;
        let feeds = [(self.net.input, x), (self.net.labels.expect("segmentation net"), y)];
        let acts = self.net.graph.forward(params, &feeds, &self.net.losses)?;
        let total = self.net.losses.iter().map(|&l| acts.get(l).expect("loss evaluated").data()[0]).sum();
        Ok((acts, total))
    }
}

impl Objective for SegObjective<'_> {
    fn len(&self) -> usize {
        self.train.len()
    }

    fn accumulate(&self, params: &mut ParamStore, samples: &[usize]) -> Result<Real> {
        let batch: Vec<&SegSample> = samples.iter().map(|&i| &self.train[i]).collect();
        let (acts, total) = self.losses(params, &batch)?;
        let seeds: Vec<(NodeId, Tensor)> = self
            .net
            .losses
            .iter()
            .map(|&l| (l, Tensor::full(acts.get(l).expect("loss evaluated").shape(), 1.0)))
            .collect();
        self.net.graph.backward(params, &acts, &seeds)?;
        Ok(total)
    }

    fn validation_loss(&self, params: &ParamStore) -> Result<Option<Real>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for chunk in self.val.chunks(INFER_BATCH) {
            let refs: Vec<&SegSample> = chunk.iter().collect();
            total += self.losses(params, &refs)?.1 * chunk.len() as Real;
        }
        Ok(Some(total / self.val.len() as Real))
    }
}

/// One detector training slice.
#[derive(Clone, Debug, PartialEq)]
pub struct DetSample {
    pub image: Vec<Real>,
    pub targets: DetectionTargets,
}

/// Every slice of a phantom with its grid targets.
pub fn detection_samples(p: &Phantom, cell_size: usize) -> Vec<DetSample> {
    let [nx, ny, nz] = p.image.extents();
    let boxes = mask_to_bboxes(&p.mask);
    (0..nz)
        .map(|z| DetSample {
            image: scaled(p.image.slice(z)),
            targets: rasterize_grid_labels(boxes[z].as_slice(), nx, ny, cell_size),
        })
        .collect()
}

pub struct DetObjective<'a> {
    pub net: &'a NetworkSpec,
    pub extent: (usize, usize),
    pub train: Vec<DetSample>,
    pub val: Vec<DetSample>,
}

impl DetObjective<'_> {
    fn forward(&self, params: &ParamStore, samples: &[&DetSample]) -> Result<(Activations, Real, Tensor)> {
        let (h, w) = self.extent;
        let images: Vec<&[Real]> = samples.iter().map(|s| s.image.as_slice()).collect();
        let x = batch_tensor(&images, h, w)?;
        let acts = self.net.graph.forward(params, &[(self.net.input, x)], &[self.net.output])?;
        let truths: Vec<DetectionTargets> = samples.iter().map(|s| s.targets.clone()).collect();
        let (loss, grad) = detection_loss_head(acts.get(self.net.output).expect("head evaluated"), &truths)?;
        Ok((acts, loss, grad))
    }
}

impl Objective for DetObjective<'_> {
    fn len(&self) -> usize {
        self.train.len()
    }

    fn accumulate(&self, params: &mut ParamStore, samples: &[usize]) -> Result<Real> {
        let batch: Vec<&DetSample> = samples.iter().map(|&i| &self.train[i]).collect();
        let (acts, loss, grad) = self.forward(params, &batch)?;
        self.net.graph.backward(params, &acts, &[(self.net.output, grad)])?;
        Ok(loss)
    }

    fn validation_loss(&self, params: &ParamStore) -> Result<Option<Real>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for chunk in self.val.chunks(INFER_BATCH) {
            let refs: Vec<&DetSample> = chunk.iter().collect();
            total += self.forward(params, &refs)?.1 * chunk.len() as Real;
        }
        Ok(Some(total / self.val.len() as Real))
    }
}

/// Split pooled samples into training and validation parts.
fn split<T>(samples: Vec<T>, fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let held = validation_split(samples.len(), fraction, seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, h) in samples.into_iter().zip(held) {
        if h {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

/// A trained network and its loss curves.
#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ParamStore,
    pub report: TrainReport,
}

/// Train a segmentation network on the truth regions of `phantoms`.
pub fn train_segmentation(
    net: &NetworkSpec,
    phantoms: &[&Phantom],
    train_cfg: &TrainConfig,
    cfg: &PipelineConfig,
) -> Result<Trained> {
    let mut pooled = Vec::new();
    for p in phantoms {
        pooled.extend(segmentation_samples(p, cfg)?);
    }
    let (train_set, val) = split(pooled, cfg.validation_fraction, train_cfg.seed);
    let objective = SegObjective { net, side: cfg.target_xy, train: train_set, val };
    let mut params = arch::init_params(net, train_cfg.seed);
    let report = train(&mut params, &objective, train_cfg)?;
    Ok(Trained { params, report })
}

/// Train the slice detector on every slice of `phantoms`.
pub fn train_detector(
    net: &NetworkSpec,
    phantoms: &[&Phantom],
    train_cfg: &TrainConfig,
    cfg: &PipelineConfig,
) -> Result<Trained> {
    let cell = net.cell_size.ok_or_else(|| invalid(format!("{} is not a detector", net.name)))?;
    let first = phantoms.first().ok_or_else(|| invalid("no training volumes"))?;
    let extent = (first.image.ny(), first.image.nx());
    let mut pooled = Vec::new();
    for p in phantoms {
        if (p.image.ny(), p.image.nx()) != extent {
            return Err(invalid("training volumes differ in slice extent"));
        }
        pooled.extend(detection_samples(p, cell));
    }
    let (train_set, val) = split(pooled, cfg.validation_fraction, train_cfg.seed);
    let objective = DetObjective { net, extent, train: train_set, val };
    let mut params = arch::init_params(net, train_cfg.seed);
    let report = train(&mut params, &objective, train_cfg)?;
    Ok(Trained { params, report })
}

/// Detector output for a whole volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeDetection {
    pub boxes: Vec<BBox2D>,
    pub presence: Vec<bool>,
    pub intervals: Vec<(usize, usize)>,
    /// Slice span of the kept region, if any.
    pub span: Option<(usize, usize)>,
    /// Kept region after margin expansion.
    pub roi: Option<Roi3D>,
}

pub fn detect_volume(net: &NetworkSpec, params: &ParamStore, image: &Volume, cfg: &PipelineConfig) -> Result<VolumeDetection> {
    let cell = net.cell_size.ok_or_else(|| invalid(format!("{} is not a detector", net.name)))?;
    let [nx, ny, nz] = image.extents();
    let planes: Vec<Vec<Real>> = (0..nz).map(|z| scaled(image.slice(z))).collect();
    let mut boxes = Vec::new();
    let mut presence = vec![false; nz];
    for (c, chunk) in planes.chunks(INFER_BATCH).enumerate() {
        let refs: Vec<&[Real]> = chunk.iter().map(Vec::as_slice).collect();
        let head = arch::detector_forward(net, params, &batch_tensor(&refs, ny, nx)?)?;
        for item in 0..chunk.len() {
            let z = c * INFER_BATCH + item;
            let pred = DetectionTargets::from_head(&head, item, cell)?;
            let found = decode_candidates(&pred, z, nx, ny, cfg.decode);
            presence[z] = !found.is_empty();
            boxes.extend(found);
        }
    }
    let intervals = reconstruct_roi_z(&presence, cfg.run_length);
    let span = largest_interval(&intervals);
    let roi = span
        .and_then(|s| roi_from_boxes(&boxes, s, image))
        .map(|r| expand_and_clamp(&r, cfg.margin_x_mm, cfg.margin_y_mm));
    Ok(VolumeDetection { boxes, presence, intervals, span, roi })
}

/// Foreground probability of every slice of `image` inside `roi`, on the
/// resampled region grid.
pub fn segment_roi(net: &NetworkSpec, params: &ParamStore, image: &Volume, roi: &Roi3D, cfg: &PipelineConfig) -> Result<Volume> {
    let region = resample_roi(image, roi, cfg.target_xy)?;
    let s = cfg.target_xy;
    let planes: Vec<Vec<Real>> = (0..region.nz()).map(|z| scaled(region.slice(z))).collect();
    let mut probs = Vec::with_capacity(region.len());
    for chunk in planes.chunks(INFER_BATCH) {
        let refs: Vec<&[Real]> = chunk.iter().map(Vec::as_slice).collect();
        let p = arch::forward_probability(net, params, &batch_tensor(&refs, s, s)?)?;
        probs.extend(p.data().iter().map(|&v| (v as f64).clamp(0.0, 1.0)));
    }
    Ok(Volume::new(region.extents(), region.spacing(), probs, ValueKind::Probability)?.with_origin(region.origin()))
}

/// Post-process a region probability map and place the mask on the source grid.
pub fn finish_mask(prob: &Volume, roi: &Roi3D, cfg: &PipelineConfig) -> Result<Volume> {
    let mask = postprocess(prob, &cfg.postproc)?;
    let back = paste_roi(&mask.with_kind(ValueKind::Probability)?, roi)?;
    let voxels = back.voxels().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Volume::new(roi.source_extents, roi.spacing, voxels, ValueKind::Mask)
}

/// Result of the full detect-then-segment chain.
#[derive(Clone, Debug)]
pub struct End2End {
    pub detection: VolumeDetection,
    pub roi: Roi3D,
    pub probability: Volume,
    pub mask: Volume,
}

pub fn run_end2end(
    detector: (&NetworkSpec, &ParamStore),
    segmenter: (&NetworkSpec, &ParamStore),
    image: &Volume,
    cfg: &PipelineConfig,
) -> Result<End2End> {
    let detection = detect_volume(detector.0, detector.1, image, cfg)?;
    let roi = detection.roi.ok_or_else(|| {
        CoreError::NoRoi(format!(
            "no run of {} consecutive candidate slices among {} slices",
            cfg.run_length,
            image.nz()
        ))
    })?;
    let probability = segment_roi(segmenter.0, segmenter.1, image, &roi, cfg)?;
    let mask = finish_mask(&probability, &roi, cfg)?.with_origin(image.origin());
    Ok(End2End { detection, roi, probability, mask })
}

/// Segment a phantom inside its truth region and score the mask.
pub fn evaluate_segmentation(net: &NetworkSpec, params: &ParamStore, p: &Phantom, cfg: &PipelineConfig) -> Result<MetricsReport> {
    let roi = truth_roi(&p.mask, cfg).ok_or_else(|| invalid("phantom has an empty mask"))?;
    let prob = segment_roi(net, params, &p.image, &roi, cfg)?;
    let mask = finish_mask(&prob, &roi, cfg)?;
    overlap_report(&mask, &p.mask)
}

/// Detector slice span for one test volume against the observers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub dataset: usize,
    pub predicted: Option<(usize, usize)>,
    pub reference: (usize, usize),
    pub fnr: f64,
}

pub fn evaluate_detection(net: &NetworkSpec, params: &ParamStore, id: usize, p: &Phantom, cfg: &PipelineConfig) -> Result<DetectionEval> {
    let det = detect_volume(net, params, &p.image, cfg)?;
    let reference = observer_stats(&p.observers)?.reference;
    Ok(DetectionEval { dataset: id, predicted: det.span, reference, fnr: detection_slice_fnr(det.span, reference)? })
}

/// Outcome of one cross-validation fold.
#[derive(Clone, Debug)]
pub struct FoldOutcome<R> {
    pub fold: usize,
    pub test_ids: Vec<usize>,
    pub trained: Option<Trained>,
    pub results: Vec<R>,
    /// Set when training failed; the fold then has no results.
    pub failure: Option<String>,
}

/// Train and test each fold, running up to `threads` folds at once. Fold
/// `f` trains with seed `train_cfg.seed + f`, so results do not depend on
/// the thread count.
fn crossval<R: Send>(
    fold_count: usize,
    threads: usize,
    run: impl Fn(usize) -> Result<FoldOutcome<R>> + Sync,
) -> Result<Vec<FoldOutcome<R>>> {
    let folds: Vec<usize> = (0..fold_count).collect();
    let mut out = Vec::with_capacity(fold_count);
    for group in folds.chunks(threads.max(1)) {
        let results: Vec<Result<FoldOutcome<R>>> = thread::scope(|scope| {
            let run = &run;
            let handles: Vec<_> = group.iter().map(|&f| scope.spawn(move || run(f))).collect();
            handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn fold_train_cfg(base: &TrainConfig, fold: usize) -> TrainConfig {
    TrainConfig { seed: base.seed.wrapping_add(fold as u64), ..base.clone() }
}

fn train_or_flag(result: Result<Trained>) -> Result<(Option<Trained>, Option<String>)> {
    match result {
        Ok(t) => Ok((Some(t), None)),
        Err(e @ CoreError::Divergence { .. }) => {
            log::warn!("{e}");
            Ok((None, Some(e.to_string())))
        }
        Err(e) => Err(e),
    }
}

/// Per-dataset segmentation scores of every fold.
#[derive(Clone, Debug)]
pub struct SegCrossval {
    pub arch: ArchName,
    pub folds: Vec<FoldOutcome<(usize, MetricsReport)>>,
}

impl SegCrossval {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.folds.iter().flat_map(|f| f.results.iter().map(|r| r.1.clone())).collect()
    }

    pub fn aggregate(&self) -> Result<AggregateReport> {
        aggregate(&self.reports())
    }

    pub fn fold_aggregate(&self, fold: usize) -> Result<AggregateReport> {
        let reports: Vec<MetricsReport> = self.folds[fold].results.iter().map(|r| r.1.clone()).collect();
        aggregate(&reports)
    }

    /// True when any fold failed to train.
    pub fn partial(&self) -> bool {
        self.folds.iter().any(|f| f.failure.is_some())
    }
}

pub fn run_seg_crossval(
    phantoms: &[Phantom],
    plan: &FoldPlan,
    arch_name: ArchName,
    scale: Scale,
    train_cfg: &TrainConfig,
    cfg: &PipelineConfig,
    threads: usize,
) -> Result<SegCrossval> {
    let net = arch::build(arch_name, scale, 2)?;
    if !net.is_segmentation() {
        return Err(invalid(format!("{arch_name} is not a segmentation network")));
    }
    let folds = crossval(plan.fold_count, threads, |fold| {
        let test_ids = plan.test_ids(fold);
        let train_set: Vec<&Phantom> = plan.train_ids(fold).iter().map(|&i| &phantoms[i]).collect();
        let tc = fold_train_cfg(train_cfg, fold);
        log::info!("{arch_name} fold {fold}: training on {} volumes", train_set.len());
        let (trained, failure) = train_or_flag(train_segmentation(&net, &train_set, &tc, cfg))?;
        let mut results = Vec::new();
        if let Some(t) = &trained {
            for &id in &test_ids {
                results.push((id, evaluate_segmentation(&net, &t.params, &phantoms[id], cfg)?));
            }
        }
        Ok(FoldOutcome { fold, test_ids, trained, results, failure })
    })?;
    Ok(SegCrossval { arch: arch_name, folds })
}

pub fn run_detect_crossval(
    phantoms: &[Phantom],
    plan: &FoldPlan,
    scale: Scale,
    train_cfg: &TrainConfig,
    cfg: &PipelineConfig,
    threads: usize,
) -> Result<Vec<FoldOutcome<DetectionEval>>> {
    let net = arch::build_detector(arch::DEFAULT_CELL_SIZE, scale)?;
    crossval(plan.fold_count, threads, |fold| {
        let test_ids = plan.test_ids(fold);
        let train_set: Vec<&Phantom> = plan.train_ids(fold).iter().map(|&i| &phantoms[i]).collect();
        let tc = fold_train_cfg(train_cfg, fold);
        log::info!("detector fold {fold}: training on {} volumes", train_set.len());
        let (trained, failure) = train_or_flag(train_detector(&net, &train_set, &tc, cfg))?;
        let mut results = Vec::new();
        if let Some(t) = &trained {
            for &id in &test_ids {
                results.push(evaluate_detection(&net, &t.params, id, &phantoms[id], cfg)?);
            }
        }
        Ok(FoldOutcome { fold, test_ids, trained, results, failure })
    })
}
